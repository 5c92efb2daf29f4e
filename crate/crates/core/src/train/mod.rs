//! Triplet objective, Adam, the epoch loop and checkpoints.

mod adam;
mod checkpoint;
mod loss;

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use adam::{clip_grad_norm, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};
pub use loss::{hardest_negatives, triplet_loss_batch};

use crate::autodiff::Tape;
use crate::config::Config;
use crate::error::{GsmnError, Result};
use crate::eval::{evaluate, Evaluation};
use crate::graphio::{Corpus, PairSample, Split, Vocabulary};
use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::model::GsmnModel;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_CHECKPOINT: &str = "best";
pub const LAST_CHECKPOINT: &str = "last";

/// Loss and gradients of one mini-batch. Row `i` of the similarity matrix
/// is the image of sample `i`, column `j` the text of sample `j`. Samples
/// sharing an image are never each other's negatives.
pub fn batch_loss(
    model: &GsmnModel,
    corpus: &Corpus,
    batch: &[&PairSample],
) -> Result<(f64, Vec<crate::autodiff::Tensor>)> {
    let tape = Tape::new();
    let vars = model.bind(&tape);
    let mut group_of: HashMap<&str, usize> = HashMap::new();
    let mut image_sides = Vec::new();
    let mut groups = Vec::with_capacity(batch.len());
    for p in batch {
        let next = group_of.len();
        let g = *group_of.entry(p.image_id.as_str()).or_insert(next);
        if g == image_sides.len() {
            let img = corpus
                .image(&p.image_id)
                .ok_or_else(|| GsmnError::Integrity(format!("missing image {}", p.image_id)))?;
            image_sides.push(model.image_side(&tape, &vars, img)?);
        }
        groups.push(g);
    }
    let text_sides = batch
        .iter()
        .map(|p| {
            let t = corpus
                .text(&p.text_id)
                .ok_or_else(|| GsmnError::Integrity(format!("missing text {}", p.text_id)))?;
            model.text_side(&tape, &vars, t)
        })
        .collect::<Result<Vec<_>>>()?;
    let b = batch.len();
    let mut cells = Vec::with_capacity(b * b);
    for &g in &groups {
        for t in &text_sides {
            cells.push(model.pair(&tape, &vars, t, &image_sides[g])?.0);
        }
    }
    let sims = tape.stack(&cells, vec![b, b])?;
    let loss = triplet_loss_batch(&tape, sims, model.config.train.margin, Some(&groups))?;
    let value = tape.scalar_value(loss);
    let bound = vars.bound;
    let mut grads = tape.backward(loss)?;
    Ok((value, bound.collect_grads(&model.params, &mut grads)))
}

/// Seeded shuffle of the train pairs cut into mini-batches. A trailing
/// single sample joins the previous batch.
pub fn make_batches<'a>(
    corpus: &'a Corpus,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<&'a PairSample>>> {
    let mut pairs: Vec<&PairSample> = corpus.split_pairs(Split::Train).collect();
    if pairs.len() < 2 {
        return Err(GsmnError::Contract(format!(
            "train split has {} pairs, at least 2 are needed",
            pairs.len()
        )));
    }
    pairs.shuffle(rng);
    let mut batches: Vec<Vec<&PairSample>> =
        pairs.chunks(batch_size.max(2)).map(|c| c.to_vec()).collect();
    if batches.len() > 1 && batches.last().map_or(false, |b| b.len() == 1) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(tail);
    }
    Ok(batches)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub batches: usize,
}

/// Optimizer and shuffling state carried across epochs.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
}

impl Trainer {
    pub fn new(model: &GsmnModel) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(model.config.train.seed);
        rng.set_stream(1);
        Self {
            adam: AdamState::new(&model.params),
            rng,
            epoch: 0,
        }
    }

    /// One pass over the train split. Returns the mean batch loss.
    pub fn train_epoch(&mut self, model: &mut GsmnModel, corpus: &Corpus) -> Result<EpochStats> {
        let cfg = model.config.train.clone();
        let lr = cfg.lr_at(self.epoch);
        let batches = make_batches(corpus, cfg.batch_size, &mut self.rng)?;
        let mut total = 0.0;
        for batch in &batches {
            let (loss, mut grads) = batch_loss(model, corpus, batch)?;
            if !loss.is_finite() {
                return Err(GsmnError::Numeric(format!(
                    "non-finite loss in epoch {}",
                    self.epoch + 1
                )));
            }
            clip_grad_norm(&mut grads, cfg.grad_clip);
            self.adam.step(&mut model.params, &grads, lr)?;
            total += loss;
        }
        self.epoch += 1;
        let stats = EpochStats {
            epoch: self.epoch,
            mean_loss: total / batches.len() as f64,
            lr,
            batches: batches.len(),
        };
        Ok(stats)
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub val_r1_i2t: Option<f64>,
    pub val_r1_t2i: Option<f64>,
    pub val_rsum: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: GsmnModel,
    pub best_epoch: usize,
    pub best_rsum: Option<f64>,
    pub last: GsmnModel,
    pub history: Vec<MetricsRecord>,
}

fn append_line(file: &mut File, path: &Path, record: &MetricsRecord) -> Result<()> {
    let line = serde_json::to_string(record).expect("metrics serialise");
    writeln!(file, "{line}").map_err(|e| GsmnError::io(path, e))
}

/// Trains for `config.train.epochs` epochs, validating after each one and
/// keeping the model with the highest validation rSum (the latest epoch
/// when there is no validation split). With `out`, writes the manifest,
/// the metrics log and the `best` and `last` checkpoints there.
pub fn fit(corpus: &Corpus, vocab: Vocabulary, config: Config, out: Option<&Path>) -> Result<TrainOutcome> {
    let mut model = GsmnModel::new(config, vocab, corpus.feature_dim())?;
    let mut trainer = Trainer::new(&model);
    let val = corpus.retrieval_split(Split::Val);

    let mut metrics = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| GsmnError::io(dir, e))?;
            RunManifest::new(&model.config, corpus).write(&dir.join(MANIFEST_FILE))?;
            let path = dir.join(METRICS_FILE);
            Some((File::create(&path).map_err(|e| GsmnError::io(&path, e))?, path))
        }
        None => None,
    };

    let mut best: Option<(GsmnModel, usize, Option<f64>)> = None;
    let mut history = Vec::new();
    for _ in 0..model.config.train.epochs {
        let stats = trainer.train_epoch(&mut model, corpus)?;
        let eval: Option<Evaluation> = if val.is_empty() {
            None
        } else {
            Some(evaluate(&[&model], &val, 1)?)
        };
        let record = MetricsRecord {
            epoch: stats.epoch,
            mean_loss: stats.mean_loss,
            lr: stats.lr,
            val_r1_i2t: eval.as_ref().map(|e| e.i2t.recalls[&1]),
            val_r1_t2i: eval.as_ref().map(|e| e.t2i.recalls[&1]),
            val_rsum: eval.as_ref().map(|e| e.rsum),
        };
        log::info!(
            "epoch {} loss {:.5} lr {:.2e} val rSum {}",
            stats.epoch,
            stats.mean_loss,
            stats.lr,
            record.val_rsum.map_or("-".into(), |r| format!("{r:.1}"))
        );
        if let Some((file, path)) = metrics.as_mut() {
            append_line(file, path, &record)?;
        }
        let improved = match (&best, record.val_rsum) {
            (None, _) | (_, None) => true,
            (Some((_, _, Some(prev))), Some(now)) => now > *prev,
            (Some((_, _, None)), Some(_)) => true,
        };
        if improved {
            if let Some(dir) = out {
                save_checkpoint(
                    &dir.join(BEST_CHECKPOINT),
                    &model,
                    stats.epoch,
                    record.val_rsum.unwrap_or(f64::NAN),
                )?;
            }
            best = Some((model.clone(), stats.epoch, record.val_rsum));
        }
        history.push(record);
    }
    if let Some(dir) = out {
        let rsum = history.last().and_then(|r| r.val_rsum).unwrap_or(f64::NAN);
        save_checkpoint(&dir.join(LAST_CHECKPOINT), &model, trainer.epoch, rsum)?;
    }
    let (best, best_epoch, best_rsum) = best.unwrap_or_else(|| (model.clone(), 0, None));
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_rsum,
        last: model,
        history,
    })
}
