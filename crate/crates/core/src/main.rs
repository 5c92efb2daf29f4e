use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use gsmn::autodiff::Tape;
use gsmn::config::{Config, Preset};
use gsmn::eval::evaluate;
use gsmn::graphio::{load_corpus, synthesize_to_dir, Split, SynthOptions};
use gsmn::train::{fit, load_checkpoint, Checkpoint};
use gsmn::{GsmnError, Result};

#[derive(Parser)]
#[command(name = "gsmn", version, about = "Graph structured image-text matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus of toy scenes and captions.
    Synth {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        images: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
        /// Probability that an odd-indexed image is a twin of its predecessor.
        #[arg(long)]
        twin_prob: Option<f64>,
        /// Share of twins that mirror the layout instead of swapping colours.
        #[arg(long)]
        layout_share: Option<f64>,
    },
    /// Train a model and write checkpoints, metrics and a manifest.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Recall@K and rSum of one checkpoint, or of an averaged pair.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        ckpt2: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 1)]
        folds: usize,
        /// Rankings dump; defaults to `rankings_<split>.jsonl` beside the checkpoint.
        #[arg(long)]
        rankings: Option<PathBuf>,
    },
    /// Score one image-text pair.
    Match {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: String,
        #[arg(long)]
        text: String,
        /// Write attention weights as JSON lines.
        #[arg(long)]
        attention: Option<PathBuf>,
    },
    /// Print the metadata and parameter shapes of a checkpoint.
    InspectCkpt {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<Config> {
        let mut c = match &self.config {
            Some(path) => Config::from_file(path)?,
            None => Config::default(),
        };
        if let Some(p) = self.preset {
            c.apply_preset(p);
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| GsmnError::Config(format!("override {kv:?} is not KEY=VALUE")))?;
            c.set(k, v)?;
        }
        if let Some(s) = self.seed {
            c.train.seed = s;
        }
        if let Some(e) = self.epochs {
            c.train.epochs = e;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Serialize)]
struct AttentionLine<'a> {
    direction: &'a str,
    query: usize,
    weights: &'a [f64],
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| GsmnError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut w = BufWriter::new(file);
    let emit = || -> std::io::Result<()> {
        for item in items {
            serde_json::to_writer(&mut w, &item)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    };
    emit().map_err(|e| GsmnError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            seed,
            images,
            dim,
            out,
            twin_prob,
            layout_share,
        } => {
            let mut opts = SynthOptions::default();
            opts.twin_prob = twin_prob.unwrap_or(opts.twin_prob);
            opts.layout_share = layout_share.unwrap_or(opts.layout_share);
            let report = synthesize_to_dir(&out, seed, images, dim, opts)?;
            println!(
                "wrote {images} images to {} ({} binding twins, {} layout twins, max prototype cosine {:.4})",
                out.display(),
                report.binding_twins,
                report.layout_twins,
                report.max_prototype_cosine
            );
        }
        Command::Train { data, out, cfg } => {
            let config = cfg.resolve()?;
            let (corpus, vocab) = load_corpus(&data)?;
            let outcome = fit(&corpus, vocab, config, Some(&out))?;
            println!(
                "best epoch {} val rSum {}",
                outcome.best_epoch,
                outcome.best_rsum.map_or("-".into(), |r| format!("{r:.1}"))
            );
        }
        Command::Eval {
            data,
            ckpt,
            ckpt2,
            split,
            folds,
            rankings,
        } => {
            let (corpus, _) = load_corpus(&data)?;
            let (m1, _) = load_checkpoint(&ckpt)?;
            let m2 = ckpt2.as_deref().map(load_checkpoint).transpose()?.map(|(m, _)| m);
            let mut models = vec![&m1];
            models.extend(m2.as_ref());
            let view = corpus.retrieval_split(split);
            let result = evaluate(&models, &view, folds)?;
            println!("{result}");
            let path = rankings.unwrap_or_else(|| {
                ckpt.parent()
                    .unwrap_or(Path::new("."))
                    .join(format!("rankings_{split}.jsonl"))
            });
            let lines = result.i2t.rankings.iter().map(|r| ("i2t", r)).chain(
                result.t2i.rankings.iter().map(|r| ("t2i", r)),
            );
            #[derive(Serialize)]
            struct Line<'a> {
                direction: &'a str,
                #[serde(flatten)]
                ranking: &'a gsmn::eval::Ranking,
            }
            write_jsonl(&path, lines.map(|(direction, ranking)| Line { direction, ranking }))?;
            log::info!("rankings written to {}", path.display());
        }
        Command::Match {
            data,
            ckpt,
            image,
            text,
            attention,
        } => {
            let (corpus, _) = load_corpus(&data)?;
            let (model, _) = load_checkpoint(&ckpt)?;
            let img = corpus
                .image(&image)
                .ok_or_else(|| GsmnError::Integrity(format!("unknown image {image}")))?;
            let txt = corpus
                .text(&text)
                .ok_or_else(|| GsmnError::Integrity(format!("unknown text {text}")))?;
            let tape = Tape::new();
            let vars = model.bind(&tape);
            let t = model.text_side(&tape, &vars, txt)?;
            let i = model.image_side(&tape, &vars, img)?;
            let (g, trace) = model.pair(&tape, &vars, &t, &i)?;
            println!("similarity {:.6}", tape.scalar_value(g));
            for (name, s) in [("t2i", trace.score_t2i), ("i2t", trace.score_i2t)] {
                if let Some(s) = s {
                    println!("  {name} {:.6}", tape.scalar_value(s));
                }
            }
            if let Some(path) = attention {
                let mut lines = Vec::new();
                for (name, a) in [("t2i", trace.attn_t2i), ("i2t", trace.attn_i2t)] {
                    if let Some(a) = a {
                        lines.push((name, tape.value(a)));
                    }
                }
                let rows = lines.iter().flat_map(|(name, a)| {
                    (0..a.rows()).map(move |q| AttentionLine {
                        direction: name,
                        query: q,
                        weights: a.row(q),
                    })
                });
                write_jsonl(&path, rows)?;
            }
        }
        Command::InspectCkpt { ckpt } => {
            let c = Checkpoint::load(&ckpt)?;
            println!("epoch {}", c.epoch);
            println!("val rSum {:.1}", c.val_rsum);
            println!("region dim {}", c.region_dim);
            println!("vocabulary {} tokens", c.vocab_tokens.len());
            println!("config:");
            for line in c.config_text.lines() {
                println!("  {line}");
            }
            let total: usize = c.params.iter().map(|(_, t)| t.len()).sum();
            println!("parameters ({total} scalars):");
            for (name, t) in &c.params {
                println!("  {name} {:?}", t.shape());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
