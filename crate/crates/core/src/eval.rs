//! Retrieval metrics over a query × candidate score matrix.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::autodiff::Tensor;
use crate::error::{GsmnError, Result};
use crate::graphio::RetrievalSplit;
use crate::model::GsmnModel;

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalDirection {
    I2t,
    T2i,
}

impl fmt::Display for RetrievalDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::I2t => "i2t",
            Self::T2i => "t2i",
        })
    }
}

/// Candidate indices by descending score. The sort is stable, so equal
/// scores keep ascending index order.
pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Percentage of queries (rows of `sims`) whose top `k` candidates contain
/// at least one of their ground-truth indices.
pub fn recall_at_k(sims: &Tensor, truth: &[Vec<usize>], k: usize) -> Result<f64> {
    if !sims.is_matrix() {
        return Err(GsmnError::dim("recall_at_k", sims.shape(), &[]));
    }
    let (q, c) = (sims.rows(), sims.cols());
    if truth.len() != q {
        return Err(GsmnError::dim("recall_at_k", sims.shape(), &[truth.len()]));
    }
    if k == 0 || k > c {
        return Err(GsmnError::Contract(format!("recall@{k} over {c} candidates")));
    }
    if q == 0 {
        return Err(GsmnError::Contract("recall over zero queries".into()));
    }
    let mut hits = 0usize;
    for (i, gt) in truth.iter().enumerate() {
        if gt.is_empty() {
            return Err(GsmnError::Contract(format!("query {i} has no ground truth")));
        }
        if rank_desc(sims.row(i))[..k].iter().any(|j| gt.contains(j)) {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / q as f64)
}

/// Sum of the six recall percentages.
pub fn rsum(i2t: &[f64; 3], t2i: &[f64; 3]) -> f64 {
    i2t.iter().chain(t2i).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Ranking {
    pub query: String,
    pub candidates: Vec<String>,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrievalResult {
    pub direction: RetrievalDirection,
    pub recalls: BTreeMap<usize, f64>,
    #[serde(skip)]
    pub rankings: Vec<Ranking>,
}

impl RetrievalResult {
    pub fn as_array(&self) -> [f64; 3] {
        RECALL_KS.map(|k| self.recalls[&k])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub i2t: RetrievalResult,
    pub t2i: RetrievalResult,
    pub rsum: f64,
}

impl fmt::Display for Evaluation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in [&self.i2t, &self.t2i] {
            let [r1, r5, r10] = r.as_array();
            writeln!(f, "{}: R@1 {r1:.1}  R@5 {r5:.1}  R@10 {r10:.1}", r.direction)?;
        }
        write!(f, "rSum {:.1}", self.rsum)
    }
}

fn direction_result(
    direction: RetrievalDirection,
    sims: &Tensor,
    truth: &[Vec<usize>],
    query_ids: &[&str],
    candidate_ids: &[&str],
) -> Result<RetrievalResult> {
    // Cutoffs beyond the candidate count cover every candidate.
    let mut recalls = BTreeMap::new();
    for k in RECALL_KS {
        recalls.insert(k, recall_at_k(sims, truth, k.min(sims.cols()))?);
    }
    let rankings = (0..sims.rows())
        .map(|i| {
            let row = sims.row(i);
            let order = rank_desc(row);
            Ranking {
                query: query_ids[i].to_string(),
                candidates: order.iter().map(|&j| candidate_ids[j].to_string()).collect(),
                scores: order.iter().map(|&j| row[j]).collect(),
            }
        })
        .collect();
    Ok(RetrievalResult {
        direction,
        recalls,
        rankings,
    })
}

/// Both retrieval directions from an `[images × texts]` score matrix.
pub fn evaluate_matrix(sims: &Tensor, split: &RetrievalSplit<'_>) -> Result<Evaluation> {
    if split.is_empty() {
        return Err(GsmnError::Contract("empty retrieval split".into()));
    }
    let n_img = split.images.len();
    if sims.shape() != [n_img, split.texts.len()] {
        return Err(GsmnError::dim(
            "evaluate_matrix",
            sims.shape(),
            &[n_img, split.texts.len()],
        ));
    }
    let image_ids: Vec<&str> = split.images.iter().map(|i| i.id.as_str()).collect();
    let text_ids: Vec<&str> = split.texts.iter().map(|t| t.id.as_str()).collect();
    let mut image_truth = vec![Vec::new(); n_img];
    for (t, &k) in split.text_image.iter().enumerate() {
        image_truth[k].push(t);
    }
    let text_truth: Vec<Vec<usize>> = split.text_image.iter().map(|&k| vec![k]).collect();
    let i2t = direction_result(RetrievalDirection::I2t, sims, &image_truth, &image_ids, &text_ids)?;
    let transposed = sims.transpose();
    let t2i = direction_result(RetrievalDirection::T2i, &transposed, &text_truth, &text_ids, &image_ids)?;
    let rsum = rsum(&i2t.as_array(), &t2i.as_array());
    Ok(Evaluation { i2t, t2i, rsum })
}

/// Score matrix of one model, or the average of several.
pub fn score_split(models: &[&GsmnModel], split: &RetrievalSplit<'_>) -> Result<Tensor> {
    let Some((first, rest)) = models.split_first() else {
        return Err(GsmnError::Contract("no model to evaluate".into()));
    };
    let mut sims = first.similarity_matrix(&split.images, &split.texts)?;
    for m in rest {
        let other = m.similarity_matrix(&split.images, &split.texts)?;
        for (a, b) in sims.data_mut().iter_mut().zip(other.data()) {
            *a += b;
        }
    }
    let n = models.len() as f64;
    for v in sims.data_mut() {
        *v /= n;
    }
    Ok(sims)
}

/// Recalls averaged over `folds` contiguous image folds, with rankings
/// from every fold concatenated.
pub fn evaluate(models: &[&GsmnModel], split: &RetrievalSplit<'_>, folds: usize) -> Result<Evaluation> {
    if folds == 0 || folds > split.images.len() {
        return Err(GsmnError::Config(format!(
            "{folds} folds over {} images",
            split.images.len()
        )));
    }
    if folds == 1 {
        return evaluate_matrix(&score_split(models, split)?, split);
    }
    let mut parts = Vec::with_capacity(folds);
    for f in 0..folds {
        let sub = split.fold(f, folds);
        parts.push(evaluate_matrix(&score_split(models, &sub)?, &sub)?);
    }
    let merge = |pick: fn(&Evaluation) -> &RetrievalResult| {
        let first = pick(&parts[0]);
        let recalls = RECALL_KS
            .iter()
            .map(|k| {
                let mean = parts.iter().map(|e| pick(e).recalls[k]).sum::<f64>() / folds as f64;
                (*k, mean)
            })
            .collect();
        RetrievalResult {
            direction: first.direction,
            recalls,
            rankings: parts.iter().flat_map(|e| pick(e).rankings.clone()).collect(),
        }
    };
    let i2t = merge(|e| &e.i2t);
    let t2i = merge(|e| &e.t2i);
    let rsum = rsum(&i2t.as_array(), &t2i.as_array());
    Ok(Evaluation { i2t, t2i, rsum })
}
