use crate::autodiff::{Tape, Var};
use crate::error::{GsmnError, Result};

/// Hardest negatives of a `[B×B]` similarity matrix: for each `i`, the
/// column `j ≠ i` maximising `S[i][j]` and the row `k ≠ i` maximising
/// `S[k][i]`. Samples sharing a group with `i` are not negatives. Ties go
/// to the lowest index. `None` when `i` has no negative at all.
pub fn hardest_negatives(
    scores: &[f64],
    b: usize,
    groups: Option<&[usize]>,
) -> Vec<(Option<usize>, Option<usize>)> {
    let same = |i: usize, j: usize| match groups {
        Some(g) => g[i] == g[j],
        None => i == j,
    };
    let argmax = |cands: &mut dyn Iterator<Item = (usize, f64)>| {
        let mut best: Option<(usize, f64)> = None;
        for (k, v) in cands {
            if best.map_or(true, |(_, bv)| v > bv) {
                best = Some((k, v));
            }
        }
        best.map(|(k, _)| k)
    };
    (0..b)
        .map(|i| {
            let row = argmax(&mut (0..b).filter(|&j| !same(i, j)).map(|j| (j, scores[i * b + j])));
            let col = argmax(&mut (0..b).filter(|&k| !same(i, k)).map(|k| (k, scores[k * b + i])));
            (row, col)
        })
        .collect()
}

/// Hinge triplet loss over in-batch hardest negatives, averaged over the
/// batch: `Σ_i [γ − S_ii + S_ij*]₊ + [γ − S_ii + S_k*i]₊` divided by `B`.
pub fn triplet_loss_batch(
    tape: &Tape,
    sims: Var,
    margin: f64,
    groups: Option<&[usize]>,
) -> Result<Var> {
    let shape = tape.shape(sims);
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(GsmnError::dim("triplet_loss_batch", &shape, &[]));
    }
    let b = shape[0];
    if b < 2 {
        return Err(GsmnError::Contract(format!("batch of {b} has no negatives")));
    }
    if let Some(g) = groups {
        if g.len() != b {
            return Err(GsmnError::dim("triplet_loss_batch", &shape, &[g.len()]));
        }
    }
    let values = tape.value(sims);
    let negatives = hardest_negatives(values.data(), b, groups);

    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, (row, col)) in negatives.into_iter().enumerate() {
        for j in [row.map(|j| i * b + j), col.map(|k| k * b + i)].into_iter().flatten() {
            pos.push(i * b + i);
            neg.push(j);
        }
    }
    if pos.is_empty() {
        let zero = tape.scale(tape.sum(sims), 0.0);
        return Ok(zero);
    }
    let diag = tape.gather(sims, &pos)?;
    let hard = tape.gather(sims, &neg)?;
    let gap = tape.offset(tape.sub(hard, diag)?, margin);
    let hinge = tape.relu(gap);
    Ok(tape.scale(tape.sum(hinge), 1.0 / b as f64))
}
