use crate::autodiff::{Tape, Var};
use crate::error::Result;

/// Cross-modal attention of `queries` `[p×d]` over `keys` `[q×d]`.
/// Returns the `[p×q]` row-stochastic weights `softmax(λ Q Kᵀ)` and the
/// attended features `weights · K`.
pub fn attend(tape: &Tape, queries: Var, keys: Var, lambda: f64) -> Result<(Var, Var)> {
    let kt = tape.transpose(keys)?;
    let scores = tape.matmul(queries, kt)?;
    let weights = tape.softmax_rows(scores, lambda)?;
    let attended = tape.matmul(weights, keys)?;
    Ok((weights, attended))
}

/// Each word node attends over the region nodes.
pub fn attend_t2i(tape: &Tape, words: Var, regions: Var, lambda: f64) -> Result<Var> {
    Ok(attend(tape, words, regions, lambda)?.1)
}

/// Each region node attends over the word nodes.
pub fn attend_i2t(tape: &Tape, regions: Var, words: Var, lambda: f64) -> Result<Var> {
    Ok(attend(tape, regions, words, lambda)?.1)
}

/// Block-wise cosine of two `[d]` vectors split into `blocks` pieces.
pub fn multi_block(tape: &Tape, x: Var, c: Var, blocks: usize) -> Result<Var> {
    let xs = tape.slice_blocks(x, blocks)?;
    let cs = tape.slice_blocks(c, blocks)?;
    let sims = xs
        .into_iter()
        .zip(cs)
        .map(|(a, b)| tape.cosine(a, b))
        .collect::<Result<Vec<_>>>()?;
    tape.concat(&sims)
}

/// Matching vectors `[p×t]`: row `i` is the block-wise cosine between node
/// `i` and its attended counterpart.
pub fn node_level_match(tape: &Tape, nodes: Var, attended: Var, blocks: usize) -> Result<Var> {
    tape.block_cosine_rows(nodes, attended, blocks)
}

/// Shannon entropy of every row of a row-stochastic matrix.
pub fn row_entropy(weights: &crate::autodiff::Tensor) -> Vec<f64> {
    (0..weights.rows())
        .map(|r| {
            -weights
                .row(r)
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|p| p * p.ln())
                .sum::<f64>()
        })
        .collect()
}
