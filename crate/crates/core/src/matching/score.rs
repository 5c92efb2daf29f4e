use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{uniform_init, BoundParams, ParamId, ParamStore};

/// Two-layer MLP scoring head for one direction.
#[derive(Clone, Debug)]
pub struct ScoreHead {
    pub w_h: ParamId,
    pub b_h: ParamId,
    pub w_s: ParamId,
    pub b_s: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub w_h: Var,
    pub b_h: Var,
    pub w_s: Var,
    pub b_s: Var,
}

impl ScoreHead {
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, in_dim: usize, hidden: usize) -> Self {
        Self {
            w_h: store.insert(format!("{prefix}.w_h"), uniform_init(rng, &[in_dim, hidden], in_dim), true),
            b_h: store.insert(format!("{prefix}.b_h"), uniform_init(rng, &[hidden], in_dim), true),
            w_s: store.insert(format!("{prefix}.w_s"), uniform_init(rng, &[hidden, 1], hidden), true),
            b_s: store.insert(format!("{prefix}.b_s"), uniform_init(rng, &[1], hidden), true),
        }
    }

    pub fn bind(&self, p: &BoundParams) -> HeadVars {
        HeadVars {
            w_h: p.var(self.w_h),
            b_h: p.var(self.b_h),
            w_s: p.var(self.w_s),
            b_s: p.var(self.b_s),
        }
    }
}

/// Mean over nodes of `W_sᵀ tanh(W_hᵀ x̂_i + b_h) + b_s`.
pub fn score_direction(tape: &Tape, nodes: Var, head: &HeadVars) -> Result<Var> {
    let hidden = tape.tanh(tape.add_row(tape.matmul(nodes, head.w_h)?, head.b_h)?);
    let per_node = tape.add_row(tape.matmul(hidden, head.w_s)?, head.b_s)?;
    tape.reshape(tape.mean_rows(per_node), vec![])
}
