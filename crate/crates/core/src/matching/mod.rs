//! Node-level matching (cross attention and multi-block similarity),
//! structure-level matching (graph convolution) and the directional score
//! heads, combined into one pair similarity.

mod attention;
mod gcn;
mod score;

use rand_chacha::ChaCha8Rng;

pub use attention::{attend, attend_i2t, attend_t2i, multi_block, node_level_match, row_entropy};
pub use gcn::{
    activate, gcn_layer, softplus_inverse, visual_edge_weight, visual_edge_weight_raw,
    visual_kernel_weights, visual_layer_weights, GcnParams, GcnVars,
};
pub use score::{score_direction, HeadVars, ScoreHead};

use crate::autodiff::{Tape, Var};
use crate::config::MatchConfig;
use crate::error::Result;
use crate::params::{BoundParams, ParamStore};

/// Learnable parameters of both matching directions.
#[derive(Clone, Debug)]
pub struct MatchParams {
    pub text_gcn: Vec<GcnParams>,
    pub visual_gcn: Vec<GcnParams>,
    pub text_head: ScoreHead,
    pub visual_head: ScoreHead,
}

impl MatchParams {
    /// Parameters are created for both directions regardless of the
    /// direction switch, so every preset shares one parameter layout.
    pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &MatchConfig) -> Self {
        let mut text_gcn = Vec::new();
        let mut visual_gcn = Vec::new();
        let head_in = if cfg.use_structure {
            let width = cfg.kernels * cfg.kernel_dim;
            for layer in 0..cfg.gcn_depth {
                let in_dim = if layer == 0 { cfg.blocks } else { width };
                text_gcn.push(GcnParams::init(
                    store,
                    rng,
                    &format!("match.text_gcn{layer}"),
                    in_dim,
                    cfg.kernels,
                    cfg.kernel_dim,
                    false,
                ));
                visual_gcn.push(GcnParams::init(
                    store,
                    rng,
                    &format!("match.visual_gcn{layer}"),
                    in_dim,
                    cfg.kernels,
                    cfg.kernel_dim,
                    true,
                ));
            }
            width
        } else {
            cfg.blocks
        };
        let text_head = ScoreHead::init(store, rng, "match.text_head", head_in, cfg.mlp_hidden);
        let visual_head = ScoreHead::init(store, rng, "match.visual_head", head_in, cfg.mlp_hidden);
        Self {
            text_gcn,
            visual_gcn,
            text_head,
            visual_head,
        }
    }

    pub fn bind(&self, p: &BoundParams) -> MatchVars {
        MatchVars {
            text_gcn: self.text_gcn.iter().map(|g| g.bind(p)).collect(),
            visual_gcn: self.visual_gcn.iter().map(|g| g.bind(p)).collect(),
            text_head: self.text_head.bind(p),
            visual_head: self.visual_head.bind(p),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MatchVars {
    pub text_gcn: Vec<GcnVars>,
    pub visual_gcn: Vec<GcnVars>,
    pub text_head: HeadVars,
    pub visual_head: HeadVars,
}

/// Word nodes of one text on a tape, with its edge weights when the
/// structure-level path needs them.
#[derive(Clone, Debug)]
pub struct TextSide {
    pub nodes: Var,
    pub weights: Option<Var>,
}

/// Region nodes of one image, with per-layer, per-kernel edge weights.
#[derive(Clone, Debug)]
pub struct ImageSide {
    pub nodes: Var,
    pub layer_weights: Vec<Vec<Var>>,
}

/// Intermediate handles of one pair evaluation, for inspection.
#[derive(Clone, Debug, Default)]
pub struct PairTrace {
    pub attn_t2i: Option<Var>,
    pub match_t2i: Option<Var>,
    pub score_t2i: Option<Var>,
    pub attn_i2t: Option<Var>,
    pub match_i2t: Option<Var>,
    pub score_i2t: Option<Var>,
}

fn directional_score(
    tape: &Tape,
    cfg: &MatchConfig,
    nodes: Var,
    others: Var,
    weights: &[Vec<Var>],
    gcn: &[GcnVars],
    head: &HeadVars,
) -> Result<(Var, Var, Var)> {
    let (attn, attended) = attend(tape, nodes, others, cfg.lambda_attn)?;
    let matched = node_level_match(tape, nodes, attended, cfg.blocks)?;
    let mut x = matched;
    if cfg.use_structure {
        for (layer, params) in gcn.iter().enumerate() {
            x = gcn_layer(tape, x, &weights[layer], params, cfg.gcn_activation)?;
        }
    }
    let s = score_direction(tape, x, head)?;
    Ok((s, attn, matched))
}

/// Global similarity `g = s_t→i + s_i→t` of one text-image pair, limited
/// to the directions enabled in `cfg`.
pub fn pair_similarity(
    tape: &Tape,
    cfg: &MatchConfig,
    vars: &MatchVars,
    text: &TextSide,
    image: &ImageSide,
) -> Result<(Var, PairTrace)> {
    let mut trace = PairTrace::default();
    let mut parts = Vec::with_capacity(2);
    if cfg.direction.t2i() {
        let text_weights: Vec<Vec<Var>> = match text.weights {
            Some(w) if cfg.use_structure => vec![vec![w; cfg.kernels]; cfg.gcn_depth],
            _ => Vec::new(),
        };
        let (s, attn, matched) = directional_score(
            tape,
            cfg,
            text.nodes,
            image.nodes,
            &text_weights,
            &vars.text_gcn,
            &vars.text_head,
        )?;
        trace.attn_t2i = Some(attn);
        trace.match_t2i = Some(matched);
        trace.score_t2i = Some(s);
        parts.push(s);
    }
    if cfg.direction.i2t() {
        let (s, attn, matched) = directional_score(
            tape,
            cfg,
            image.nodes,
            text.nodes,
            &image.layer_weights,
            &vars.visual_gcn,
            &vars.visual_head,
        )?;
        trace.attn_i2t = Some(attn);
        trace.match_i2t = Some(matched);
        trace.score_i2t = Some(s);
        parts.push(s);
    }
    let g = match parts.as_slice() {
        [single] => *single,
        [a, b] => tape.add(*a, *b)?,
        _ => unreachable!("at least one direction is enabled"),
    };
    Ok((g, trace))
}

/// Average of the sparse-graph and dense-graph similarities.
pub fn ensemble_similarity(g_sparse: f64, g_dense: f64) -> f64 {
    (g_sparse + g_dense) / 2.0
}
