//! Kernelised graph convolution over node matching vectors.
//!
//! For kernel `k`, node `i` aggregates `Σ_j w_ij,k · (W_kᵀ x_j)` over its
//! neighbours, adds the shared bias and applies the activation; kernel
//! outputs are concatenated. Textual graphs use the same edge weight matrix
//! for every kernel. Visual graphs derive one weight matrix per kernel from
//! the polar edge coordinates through a learnable wrapped Gaussian.

use std::f64::consts::PI;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{softplus, wrap_angle, Tape, Tensor, Var};
use crate::config::Activation;
use crate::error::{GsmnError, Result};
use crate::graphbuild::VisualGraph;
use crate::params::{uniform_init, BoundParams, ParamId, ParamStore};

/// Parameter ids of one convolution layer.
#[derive(Clone, Debug)]
pub struct GcnParams {
    pub kernels: Vec<ParamId>,
    pub bias: ParamId,
    /// Per-kernel `(μ, raw σ)` pairs for visual graphs; σ = softplus(raw).
    pub pseudo: Option<Vec<(ParamId, ParamId)>>,
}

#[derive(Clone, Debug)]
pub struct GcnVars {
    pub kernels: Vec<Var>,
    pub bias: Var,
    pub pseudo: Option<Vec<(Var, Var)>>,
}

/// Inverse of softplus, for initialising raw scale parameters.
pub fn softplus_inverse(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

impl GcnParams {
    /// Registers one layer named `prefix`. `visual` adds pseudo-coordinate
    /// parameters: kernel means spread evenly over angle at mid distance.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_dim: usize,
        kernels: usize,
        kernel_dim: usize,
        visual: bool,
    ) -> Self {
        let ks = (0..kernels)
            .map(|k| {
                store.insert(
                    format!("{prefix}.kernel{k}"),
                    uniform_init(rng, &[in_dim, kernel_dim], in_dim),
                    true,
                )
            })
            .collect();
        let bias = store.insert(
            format!("{prefix}.bias"),
            uniform_init(rng, &[kernel_dim], in_dim),
            true,
        );
        let pseudo = visual.then(|| {
            (0..kernels)
                .map(|k| {
                    let angle = wrap_angle(-PI + 2.0 * PI * (k as f64 + 0.5) / kernels as f64);
                    let mu = store.insert(
                        format!("{prefix}.mu{k}"),
                        Tensor::vector(vec![0.25, angle]),
                        true,
                    );
                    let sigma = store.insert(
                        format!("{prefix}.sigma{k}"),
                        Tensor::vector(vec![softplus_inverse(0.25), softplus_inverse(1.0)]),
                        true,
                    );
                    (mu, sigma)
                })
                .collect()
        });
        Self {
            kernels: ks,
            bias,
            pseudo,
        }
    }

    pub fn bind(&self, p: &BoundParams) -> GcnVars {
        GcnVars {
            kernels: self.kernels.iter().map(|&id| p.var(id)).collect(),
            bias: p.var(self.bias),
            pseudo: self
                .pseudo
                .as_ref()
                .map(|v| v.iter().map(|&(m, s)| (p.var(m), p.var(s))).collect()),
        }
    }
}

/// `w_k(ρ, θ) = exp(−[(ρ−μ_ρ)²/(2σ_ρ²) + wrap(θ−μ_θ)²/(2σ_θ²)])`.
pub fn visual_edge_weight(polar: (f64, f64), mu: (f64, f64), sigma: (f64, f64)) -> f64 {
    let dr = polar.0 - mu.0;
    let da = wrap_angle(polar.1 - mu.1);
    (-(dr * dr / (2.0 * sigma.0 * sigma.0) + da * da / (2.0 * sigma.1 * sigma.1))).exp()
}

/// Same as [`visual_edge_weight`] with σ given in raw (pre-softplus) form.
pub fn visual_edge_weight_raw(polar: (f64, f64), mu: (f64, f64), raw_sigma: (f64, f64)) -> f64 {
    visual_edge_weight(polar, mu, (softplus(raw_sigma.0), softplus(raw_sigma.1)))
}

/// Records the `[n×n]` weight matrix of one kernel on `tape`.
pub fn visual_kernel_weights(tape: &Tape, graph: &VisualGraph, mu: Var, raw_sigma: Var) -> Result<Var> {
    let n = graph.node_count();
    let rho = tape.constant(graph.rho.clone());
    let theta = tape.constant(graph.theta.clone());
    let mu_rho = tape.slice(mu, 0, vec![])?;
    let mu_theta = tape.slice(mu, 1, vec![])?;
    let sigma = tape.softplus(raw_sigma);
    // 1 / (2σ²) per coordinate
    let inv = tape.recip(tape.scale(tape.square(sigma), 2.0));
    let inv_rho = tape.slice(inv, 0, vec![])?;
    let inv_theta = tape.slice(inv, 1, vec![])?;

    let dr = tape.add_scalar(rho, tape.neg(mu_rho))?;
    let dr2 = tape.mul_scalar(tape.square(dr), inv_rho)?;
    let da = tape.wrap_angle(tape.add_scalar(theta, tape.neg(mu_theta))?);
    let da2 = tape.mul_scalar(tape.square(da), inv_theta)?;
    let w = tape.exp(tape.neg(tape.add(dr2, da2)?));
    debug_assert_eq!(tape.shape(w), vec![n, n]);
    Ok(w)
}

/// Per-kernel weights for a visual graph layer.
pub fn visual_layer_weights(tape: &Tape, graph: &VisualGraph, params: &GcnVars) -> Result<Vec<Var>> {
    let pseudo = params.pseudo.as_ref().ok_or_else(|| {
        GsmnError::Config("visual convolution needs pseudo-coordinate parameters".into())
    })?;
    pseudo
        .iter()
        .map(|&(mu, sigma)| visual_kernel_weights(tape, graph, mu, sigma))
        .collect()
}

pub fn activate(tape: &Tape, x: Var, act: Activation) -> Var {
    match act {
        Activation::Tanh => tape.tanh(x),
        Activation::Relu => tape.relu(x),
        Activation::Identity => x,
    }
}

/// One convolution layer. `inputs` is `[p×t_in]`; `weights[k]` is the
/// `[p×p]` matrix whose entry `(i, j)` weighs the message `j → i` for
/// kernel `k`. Returns `[p × (K·kernel_dim)]`.
pub fn gcn_layer(
    tape: &Tape,
    inputs: Var,
    weights: &[Var],
    params: &GcnVars,
    act: Activation,
) -> Result<Var> {
    if weights.len() != params.kernels.len() {
        return Err(GsmnError::Contract(format!(
            "{} weight matrices for {} kernels",
            weights.len(),
            params.kernels.len()
        )));
    }
    let p = tape.shape(inputs)[0];
    let mut outs = Vec::with_capacity(weights.len());
    for (&w, &kernel) in weights.iter().zip(&params.kernels) {
        let wt = tape.value(w);
        if wt.shape() != [p, p] {
            return Err(GsmnError::dim("gcn_layer", wt.shape(), &[p, p]));
        }
        if let Some(i) = (0..p).find(|&i| wt.row(i).iter().all(|&v| v == 0.0)) {
            return Err(GsmnError::Contract(format!(
                "node {i} has no incoming edge (missing self-loop)"
            )));
        }
        let agg = tape.matmul(w, inputs)?;
        let lin = tape.matmul(agg, kernel)?;
        let pre = tape.add_row(lin, params.bias)?;
        outs.push(activate(tape, pre, act));
    }
    tape.concat_cols(&outs)
}
