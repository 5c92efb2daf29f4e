//! Node feature encoders: affine projection of region features and a
//! (bi)directional GRU over word embeddings.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{GsmnError, Result};
use crate::graphio::{ImageRecord, Vocabulary};
use crate::params::{uniform_init, BoundParams, ParamId, ParamStore};

/// Parameter ids of one GRU cell.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_h: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_h: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
}

impl GruCell {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d_in: usize,
        d_h: usize,
    ) -> Self {
        let mut mk = |name: &str, shape: &[usize], fan_in: usize| {
            store.insert(
                format!("{prefix}.{name}"),
                uniform_init(rng, shape, fan_in),
                true,
            )
        };
        Self {
            w_z: mk("w_z", &[d_in, d_h], d_in),
            w_r: mk("w_r", &[d_in, d_h], d_in),
            w_h: mk("w_h", &[d_in, d_h], d_in),
            u_z: mk("u_z", &[d_h, d_h], d_h),
            u_r: mk("u_r", &[d_h, d_h], d_h),
            u_h: mk("u_h", &[d_h, d_h], d_h),
            b_z: mk("b_z", &[d_h], d_h),
            b_r: mk("b_r", &[d_h], d_h),
            b_h: mk("b_h", &[d_h], d_h),
        }
    }

    pub fn bind(&self, p: &BoundParams) -> GruVars {
        GruVars {
            w_z: p.var(self.w_z),
            w_r: p.var(self.w_r),
            w_h: p.var(self.w_h),
            u_z: p.var(self.u_z),
            u_r: p.var(self.u_r),
            u_h: p.var(self.u_h),
            b_z: p.var(self.b_z),
            b_r: p.var(self.b_r),
            b_h: p.var(self.b_h),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u_h: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_h: Var,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub embedding: ParamId,
    pub forward: GruCell,
    pub backward: Option<GruCell>,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

impl EncoderParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        vocab_size: usize,
        embed_dim: usize,
        region_dim: usize,
        joint_dim: usize,
        bidirectional: bool,
        freeze_embeddings: bool,
    ) -> Self {
        let embedding = store.insert(
            "encoder.embedding",
            uniform_init(rng, &[vocab_size, embed_dim], embed_dim),
            !freeze_embeddings,
        );
        let forward = GruCell::init(store, rng, "encoder.gru_fwd", embed_dim, joint_dim);
        let backward =
            bidirectional.then(|| GruCell::init(store, rng, "encoder.gru_bwd", embed_dim, joint_dim));
        let proj_w = store.insert(
            "encoder.proj_w",
            uniform_init(rng, &[region_dim, joint_dim], region_dim),
            true,
        );
        let proj_b = store.insert(
            "encoder.proj_b",
            uniform_init(rng, &[joint_dim], region_dim),
            true,
        );
        Self {
            embedding,
            forward,
            backward,
            proj_w,
            proj_b,
        }
    }

    pub fn bind(&self, p: &BoundParams) -> EncoderVars {
        EncoderVars {
            embedding: p.var(self.embedding),
            forward: self.forward.bind(p),
            backward: self.backward.as_ref().map(|c| c.bind(p)),
            proj_w: p.var(self.proj_w),
            proj_b: p.var(self.proj_b),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub embedding: Var,
    pub forward: GruVars,
    pub backward: Option<GruVars>,
    pub proj_w: Var,
    pub proj_b: Var,
}

/// Region features as an `[n × D_r]` matrix.
pub fn region_matrix(record: &ImageRecord) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = record.regions.iter().map(|r| r.feature.clone()).collect();
    Tensor::from_rows(&rows)
}

/// `v_i = W_mᵀ f_i + b_m` for every region.
pub fn encode_image(tape: &Tape, record: &ImageRecord, enc: &EncoderVars) -> Result<Var> {
    let w_shape = tape.shape(enc.proj_w);
    let dim = record.feature_dim();
    if w_shape[0] != dim {
        return Err(GsmnError::Config(format!(
            "image {}: region feature dim {dim} but projection expects {}",
            record.id, w_shape[0]
        )));
    }
    let feats = tape.constant(region_matrix(record)?);
    let proj = tape.matmul(feats, enc.proj_w)?;
    tape.add_row(proj, enc.proj_b)
}

/// One GRU update given the input already multiplied by the three input
/// matrices. `h` is `[1 × d_h]`.
fn gru_update(
    tape: &Tape,
    cell: &GruVars,
    xz: Var,
    xr: Var,
    xh: Var,
    h: Var,
) -> Result<Var> {
    let z = {
        let a = tape.add(xz, tape.matmul(h, cell.u_z)?)?;
        tape.sigmoid(tape.add_row(a, cell.b_z)?)
    };
    let r = {
        let a = tape.add(xr, tape.matmul(h, cell.u_r)?)?;
        tape.sigmoid(tape.add_row(a, cell.b_r)?)
    };
    let candidate = {
        let rh = tape.mul(r, h)?;
        let a = tape.add(xh, tape.matmul(rh, cell.u_h)?)?;
        tape.tanh(tape.add_row(a, cell.b_h)?)
    };
    // h' = h + z ∘ (h̃ − h)
    let delta = tape.sub(candidate, h)?;
    tape.add(h, tape.mul(z, delta)?)
}

/// `h' = (1−z)∘h + z∘h̃` for input `x` `[1 × d_in]` and state `h` `[1 × d_h]`.
pub fn gru_step(tape: &Tape, cell: &GruVars, x: Var, h: Var) -> Result<Var> {
    let xz = tape.matmul(x, cell.w_z)?;
    let xr = tape.matmul(x, cell.w_r)?;
    let xh = tape.matmul(x, cell.w_h)?;
    gru_update(tape, cell, xz, xr, xh, h)
}

/// Runs `cell` over the rows of `inputs` (`[m × d_in]`) in the given order
/// from a zero state. Returns the hidden state for each row, in row order.
fn run_gru(tape: &Tape, cell: &GruVars, inputs: Var, reverse: bool) -> Result<Vec<Var>> {
    let m = tape.shape(inputs)[0];
    let d_h = tape.shape(cell.u_z)[0];
    let xz = tape.matmul(inputs, cell.w_z)?;
    let xr = tape.matmul(inputs, cell.w_r)?;
    let xh = tape.matmul(inputs, cell.w_h)?;
    let mut h = tape.constant(Tensor::zeros(&[1, d_h]));
    let mut states = vec![h; m];
    let order: Vec<usize> = if reverse { (0..m).rev().collect() } else { (0..m).collect() };
    for i in order {
        h = gru_update(
            tape,
            cell,
            tape.row(xz, i)?,
            tape.row(xr, i)?,
            tape.row(xh, i)?,
            h,
        )?;
        states[i] = h;
    }
    Ok(states)
}

/// Word features `[m × d]`: the mean of forward and backward GRU states,
/// or the forward states alone for a unidirectional encoder.
pub fn encode_tokens(tape: &Tape, token_ids: &[usize], enc: &EncoderVars) -> Result<Var> {
    if token_ids.is_empty() {
        return Err(GsmnError::Contract("cannot encode an empty token list".into()));
    }
    let emb = tape.gather_rows(enc.embedding, token_ids)?;
    let fwd = run_gru(tape, &enc.forward, emb, false)?;
    let rows = match &enc.backward {
        Some(cell) => {
            let bwd = run_gru(tape, cell, emb, true)?;
            fwd.into_iter()
                .zip(bwd)
                .map(|(f, b)| Ok(tape.scale(tape.add(f, b)?, 0.5)))
                .collect::<Result<Vec<_>>>()?
        }
        None => fwd,
    };
    tape.concat(&rows)
}

pub fn encode_text(
    tape: &Tape,
    tokens: &[String],
    vocab: &Vocabulary,
    enc: &EncoderVars,
) -> Result<Var> {
    encode_tokens(tape, &vocab.encode(tokens), enc)
}
