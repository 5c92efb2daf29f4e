//! Flat `key=value` configuration covering model, matching and training
//! hyperparameters.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{GsmnError, Result};
use crate::graphbuild::GraphVariant;

/// Which directional scores contribute to the global similarity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Direction {
    #[default]
    Both,
    /// Only the score computed on the textual graph.
    T2iOnly,
    /// Only the score computed on the visual graph.
    I2tOnly,
}

impl Direction {
    pub fn t2i(self) -> bool {
        self != Direction::I2tOnly
    }

    pub fn i2t(self) -> bool {
        self != Direction::T2iOnly
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Both => "both",
            Direction::T2iOnly => "t2i_only",
            Direction::I2tOnly => "i2t_only",
        })
    }
}

impl FromStr for Direction {
    type Err = GsmnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Direction::Both),
            "t2i_only" => Ok(Direction::T2iOnly),
            "i2t_only" => Ok(Direction::I2tOnly),
            other => Err(GsmnError::Config(format!("unknown direction {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = GsmnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(GsmnError::Config(format!("unknown activation {other:?}"))),
        }
    }
}

/// Ablation presets, one per reduced network variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    WithoutGraph,
    WithoutI2t,
    WithoutT2i,
    TwoGcn,
    Gru,
}

impl FromStr for Preset {
    type Err = GsmnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "w/o-graph" => Ok(Preset::WithoutGraph),
            "w/o-i2t" => Ok(Preset::WithoutI2t),
            "w/o-t2i" => Ok(Preset::WithoutT2i),
            "2gcn" => Ok(Preset::TwoGcn),
            "gru" => Ok(Preset::Gru),
            other => Err(GsmnError::Config(format!("unknown preset {other:?}"))),
        }
    }
}

/// Node-level and structure-level matching settings.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchConfig {
    pub lambda_attn: f64,
    pub blocks: usize,
    pub kernels: usize,
    pub kernel_dim: usize,
    pub mlp_hidden: usize,
    pub gcn_depth: usize,
    pub direction: Direction,
    pub use_structure: bool,
    pub gcn_activation: Activation,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            lambda_attn: 20.0,
            blocks: 32,
            kernels: 8,
            kernel_dim: 32,
            mlp_hidden: 256,
            gcn_depth: 1,
            direction: Direction::Both,
            use_structure: true,
            gcn_activation: Activation::Tanh,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub margin: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub seed: u64,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            batch_size: 64,
            lr: 0.0002,
            lr_decay_factor: 0.9,
            lr_decay_every: 15,
            epochs: 30,
            seed: 0,
            grad_clip: 2.0,
        }
    }
}

impl TrainConfig {
    /// Step-decayed learning rate for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = if self.lr_decay_every == 0 {
            0
        } else {
            epoch / self.lr_decay_every
        };
        self.lr * self.lr_decay_factor.powi(steps as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub embed_dim: usize,
    pub joint_dim: usize,
    pub variant: GraphVariant,
    pub text_lambda: f64,
    pub bidirectional: bool,
    pub freeze_embeddings: bool,
    pub normalize_nodes: bool,
    pub matching: MatchConfig,
    pub train: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            embed_dim: 300,
            joint_dim: 1024,
            variant: GraphVariant::Sparse,
            text_lambda: 20.0,
            bidirectional: true,
            freeze_embeddings: false,
            normalize_nodes: true,
            matching: MatchConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| GsmnError::Config(format!("bad value {value:?} for {key}")))
}

impl Config {
    pub const KEYS: [&'static str; 24] = [
        "embed_dim",
        "joint_dim",
        "variant",
        "text_lambda",
        "bidirectional",
        "freeze_embeddings",
        "normalize_nodes",
        "lambda_attn",
        "blocks",
        "kernels",
        "kernel_dim",
        "mlp_hidden",
        "gcn_depth",
        "direction",
        "use_structure",
        "gcn_activation",
        "margin",
        "batch_size",
        "lr",
        "lr_decay_factor",
        "lr_decay_every",
        "epochs",
        "seed",
        "grad_clip",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.matching;
        let t = &mut self.train;
        match key.trim() {
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "joint_dim" => self.joint_dim = parse(key, v)?,
            "variant" => self.variant = v.parse()?,
            "text_lambda" => self.text_lambda = parse(key, v)?,
            "bidirectional" => self.bidirectional = parse(key, v)?,
            "freeze_embeddings" => self.freeze_embeddings = parse(key, v)?,
            "normalize_nodes" => self.normalize_nodes = parse(key, v)?,
            "lambda_attn" => m.lambda_attn = parse(key, v)?,
            "blocks" => m.blocks = parse(key, v)?,
            "kernels" => m.kernels = parse(key, v)?,
            "kernel_dim" => m.kernel_dim = parse(key, v)?,
            "mlp_hidden" => m.mlp_hidden = parse(key, v)?,
            "gcn_depth" => m.gcn_depth = parse(key, v)?,
            "direction" => m.direction = v.parse()?,
            "use_structure" => m.use_structure = parse(key, v)?,
            "gcn_activation" => m.gcn_activation = v.parse()?,
            "margin" => t.margin = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "lr_decay_factor" => t.lr_decay_factor = parse(key, v)?,
            "lr_decay_every" => t.lr_decay_every = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "grad_clip" => t.grad_clip = parse(key, v)?,
            other => return Err(GsmnError::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.matching;
        let t = &self.train;
        Some(match key {
            "embed_dim" => self.embed_dim.to_string(),
            "joint_dim" => self.joint_dim.to_string(),
            "variant" => self.variant.to_string(),
            "text_lambda" => self.text_lambda.to_string(),
            "bidirectional" => self.bidirectional.to_string(),
            "freeze_embeddings" => self.freeze_embeddings.to_string(),
            "normalize_nodes" => self.normalize_nodes.to_string(),
            "lambda_attn" => m.lambda_attn.to_string(),
            "blocks" => m.blocks.to_string(),
            "kernels" => m.kernels.to_string(),
            "kernel_dim" => m.kernel_dim.to_string(),
            "mlp_hidden" => m.mlp_hidden.to_string(),
            "gcn_depth" => m.gcn_depth.to_string(),
            "direction" => m.direction.to_string(),
            "use_structure" => m.use_structure.to_string(),
            "gcn_activation" => m.gcn_activation.to_string(),
            "margin" => t.margin.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "lr" => t.lr.to_string(),
            "lr_decay_factor" => t.lr_decay_factor.to_string(),
            "lr_decay_every" => t.lr_decay_every.to_string(),
            "epochs" => t.epochs.to_string(),
            "seed" => t.seed.to_string(),
            "grad_clip" => t.grad_clip.to_string(),
            _ => return None,
        })
    }

    /// Applies `key=value` lines. Blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                GsmnError::Config(format!("line {}: expected key=value, got {line:?}", k + 1))
            })?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GsmnError::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            out.push_str(key);
            out.push('=');
            out.push_str(&self.get(key).expect("known key"));
            out.push('\n');
        }
        out
    }

    pub fn apply_preset(&mut self, preset: Preset) {
        match preset {
            Preset::WithoutGraph => self.matching.use_structure = false,
            Preset::WithoutI2t => self.matching.direction = Direction::T2iOnly,
            Preset::WithoutT2i => self.matching.direction = Direction::I2tOnly,
            Preset::TwoGcn => self.matching.gcn_depth = 2,
            Preset::Gru => self.bidirectional = false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.matching;
        let t = &self.train;
        let fail = |msg: String| Err(GsmnError::Config(msg));
        if self.joint_dim == 0 || self.embed_dim == 0 {
            return fail("dimensions must be positive".into());
        }
        if m.blocks == 0 || self.joint_dim % m.blocks != 0 {
            return fail(format!(
                "blocks={} must divide joint_dim={}",
                m.blocks, self.joint_dim
            ));
        }
        if m.kernels == 0 || m.kernel_dim == 0 || m.mlp_hidden == 0 {
            return fail("kernels, kernel_dim and mlp_hidden must be >= 1".into());
        }
        if m.gcn_depth == 0 {
            return fail("gcn_depth must be >= 1".into());
        }
        if !(m.lambda_attn > 0.0) || !(self.text_lambda > 0.0) {
            return fail("lambda values must be positive".into());
        }
        if !(t.margin > 0.0) {
            return fail(format!("margin must be positive, got {}", t.margin));
        }
        if t.batch_size < 2 {
            return fail(format!("batch_size must be >= 2, got {}", t.batch_size));
        }
        if !(t.lr >= 0.0) || !(t.lr_decay_factor > 0.0) {
            return fail("lr must be >= 0 and lr_decay_factor > 0".into());
        }
        Ok(())
    }
}
