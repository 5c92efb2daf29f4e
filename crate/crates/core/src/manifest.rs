//! Run manifest: everything needed to repeat a training run.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{GsmnError, Result};
use crate::graphio::Corpus;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub lambda_attn: f64,
    pub text_lambda: f64,
    pub blocks: usize,
    pub kernels: usize,
    pub kernel_dim: usize,
    pub margin: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub seed: u64,
    pub corpus_hash: String,
    pub hyperparameters: Hyperparameters,
    pub config: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(config: &Config, corpus: &Corpus) -> Self {
        let m = &config.matching;
        Self {
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.train.seed,
            corpus_hash: corpus.content_hash(),
            hyperparameters: Hyperparameters {
                lambda_attn: m.lambda_attn,
                text_lambda: config.text_lambda,
                blocks: m.blocks,
                kernels: m.kernels,
                kernel_dim: m.kernel_dim,
                margin: config.train.margin,
                lr: config.train.lr,
            },
            config: Config::KEYS
                .iter()
                .map(|k| (k.to_string(), config.get(k).expect("known key")))
                .collect(),
        }
    }

    /// The configuration snapshot as a validated [`Config`].
    pub fn config(&self) -> Result<Config> {
        let mut c = Config::default();
        for (k, v) in &self.config {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        fs::write(path, text + "\n").map_err(|e| GsmnError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GsmnError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| GsmnError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })
    }
}
