//! Self-describing binary checkpoint.
//!
//! Layout, all integers and floats little-endian:
//! magic `GSMNCKPT`, u32 version, config text, vocabulary tokens,
//! u64 region dim, u64 epoch, f64 validation rSum, u64 parameter count,
//! then per parameter its name, u32 rank, u64 dims and f64 values. A
//! SHA-256 digest of everything before it closes the file.
//! Strings are a u64 byte length followed by UTF-8 bytes.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::config::Config;
use crate::error::{GsmnError, Result};
use crate::graphio::Vocabulary;
use crate::model::GsmnModel;

pub const MAGIC: &[u8; 8] = b"GSMNCKPT";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub vocab_tokens: Vec<String>,
    pub region_dim: usize,
    pub epoch: usize,
    pub val_rsum: f64,
    pub params: Vec<(String, Tensor)>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| GsmnError::Checkpoint("truncated file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| GsmnError::Checkpoint("size overflow".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| GsmnError::Checkpoint("invalid utf-8 string".into()))
    }
}

impl Checkpoint {
    pub fn from_model(model: &GsmnModel, epoch: usize, val_rsum: f64) -> Self {
        Self {
            config_text: model.config.to_text(),
            vocab_tokens: model.vocab.known_tokens().to_vec(),
            region_dim: model.region_dim,
            epoch,
            val_rsum,
            params: model
                .params
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.str(&self.config_text);
        w.u64(self.vocab_tokens.len() as u64);
        for t in &self.vocab_tokens {
            w.str(t);
        }
        w.u64(self.region_dim as u64);
        w.u64(self.epoch as u64);
        w.f64(self.val_rsum);
        w.u64(self.params.len() as u64);
        for (name, t) in &self.params {
            w.str(name);
            w.u32(t.shape().len() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            for &v in t.data() {
                w.f64(v);
            }
        }
        let digest = Sha256::digest(&w.0);
        w.0.extend_from_slice(&digest);
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
            return Err(GsmnError::Checkpoint("not a checkpoint file".into()));
        }
        let mut r = Reader {
            buf: bytes,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(GsmnError::Checkpoint(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(GsmnError::Checkpoint("checksum mismatch, file is corrupt".into()));
        }
        r.buf = body;
        let config_text = r.str()?;
        let n_tokens = r.usize()?;
        let vocab_tokens = (0..n_tokens).map(|_| r.str()).collect::<Result<_>>()?;
        let region_dim = r.usize()?;
        let epoch = r.usize()?;
        let val_rsum = r.f64()?;
        let n_params = r.usize()?;
        let mut params = Vec::new();
        for _ in 0..n_params {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            params.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(GsmnError::Checkpoint("trailing bytes after parameters".into()));
        }
        Ok(Self {
            config_text,
            vocab_tokens,
            region_dim,
            epoch,
            val_rsum,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| GsmnError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| GsmnError::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn config(&self) -> Result<Config> {
        Config::from_text(&self.config_text)
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_tokens(self.vocab_tokens.iter().cloned())
    }

    /// Overwrites every parameter of `model`. The checkpoint must hold
    /// exactly the model's parameter names with matching shapes.
    pub fn apply_to(&self, model: &mut GsmnModel) -> Result<()> {
        if self.region_dim != model.region_dim {
            return Err(GsmnError::Config(format!(
                "checkpoint region dim {} differs from model region dim {}",
                self.region_dim, model.region_dim
            )));
        }
        let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
        for name in &names {
            let Some((_, t)) = self.params.iter().find(|(n, _)| n == name) else {
                return Err(GsmnError::Checkpoint(format!("missing parameter {name}")));
            };
            model.params.set(name, t.clone())?;
        }
        if let Some((extra, _)) = self.params.iter().find(|(n, _)| !names.contains(n)) {
            return Err(GsmnError::Checkpoint(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    /// Rebuilds the model the checkpoint was taken from.
    pub fn into_model(&self) -> Result<GsmnModel> {
        let mut model = GsmnModel::new(self.config()?, self.vocabulary(), self.region_dim)?;
        self.apply_to(&mut model)?;
        Ok(model)
    }
}

pub fn save_checkpoint(path: &Path, model: &GsmnModel, epoch: usize, val_rsum: f64) -> Result<()> {
    Checkpoint::from_model(model, epoch, val_rsum).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(GsmnModel, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    Ok((ckpt.into_model()?, ckpt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;

    fn tiny_model(joint: usize) -> GsmnModel {
        let mut c = Config::default();
        c.embed_dim = 4;
        c.joint_dim = joint;
        c.matching.blocks = 2;
        c.matching.kernels = 1;
        c.matching.kernel_dim = 2;
        c.matching.mlp_hidden = 3;
        GsmnModel::new(c, Vocabulary::from_tokens(["a", "b"]), 3).unwrap()
    }

    #[test]
    fn encode_decode_is_identity() {
        let m = tiny_model(4);
        let c = Checkpoint::from_model(&m, 3, 123.5);
        let back = Checkpoint::decode(&c.encode()).unwrap();
        assert_eq!(back, c);
        let rebuilt = back.into_model().unwrap();
        assert_eq!(rebuilt.config, m.config);
        assert_eq!(rebuilt.vocab, m.vocab);
        for ((n1, t1), (n2, t2)) in rebuilt.params.iter().zip(m.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1, t2);
        }
    }

    #[test]
    fn corruption_and_version_are_detected() {
        let mut bytes = Checkpoint::from_model(&tiny_model(4), 0, 0.0).encode();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(Checkpoint::decode(&bytes), Err(GsmnError::Checkpoint(_))));

        let mut bytes = Checkpoint::from_model(&tiny_model(4), 0, 0.0).encode();
        bytes[8] = 9;
        let err = Checkpoint::decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");

        assert!(Checkpoint::decode(b"short").is_err());
    }

    #[test]
    fn mismatched_dimension_is_a_config_error() {
        let c = Checkpoint::from_model(&tiny_model(4), 0, 0.0);
        let mut other = tiny_model(6);
        assert!(matches!(c.apply_to(&mut other), Err(GsmnError::Config(_))));
    }

    #[test]
    fn missing_parameter_is_named() {
        let mut c = Checkpoint::from_model(&tiny_model(4), 0, 0.0);
        c.params.retain(|(n, _)| n != "encoder.proj_b");
        let err = c.into_model().unwrap_err().to_string();
        assert!(err.contains("encoder.proj_b"), "{err}");
    }
}
