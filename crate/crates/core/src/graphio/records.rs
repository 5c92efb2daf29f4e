use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use crate::error::{GsmnError, Result};

pub const TEXTS_FILE: &str = "texts.jsonl";
pub const IMAGES_FILE: &str = "images.jsonl";
pub const PAIRS_FILE: &str = "pairs.jsonl";

/// A caption with its ingested dependency edges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextRecord {
    pub id: String,
    pub tokens: Vec<String>,
    pub dep_edges: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos_tags: Option<Vec<String>>,
}

impl TextRecord {
    /// Checks index bounds and self-loops, and removes duplicate edges
    /// (either orientation) keeping the first occurrence.
    pub fn validate(&mut self) -> Result<()> {
        let m = self.tokens.len();
        if m == 0 {
            return Err(GsmnError::Contract(format!("text {} has no tokens", self.id)));
        }
        let mut seen = HashSet::new();
        let mut kept = Vec::with_capacity(self.dep_edges.len());
        for &(i, j) in &self.dep_edges {
            if i >= m || j >= m {
                return Err(GsmnError::Graph(format!(
                    "text {}: edge ({i},{j}) out of range for {m} tokens",
                    self.id
                )));
            }
            if i == j {
                return Err(GsmnError::Graph(format!(
                    "text {}: self-loop ({i},{i}) in dependency edges",
                    self.id
                )));
            }
            if seen.insert((i.min(j), i.max(j))) {
                kept.push((i, j));
            }
        }
        self.dep_edges = kept;
        if let Some(tags) = &self.pos_tags {
            if tags.len() != m {
                return Err(GsmnError::Contract(format!(
                    "text {}: {} tags for {m} tokens",
                    self.id,
                    tags.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub bbox: [f64; 4],
    pub feature: Vec<f64>,
}

impl Region {
    pub fn center(&self) -> (f64, f64) {
        let [x0, y0, x1, y1] = self.bbox;
        ((x0 + x1) / 2.0, (y0 + y1) / 2.0)
    }
}

/// Detected regions of one image with their pre-extracted features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub width: f64,
    pub height: f64,
    pub regions: Vec<Region>,
}

impl ImageRecord {
    pub fn feature_dim(&self) -> usize {
        self.regions.first().map(|r| r.feature.len()).unwrap_or(0)
    }

    pub fn diagonal(&self) -> f64 {
        self.width.hypot(self.height)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(GsmnError::Contract(format!(
                "image {}: non-positive size {}x{}",
                self.id, self.width, self.height
            )));
        }
        if self.regions.is_empty() {
            return Err(GsmnError::Contract(format!("image {} has no regions", self.id)));
        }
        let dim = self.feature_dim();
        for (k, r) in self.regions.iter().enumerate() {
            if r.feature.len() != dim {
                return Err(GsmnError::Contract(format!(
                    "image {} region {k}: feature dim {} != {dim}",
                    self.id,
                    r.feature.len()
                )));
            }
            let [x0, y0, x1, y1] = r.bbox;
            let inside = 0.0 <= x0 && x0 <= x1 && x1 <= self.width && 0.0 <= y0 && y0 <= y1 && y1 <= self.height;
            if !inside {
                return Err(GsmnError::Contract(format!(
                    "image {} region {k}: box {:?} outside {}x{}",
                    self.id, r.bbox, self.width, self.height
                )));
            }
            if !r.feature.iter().chain(&r.bbox).all(|v| v.is_finite()) {
                return Err(GsmnError::Numeric(format!(
                    "image {} region {k}: non-finite value",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = GsmnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(GsmnError::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub image_id: String,
    pub text_id: String,
    pub split: Split,
}

/// A validated corpus with id lookup tables.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub texts: Vec<TextRecord>,
    pub images: Vec<ImageRecord>,
    pub pairs: Vec<PairSample>,
    text_index: HashMap<String, usize>,
    image_index: HashMap<String, usize>,
}

impl Corpus {
    /// Validates records and cross references.
    pub fn new(
        mut texts: Vec<TextRecord>,
        images: Vec<ImageRecord>,
        pairs: Vec<PairSample>,
    ) -> Result<Self> {
        let mut text_index = HashMap::with_capacity(texts.len());
        for (k, t) in texts.iter_mut().enumerate() {
            t.validate()?;
            if text_index.insert(t.id.clone(), k).is_some() {
                return Err(GsmnError::Integrity(format!("duplicate text id {}", t.id)));
            }
        }
        let mut image_index = HashMap::with_capacity(images.len());
        let dim = images.first().map(|i| i.feature_dim()).unwrap_or(0);
        for (k, img) in images.iter().enumerate() {
            img.validate()?;
            if img.feature_dim() != dim {
                return Err(GsmnError::Contract(format!(
                    "image {}: feature dim {} differs from corpus dim {dim}",
                    img.id,
                    img.feature_dim()
                )));
            }
            if image_index.insert(img.id.clone(), k).is_some() {
                return Err(GsmnError::Integrity(format!("duplicate image id {}", img.id)));
            }
        }
        for p in &pairs {
            if !image_index.contains_key(&p.image_id) {
                return Err(GsmnError::Integrity(format!(
                    "pair references missing image {}",
                    p.image_id
                )));
            }
            if !text_index.contains_key(&p.text_id) {
                return Err(GsmnError::Integrity(format!(
                    "pair references missing text {}",
                    p.text_id
                )));
            }
        }
        Ok(Self {
            texts,
            images,
            pairs,
            text_index,
            image_index,
        })
    }

    pub fn text(&self, id: &str) -> Option<&TextRecord> {
        self.text_index.get(id).map(|&k| &self.texts[k])
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.image_index.get(id).map(|&k| &self.images[k])
    }

    pub fn feature_dim(&self) -> usize {
        self.images.first().map(|i| i.feature_dim()).unwrap_or(0)
    }

    pub fn split_pairs(&self, split: Split) -> impl Iterator<Item = &PairSample> {
        self.pairs.iter().filter(move |p| p.split == split)
    }

    /// Retrieval view of one split: distinct images in first-appearance
    /// order, texts in pair order, and for each text the index of its image.
    pub fn retrieval_split(&self, split: Split) -> RetrievalSplit<'_> {
        let mut images: Vec<&ImageRecord> = Vec::new();
        let mut position: HashMap<&str, usize> = HashMap::new();
        let mut texts = Vec::new();
        let mut text_image = Vec::new();
        for p in self.split_pairs(split) {
            let img = self.image(&p.image_id).expect("validated");
            let k = *position.entry(img.id.as_str()).or_insert_with(|| {
                images.push(img);
                images.len() - 1
            });
            texts.push(self.text(&p.text_id).expect("validated"));
            text_image.push(k);
        }
        RetrievalSplit {
            images,
            texts,
            text_image,
        }
    }

    /// SHA-256 over the canonical serialisation of all three files.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for buf in [
            to_jsonl(&self.texts),
            to_jsonl(&self.images),
            to_jsonl(&self.pairs),
        ] {
            h.update(buf);
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug)]
pub struct RetrievalSplit<'a> {
    pub images: Vec<&'a ImageRecord>,
    pub texts: Vec<&'a TextRecord>,
    pub text_image: Vec<usize>,
}

impl RetrievalSplit<'_> {
    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    /// Restricts to a contiguous range of images and their texts.
    pub fn fold(&self, fold: usize, folds: usize) -> Self {
        let n = self.images.len();
        let start = n * fold / folds;
        let end = n * (fold + 1) / folds;
        let mut texts = Vec::new();
        let mut text_image = Vec::new();
        for (t, &k) in self.texts.iter().zip(&self.text_image) {
            if (start..end).contains(&k) {
                texts.push(*t);
                text_image.push(k - start);
            }
        }
        Self {
            images: self.images[start..end].to_vec(),
            texts,
            text_image,
        }
    }
}

fn to_jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("records serialise");
        out.push(b'\n');
    }
    out
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| GsmnError::io(path, e))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| GsmnError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| GsmnError::Parse {
            path: path.to_path_buf(),
            line: k + 1,
            msg: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| GsmnError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&to_jsonl(items))
        .and_then(|_| w.flush())
        .map_err(|e| GsmnError::io(path, e))
}

/// Loads and validates `texts.jsonl`, `images.jsonl` and `pairs.jsonl`
/// from `dir`, building the vocabulary from train-split texts.
pub fn load_corpus(dir: &Path) -> Result<(Corpus, Vocabulary)> {
    let texts = read_jsonl(&dir.join(TEXTS_FILE))?;
    let images = read_jsonl(&dir.join(IMAGES_FILE))?;
    let pairs = read_jsonl(&dir.join(PAIRS_FILE))?;
    let corpus = Corpus::new(texts, images, pairs)?;
    let vocab = Vocabulary::from_corpus(&corpus);
    Ok((corpus, vocab))
}

pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| GsmnError::io(dir, e))?;
    write_jsonl(&dir.join(TEXTS_FILE), &corpus.texts)?;
    write_jsonl(&dir.join(IMAGES_FILE), &corpus.images)?;
    write_jsonl(&dir.join(PAIRS_FILE), &corpus.pairs)
}
