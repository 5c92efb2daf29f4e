//! Seeded generator of structured toy scenes and their captions.
//!
//! Every image holds 2-4 objects laid out as a spatial chain. A region
//! feature is its class prototype plus a colour offset plus Gaussian noise.
//! Captions walk the chain ("red cube left blue sphere ...") and carry
//! dependency edges linking each object to its colour and to the relation
//! words on either side. Odd-indexed images are by default twins of their
//! predecessor, of one of two kinds. A binding twin keeps classes and
//! layout but reassigns the colours across objects. A layout twin keeps
//! every object and mirrors the chain, so its region features match the
//! original up to noise and only the box geometry separates them.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::records::{write_corpus, Corpus, ImageRecord, PairSample, Region, Split, TextRecord};
use crate::autodiff::cosine_raw;
use crate::error::{GsmnError, Result};

pub const CLASSES: [&str; 8] = [
    "cube", "sphere", "cone", "cylinder", "torus", "pyramid", "disk", "star",
];
pub const COLORS: [&str; 6] = ["red", "blue", "green", "yellow", "purple", "orange"];
pub const CAPTIONS_PER_IMAGE: usize = 5;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const COLOR_SCALE: f64 = 0.8;
const NOISE_STD: f64 = 0.05;
/// Self-check bound on pairwise prototype cosine.
pub const MAX_PROTOTYPE_COSINE: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Direction {
    Right,
    Left,
    Down,
    Up,
}

impl Direction {
    const ALL: [Direction; 4] = [Direction::Right, Direction::Left, Direction::Down, Direction::Up];

    fn offset(self) -> (f64, f64) {
        match self {
            Direction::Right => (1.0, 0.0),
            Direction::Left => (-1.0, 0.0),
            Direction::Down => (0.0, 1.0),
            Direction::Up => (0.0, -1.0),
        }
    }

    /// Word for "A <rel> B" when B lies in this direction from A.
    fn word(self) -> &'static str {
        match self {
            Direction::Right => "left",
            Direction::Left => "right",
            Direction::Down => "above",
            Direction::Up => "below",
        }
    }

    fn reversed(self) -> Self {
        match self {
            Direction::Right => Direction::Left,
            Direction::Left => Direction::Right,
            Direction::Down => Direction::Up,
            Direction::Up => Direction::Down,
        }
    }
}

#[derive(Clone, Debug)]
struct Scene {
    classes: Vec<usize>,
    colors: Vec<usize>,
    /// `links[i]` is the direction from object `i` to object `i + 1`.
    links: Vec<Direction>,
}

/// How often odd-indexed images copy their predecessor, and the share of
/// those copies that mirror the layout rather than swap colours.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthOptions {
    pub twin_prob: f64,
    pub layout_share: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            twin_prob: 1.0,
            layout_share: 0.5,
        }
    }
}

/// Diagnostics from the generator's self-check.
#[derive(Clone, Debug)]
pub struct SynthReport {
    pub max_prototype_cosine: f64,
    pub binding_twins: usize,
    pub layout_twins: usize,
}

fn unit_vectors(rng: &mut ChaCha8Rng, count: usize, dim: usize, basis: &mut Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        if basis.len() < dim {
            for b in basis.iter() {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut v {
            *x /= norm;
        }
        if basis.len() < dim {
            basis.push(v.clone());
        }
        out.push(v);
    }
    out
}

fn random_scene(rng: &mut ChaCha8Rng) -> Scene {
    let k = rng.gen_range(2..=4);
    let mut classes: Vec<usize> = (0..CLASSES.len()).collect();
    classes.shuffle(rng);
    classes.truncate(k);
    let mut colors: Vec<usize> = (0..COLORS.len()).collect();
    colors.shuffle(rng);
    colors.truncate(k);
    let links = (1..k).map(|_| *Direction::ALL.choose(rng).expect("nonempty")).collect();
    Scene {
        classes,
        colors,
        links,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TwinKind {
    Binding,
    Layout,
}

fn twin_of(scene: &Scene, kind: TwinKind) -> Scene {
    let mut twin = scene.clone();
    match kind {
        TwinKind::Binding => twin.colors.rotate_left(1),
        TwinKind::Layout => {
            for l in &mut twin.links {
                *l = l.reversed();
            }
        }
    }
    twin
}

/// Boxes for the scene's chain, or `None` when no placement was found in
/// `attempts` tries (some chains do not fit the canvas at all).
fn layout(rng: &mut ChaCha8Rng, scene: &Scene, attempts: usize) -> Option<Vec<[f64; 4]>> {
    let k = scene.classes.len();
    'attempt: for _ in 0..attempts {
        let mut centers = vec![(rng.gen_range(80.0..WIDTH - 80.0), rng.gen_range(80.0..HEIGHT - 80.0))];
        for dir in &scene.links {
            let (dx, dy) = dir.offset();
            let dist = rng.gen_range(120.0..160.0);
            let jitter = rng.gen_range(-15.0..15.0);
            let (px, py) = *centers.last().expect("nonempty");
            let c = (px + dx * dist - dy * jitter, py + dy * dist + dx * jitter);
            let inside = (55.0..=WIDTH - 55.0).contains(&c.0) && (55.0..=HEIGHT - 55.0).contains(&c.1);
            let clear = centers.iter().all(|q| (q.0 - c.0).hypot(q.1 - c.1) > 90.0);
            if !inside || !clear {
                continue 'attempt;
            }
            centers.push(c);
        }
        debug_assert_eq!(centers.len(), k);
        return Some(
            centers
                .into_iter()
                .map(|(cx, cy)| {
                    let hw = rng.gen_range(30.0..50.0);
                    let hh = rng.gen_range(30.0..50.0);
                    [cx - hw, cy - hh, cx + hw, cy + hh]
                })
                .collect(),
        );
    }
    None
}

const LAYOUT_ATTEMPTS: usize = 200;

fn caption(scene: &Scene, variant: usize) -> (Vec<String>, Vec<(usize, usize)>, Vec<String>) {
    let k = scene.classes.len();
    let reverse = variant % 2 == 1;
    let article = variant == 2 || variant == 3;
    let listing = variant == 4;
    let order: Vec<usize> = if reverse { (0..k).rev().collect() } else { (0..k).collect() };

    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let mut edges = Vec::new();
    let mut prev_object: Option<usize> = None;
    for (pos, &obj) in order.iter().enumerate() {
        let mut connector = None;
        if pos > 0 {
            let word = if listing {
                "and"
            } else {
                // link between order[pos-1] and obj
                let (a, b) = (order[pos - 1], obj);
                if a < b {
                    scene.links[a].word()
                } else {
                    scene.links[b].reversed().word()
                }
            };
            connector = Some(tokens.len());
            tokens.push(word.to_string());
            tags.push(if listing { "other" } else { "relation" }.to_string());
            if !listing {
                edges.push((prev_object.expect("set"), tokens.len() - 1));
            }
        }
        let art = article.then(|| {
            tokens.push("a".to_string());
            tags.push("attribute".to_string());
            tokens.len() - 1
        });
        let color = tokens.len();
        tokens.push(COLORS[scene.colors[obj]].to_string());
        tags.push("attribute".to_string());
        let object = tokens.len();
        tokens.push(CLASSES[scene.classes[obj]].to_string());
        tags.push("object".to_string());
        edges.push((color, object));
        if let Some(a) = art {
            edges.push((a, object));
        }
        if let Some(c) = connector {
            edges.push((c, object));
        }
        prev_object = Some(object);
    }
    (tokens, edges, tags)
}

/// Builds a deterministic corpus of `n_images` scenes with five captions
/// each. The last fifth of the images (at least one) form the test split,
/// the tenth before them the validation split.
pub fn generate_synthetic(seed: u64, n_images: usize, feature_dim: usize) -> Result<(Corpus, SynthReport)> {
    generate_synthetic_with(seed, n_images, feature_dim, SynthOptions::default())
}

pub fn generate_synthetic_with(
    seed: u64,
    n_images: usize,
    feature_dim: usize,
    opts: SynthOptions,
) -> Result<(Corpus, SynthReport)> {
    if n_images < 2 {
        return Err(GsmnError::Config(format!("need at least 2 images, got {n_images}")));
    }
    if feature_dim < 8 {
        return Err(GsmnError::Config(format!("feature_dim must be >= 8, got {feature_dim}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis = Vec::new();
    let prototypes = unit_vectors(&mut rng, CLASSES.len(), feature_dim, &mut basis);
    let color_offsets = unit_vectors(&mut rng, COLORS.len(), feature_dim, &mut basis);

    let mut max_cos: f64 = f64::NEG_INFINITY;
    for i in 0..prototypes.len() {
        for j in i + 1..prototypes.len() {
            max_cos = max_cos.max(cosine_raw(&prototypes[i], &prototypes[j]).0);
        }
    }
    if max_cos >= MAX_PROTOTYPE_COSINE {
        return Err(GsmnError::Numeric(format!(
            "prototype self-check failed: max pairwise cosine {max_cos:.4}"
        )));
    }

    let n_test = (n_images / 5).max(1);
    let n_val = n_images / 10;
    let n_train = n_images - n_test - n_val;
    let noise = Normal::new(0.0, NOISE_STD).expect("valid normal");

    let mut texts = Vec::new();
    let mut images = Vec::new();
    let mut pairs = Vec::new();
    let mut binding_twins = 0;
    let mut layout_twins = 0;
    let mut previous: Option<Scene> = None;
    for idx in 0..n_images {
        let (scene, boxes) = match previous.take() {
            Some(prev) if idx % 2 == 1 && rng.gen_bool(opts.twin_prob) => {
                let kind = if !rng.gen_bool(opts.layout_share) {
                    binding_twins += 1;
                    TwinKind::Binding
                } else {
                    layout_twins += 1;
                    TwinKind::Layout
                };
                let twin = twin_of(&prev, kind);
                // The original chain fitted, and so does its mirror image.
                let boxes = loop {
                    if let Some(b) = layout(&mut rng, &twin, LAYOUT_ATTEMPTS) {
                        break b;
                    }
                };
                (twin, boxes)
            }
            _ => loop {
                let scene = random_scene(&mut rng);
                if let Some(b) = layout(&mut rng, &scene, LAYOUT_ATTEMPTS) {
                    break (scene, b);
                }
            },
        };
        let regions = scene
            .classes
            .iter()
            .zip(&scene.colors)
            .zip(boxes)
            .map(|((&c, &col), bbox)| Region {
                bbox,
                feature: prototypes[c]
                    .iter()
                    .zip(&color_offsets[col])
                    .map(|(p, o)| p + COLOR_SCALE * o + noise.sample(&mut rng))
                    .collect(),
            })
            .collect();
        let image_id = format!("img{idx:05}");
        images.push(ImageRecord {
            id: image_id.clone(),
            width: WIDTH,
            height: HEIGHT,
            regions,
        });
        let split = if idx < n_train {
            Split::Train
        } else if idx < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        for v in 0..CAPTIONS_PER_IMAGE {
            let (tokens, dep_edges, tags) = caption(&scene, v);
            let text_id = format!("{image_id}_c{v}");
            texts.push(TextRecord {
                id: text_id.clone(),
                tokens,
                dep_edges,
                pos_tags: Some(tags),
            });
            pairs.push(PairSample {
                image_id: image_id.clone(),
                text_id,
                split,
            });
        }
        previous = Some(scene);
    }
    let corpus = Corpus::new(texts, images, pairs)?;
    Ok((
        corpus,
        SynthReport {
            max_prototype_cosine: max_cos,
            binding_twins,
            layout_twins,
        },
    ))
}

/// Generates and writes the corpus files into `dir`.
pub fn synthesize_to_dir(
    dir: &Path,
    seed: u64,
    n_images: usize,
    feature_dim: usize,
    opts: SynthOptions,
) -> Result<SynthReport> {
    let (corpus, report) = generate_synthetic_with(seed, n_images, feature_dim, opts)?;
    write_corpus(dir, &corpus)?;
    Ok(report)
}
