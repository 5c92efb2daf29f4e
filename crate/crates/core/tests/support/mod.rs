//! Test-only reference implementations, written without the tape, and
//! generators of small random instances.
#![allow(dead_code)]

pub mod checks;

use std::f64::consts::PI;

use gsmn::config::{Activation, Config};
use gsmn::graphio::{ImageRecord, Region, TextRecord, Vocabulary};
use gsmn::model::GsmnModel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub const WORDS: [&str; 6] = ["red", "cube", "left", "blue", "sphere", "a"];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sizes m=2 tokens, n=2 regions, d=4, t=2, K=1 unless overridden.
pub fn tiny_config() -> Config {
    let mut c = Config::default();
    c.embed_dim = 3;
    c.joint_dim = 4;
    c.text_lambda = 2.0;
    c.matching.lambda_attn = 3.0;
    c.matching.blocks = 2;
    c.matching.kernels = 1;
    c.matching.kernel_dim = 2;
    c.matching.mlp_hidden = 3;
    c
}

pub fn small_config() -> Config {
    let mut c = tiny_config();
    c.joint_dim = 6;
    c.matching.blocks = 3;
    c.matching.kernels = 3;
    c.matching.kernel_dim = 2;
    c
}

pub const REGION_DIM: usize = 5;

pub fn vocab() -> Vocabulary {
    Vocabulary::from_tokens(WORDS)
}

/// A model whose parameters are redrawn uniformly in [-1, 1] so that no
/// initialisation structure hides mistakes.
pub fn random_model(config: Config, seed: u64) -> GsmnModel {
    let mut model = GsmnModel::new(config, vocab(), REGION_DIM).unwrap();
    let mut r = rng(seed ^ 0x9e37);
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        for v in model.params.value_mut(id).data_mut() {
            *v = r.gen_range(-1.0..1.0);
        }
    }
    model
}

pub fn random_text(r: &mut ChaCha8Rng, m: usize) -> TextRecord {
    let tokens: Vec<String> = (0..m)
        .map(|_| WORDS[r.gen_range(0..WORDS.len())].to_string())
        .collect();
    let mut dep_edges = Vec::new();
    for j in 1..m {
        dep_edges.push((r.gen_range(0..j), j));
    }
    TextRecord {
        id: format!("t{}", r.gen::<u32>()),
        tokens,
        dep_edges,
        pos_tags: None,
    }
}

pub fn random_image(r: &mut ChaCha8Rng, n: usize) -> ImageRecord {
    let (w, h) = (200.0, 150.0);
    let regions = (0..n)
        .map(|_| {
            let x0 = r.gen_range(0.0..w - 20.0);
            let y0 = r.gen_range(0.0..h - 20.0);
            let x1 = r.gen_range(x0 + 5.0..w);
            let y1 = r.gen_range(y0 + 5.0..h);
            Region {
                bbox: [x0, y0, x1, y1],
                feature: (0..REGION_DIM).map(|_| r.gen_range(-1.0..1.0)).collect(),
            }
        })
        .collect();
    ImageRecord {
        id: format!("i{}", r.gen::<u32>()),
        width: w,
        height: h,
        regions,
    }
}

fn param(model: &GsmnModel, name: &str) -> Mat {
    let t = model.params.get(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(|c| c.to_vec()).collect()
}

fn param_vec(model: &GsmnModel, name: &str) -> Vec<f64> {
    model.params.get(name).unwrap().data().to_vec()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        assert_eq!(a[i].len(), k);
        for j in 0..m {
            for p in 0..k {
                out[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    out
}

fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

fn vecmat(x: &[f64], w: &Mat) -> Vec<f64> {
    matmul(&vec![x.to_vec()], w).remove(0)
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize_rows(a: &Mat) -> Mat {
    a.iter()
        .map(|r| {
            let n = norm(r);
            if n < 1e-12 {
                vec![0.0; r.len()]
            } else {
                r.iter().map(|v| v / n).collect()
            }
        })
        .collect()
}

pub fn softmax_rows(a: &Mat, scale: f64) -> Mat {
    a.iter()
        .map(|r| {
            let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|v| (scale * (v - max)).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

fn gru_states(model: &GsmnModel, prefix: &str, xs: &[Vec<f64>], reverse: bool) -> Mat {
    let p = |n: &str| param(model, &format!("{prefix}.{n}"));
    let b = |n: &str| param_vec(model, &format!("{prefix}.{n}"));
    let (wz, wr, wh, uz, ur, uh) = (p("w_z"), p("w_r"), p("w_h"), p("u_z"), p("u_r"), p("u_h"));
    let (bz, br, bh) = (b("b_z"), b("b_r"), b("b_h"));
    let dh = uz.len();
    let mut h = vec![0.0; dh];
    let mut out = vec![Vec::new(); xs.len()];
    let order: Vec<usize> = if reverse {
        (0..xs.len()).rev().collect()
    } else {
        (0..xs.len()).collect()
    };
    for i in order {
        let x = &xs[i];
        let (xz, xr, xh) = (vecmat(x, &wz), vecmat(x, &wr), vecmat(x, &wh));
        let (hz, hr) = (vecmat(&h, &uz), vecmat(&h, &ur));
        let z: Vec<f64> = (0..dh).map(|k| sigmoid(xz[k] + hz[k] + bz[k])).collect();
        let r: Vec<f64> = (0..dh).map(|k| sigmoid(xr[k] + hr[k] + br[k])).collect();
        let rh: Vec<f64> = (0..dh).map(|k| r[k] * h[k]).collect();
        let hh = vecmat(&rh, &uh);
        let cand: Vec<f64> = (0..dh).map(|k| (xh[k] + hh[k] + bh[k]).tanh()).collect();
        h = (0..dh).map(|k| (1.0 - z[k]) * h[k] + z[k] * cand[k]).collect();
        out[i] = h.clone();
    }
    out
}

/// Word node features, before normalisation.
pub fn oracle_words(model: &GsmnModel, text: &TextRecord) -> Mat {
    let emb = param(model, "encoder.embedding");
    let xs: Mat = text
        .tokens
        .iter()
        .map(|t| emb[model.vocab.lookup(t)].clone())
        .collect();
    let fwd = gru_states(model, "encoder.gru_fwd", &xs, false);
    if !model.config.bidirectional {
        return fwd;
    }
    let bwd = gru_states(model, "encoder.gru_bwd", &xs, true);
    fwd.iter()
        .zip(&bwd)
        .map(|(f, b)| f.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect())
        .collect()
}

pub fn oracle_regions(model: &GsmnModel, image: &ImageRecord) -> Mat {
    let w = param(model, "encoder.proj_w");
    let b = param_vec(model, "encoder.proj_b");
    image
        .regions
        .iter()
        .map(|r| vecmat(&r.feature, &w).iter().zip(&b).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn oracle_text_weights(text: &TextRecord, u: &Mat, dense: bool, lambda: f64) -> Mat {
    let m = u.len();
    let mut a = vec![vec![if dense { 1.0 } else { 0.0 }; m]; m];
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for &(i, j) in &text.dep_edges {
        a[i][j] = 1.0;
        a[j][i] = 1.0;
    }
    let s = softmax_rows(&matmul(u, &transpose(u)), lambda);
    let masked: Mat = (0..m)
        .map(|i| (0..m).map(|j| s[i][j] * a[i][j]).collect())
        .collect();
    normalize_rows(&masked)
}

fn wrap(a: f64) -> f64 {
    let mut w = a;
    while w > PI {
        w -= 2.0 * PI;
    }
    while w <= -PI {
        w += 2.0 * PI;
    }
    w
}

pub fn oracle_visual_weights(model: &GsmnModel, image: &ImageRecord, layer: usize) -> Vec<Mat> {
    let diag = image.width.hypot(image.height);
    let centres: Vec<(f64, f64)> = image
        .regions
        .iter()
        .map(|r| ((r.bbox[0] + r.bbox[2]) / 2.0, (r.bbox[1] + r.bbox[3]) / 2.0))
        .collect();
    let n = centres.len();
    (0..model.config.matching.kernels)
        .map(|k| {
            let mu = param_vec(model, &format!("match.visual_gcn{layer}.mu{k}"));
            let raw = param_vec(model, &format!("match.visual_gcn{layer}.sigma{k}"));
            let sr = (1.0 + raw[0].exp()).ln();
            let st = (1.0 + raw[1].exp()).ln();
            (0..n)
                .map(|i| {
                    (0..n)
                        .map(|j| {
                            let (dx, dy) = (centres[j].0 - centres[i].0, centres[j].1 - centres[i].1);
                            let (rho, theta) = if dx == 0.0 && dy == 0.0 {
                                (0.0, 0.0)
                            } else {
                                (dx.hypot(dy) / diag, dy.atan2(dx))
                            };
                            let dr = rho - mu[0];
                            let da = wrap(theta - mu[1]);
                            (-(dr * dr / (2.0 * sr * sr) + da * da / (2.0 * st * st))).exp()
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn act(v: f64, a: Activation) -> f64 {
    match a {
        Activation::Tanh => v.tanh(),
        Activation::Relu => v.max(0.0),
        Activation::Identity => v,
    }
}

/// Double-loop graph convolution: for every node, kernel and output unit,
/// sum the weighted, projected neighbour messages directly.
pub fn naive_gcn(x: &Mat, weights: &[Mat], kernels: &[Mat], bias: &[f64], a: Activation) -> Mat {
    let p = x.len();
    let kd = bias.len();
    let mut out = vec![Vec::new(); p];
    for i in 0..p {
        for (w, kern) in weights.iter().zip(kernels) {
            for o in 0..kd {
                let mut acc = 0.0;
                for j in 0..p {
                    for (c, &xv) in x[j].iter().enumerate() {
                        acc += w[i][j] * xv * kern[c][o];
                    }
                }
                out[i].push(act(acc + bias[o], a));
            }
        }
    }
    out
}

fn head_score(model: &GsmnModel, prefix: &str, nodes: &Mat) -> f64 {
    let wh = param(model, &format!("{prefix}.w_h"));
    let bh = param_vec(model, &format!("{prefix}.b_h"));
    let ws = param(model, &format!("{prefix}.w_s"));
    let bs = param_vec(model, &format!("{prefix}.b_s"))[0];
    let per: Vec<f64> = nodes
        .iter()
        .map(|x| {
            let hid = vecmat(x, &wh);
            let s: f64 = hid
                .iter()
                .zip(&bh)
                .zip(&ws)
                .map(|((h, b), w)| (h + b).tanh() * w[0])
                .sum();
            s + bs
        })
        .collect();
    per.iter().sum::<f64>() / per.len() as f64
}

fn direction(
    model: &GsmnModel,
    q: &Mat,
    k: &Mat,
    weights: &[Vec<Mat>],
    gcn: &str,
    head: &str,
) -> f64 {
    let m = &model.config.matching;
    let attn = softmax_rows(&matmul(q, &transpose(k)), m.lambda_attn);
    let att = matmul(&attn, k);
    let bs = q[0].len() / m.blocks;
    let mut x: Mat = q
        .iter()
        .zip(&att)
        .map(|(a, b)| {
            (0..m.blocks)
                .map(|t| cosine(&a[t * bs..(t + 1) * bs], &b[t * bs..(t + 1) * bs]))
                .collect()
        })
        .collect();
    if m.use_structure {
        for (layer, w) in weights.iter().enumerate() {
            let kernels: Vec<Mat> = (0..m.kernels)
                .map(|kk| param(model, &format!("{gcn}{layer}.kernel{kk}")))
                .collect();
            let bias = param_vec(model, &format!("{gcn}{layer}.bias"));
            x = naive_gcn(&x, w, &kernels, &bias, m.gcn_activation);
        }
    }
    head_score(model, head, &x)
}

/// Straight-line global similarity of one pair.
pub fn oracle_similarity(model: &GsmnModel, image: &ImageRecord, text: &TextRecord) -> f64 {
    let c = &model.config;
    let m = &c.matching;
    let fix = |a: Mat| if c.normalize_nodes { normalize_rows(&a) } else { a };
    let u = fix(oracle_words(model, text));
    let v = fix(oracle_regions(model, image));
    let mut g = 0.0;
    if m.direction.t2i() {
        let w = oracle_text_weights(
            text,
            &u,
            c.variant == gsmn::graphbuild::GraphVariant::Dense,
            c.text_lambda,
        );
        let layers = vec![vec![w; m.kernels]; m.gcn_depth];
        g += direction(model, &u, &v, &layers, "match.text_gcn", "match.text_head");
    }
    if m.direction.i2t() {
        let depth = if m.use_structure { m.gcn_depth } else { 0 };
        let layers: Vec<Vec<Mat>> = (0..depth)
            .map(|l| oracle_visual_weights(model, image, l))
            .collect();
        g += direction(model, &v, &u, &layers, "match.visual_gcn", "match.visual_head");
    }
    g
}
