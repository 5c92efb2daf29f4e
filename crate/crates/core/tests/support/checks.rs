//! Criterion checks shared by the integration tests and the acceptance
//! runner. Each returns a measured error or a description of the failure.

use gsmn::autodiff::gradcheck::{check, rel_error, GradCheck};
use gsmn::autodiff::{Tape, Tensor, Var};
use gsmn::config::{Activation, Config, Direction};
use gsmn::eval::recall_at_k;
use gsmn::graphbuild::{text_graph_weights, GraphVariant};
use gsmn::graphio::{ImageRecord, TextRecord};
use gsmn::matching::{attend, gcn_layer, row_entropy, GcnVars, TextSide};
use gsmn::train::{triplet_loss_batch, Checkpoint};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::*;

pub const GRAD_TOL: f64 = 1e-4;
const H: f64 = 1e-5;

fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Entries bounded away from zero, for ops with a kink or pole there.
fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = rand_tensor(r, shape);
    for v in t.data_mut() {
        *v = v.signum() * (0.2 + v.abs());
    }
    t
}

/// Contracts any output with fixed random weights so that every entry of
/// the gradient is exercised with a distinct coefficient.
fn project(tape: &Tape, x: Var) -> Var {
    let shape = tape.shape(x);
    let mut r = rng(shape.iter().sum::<usize>() as u64 + 17);
    let w = tape.constant(rand_tensor(&mut r, &shape));
    tape.sum(tape.mul(x, w).unwrap())
}

type OpFn = Box<dyn Fn(&Tape, &[Var]) -> gsmn::Result<Var>>;

fn ops(r: &mut ChaCha8Rng) -> Vec<(&'static str, OpFn, Vec<Tensor>)> {
    let m23 = rand_tensor(r, &[2, 3]);
    let m34 = rand_tensor(r, &[3, 4]);
    let m23b = rand_tensor(r, &[2, 3]);
    let v3 = rand_tensor(r, &[3]);
    let s = Tensor::scalar(0.7);
    let m24 = rand_tensor(r, &[2, 4]);
    let m34b = rand_tensor(r, &[3, 4]);
    let angles = Tensor::matrix(2, 2, vec![-2.5, 0.3, 4.0, 8.0]).unwrap();
    let sims = Tensor::from_rows(&[
        vec![0.31, 0.52, 0.07],
        vec![0.12, 0.27, 0.44],
        vec![0.61, 0.04, 0.15],
    ])
    .unwrap();
    let mut v: Vec<(&'static str, OpFn, Vec<Tensor>)> = Vec::new();
    macro_rules! op {
        ($name:expr, $inputs:expr, $f:expr) => {
            v.push(($name, Box::new($f), $inputs))
        };
    }
    op!("matmul", vec![m23.clone(), m34.clone()], |t, x| {
        Ok(project(t, t.matmul(x[0], x[1])?))
    });
    op!("transpose", vec![m23.clone()], |t, x| Ok(project(t, t.transpose(x[0])?)));
    op!("add", vec![m23.clone(), m23b.clone()], |t, x| Ok(project(t, t.add(x[0], x[1])?)));
    op!("sub", vec![m23.clone(), m23b.clone()], |t, x| Ok(project(t, t.sub(x[0], x[1])?)));
    op!("mul", vec![m23.clone(), m23b.clone()], |t, x| Ok(project(t, t.mul(x[0], x[1])?)));
    op!("add_row", vec![m23.clone(), v3.clone()], |t, x| {
        Ok(project(t, t.add_row(x[0], x[1])?))
    });
    op!("add_scalar", vec![m23.clone(), s.clone()], |t, x| {
        Ok(project(t, t.add_scalar(x[0], x[1])?))
    });
    op!("mul_scalar", vec![m23.clone(), s.clone()], |t, x| {
        Ok(project(t, t.mul_scalar(x[0], x[1])?))
    });
    op!("scale", vec![m23.clone()], |t, x| Ok(project(t, t.scale(x[0], -1.5))));
    op!("offset", vec![m23.clone()], |t, x| Ok(project(t, t.offset(x[0], 0.25))));
    op!("neg", vec![m23.clone()], |t, x| Ok(project(t, t.neg(x[0]))));
    op!("tanh", vec![m23.clone()], |t, x| Ok(project(t, t.tanh(x[0]))));
    op!("sigmoid", vec![m23.clone()], |t, x| Ok(project(t, t.sigmoid(x[0]))));
    op!("exp", vec![m23.clone()], |t, x| Ok(project(t, t.exp(x[0]))));
    op!("square", vec![m23.clone()], |t, x| Ok(project(t, t.square(x[0]))));
    op!("relu", vec![away_from_zero(r, &[2, 3])], |t, x| Ok(project(t, t.relu(x[0]))));
    op!("softplus", vec![m23.clone()], |t, x| Ok(project(t, t.softplus(x[0]))));
    op!("recip", vec![away_from_zero(r, &[2, 3])], |t, x| Ok(project(t, t.recip(x[0]))));
    op!("wrap_angle", vec![angles], |t, x| Ok(project(t, t.wrap_angle(x[0]))));
    op!("softmax_rows", vec![m23.clone()], |t, x| {
        Ok(project(t, t.softmax_rows(x[0], 3.0)?))
    });
    op!("l2_normalize_rows", vec![m23.clone()], |t, x| {
        Ok(project(t, t.l2_normalize_rows(x[0])))
    });
    op!("cosine", vec![v3.clone(), rand_tensor(r, &[3])], |t, x| t.cosine(x[0], x[1]));
    op!("block_cosine_rows", vec![m24.clone(), rand_tensor(r, &[2, 4])], |t, x| {
        Ok(project(t, t.block_cosine_rows(x[0], x[1], 2)?))
    });
    op!("sum", vec![m23.clone()], |t, x| Ok(t.sum(t.square(x[0]))));
    op!("mean_rows", vec![m23.clone()], |t, x| Ok(project(t, t.mean_rows(x[0]))));
    op!("concat", vec![m34.clone(), m24.clone()], |t, x| {
        Ok(project(t, t.concat(&[x[0], x[1]])?))
    });
    op!("concat_cols", vec![m23.clone(), m24.clone()], |t, x| {
        Ok(project(t, t.concat_cols(&[x[0], x[1]])?))
    });
    op!("slice", vec![m34.clone()], |t, x| Ok(project(t, t.slice(x[0], 2, vec![2, 3])?)));
    op!("row", vec![m34.clone()], |t, x| Ok(project(t, t.row(x[0], 1)?)));
    op!("slice_blocks", vec![m24.clone()], |t, x| {
        let parts = t.slice_blocks(x[0], 2)?;
        Ok(project(t, t.mul(parts[0], parts[1])?))
    });
    op!("gather", vec![m34.clone()], |t, x| Ok(project(t, t.gather(x[0], &[5, 0, 5, 11])?)));
    op!("gather_rows", vec![m34b.clone()], |t, x| {
        Ok(project(t, t.gather_rows(x[0], &[2, 0, 2])?))
    });
    op!("reshape", vec![m34.clone()], |t, x| Ok(project(t, t.reshape(x[0], vec![2, 6])?)));
    op!("stack", vec![m23.clone()], |t, x| {
        let a = t.sum(t.tanh(x[0]));
        let b = t.sum(t.square(x[0]));
        Ok(project(t, t.stack(&[a, b, a], vec![3])?))
    });
    op!("triplet_loss", vec![sims], |t, x| triplet_loss_batch(t, x[0], 0.2, None));
    op!("gcn_layer", vec![rand_tensor(r, &[3, 2]), rand_tensor(r, &[2, 2]), rand_tensor(r, &[2])], |t, x| {
        let w = t.constant(
            Tensor::from_rows(&[vec![1.0, 0.5, 0.0], vec![0.2, 0.8, 0.3], vec![0.0, 0.4, 0.6]])
                .unwrap(),
        );
        let params = GcnVars {
            kernels: vec![x[1]],
            bias: x[2],
            pseudo: None,
        };
        Ok(project(t, gcn_layer(t, x[0], &[w], &params, Activation::Tanh)?))
    });
    v
}

/// Finite-difference check of every tape operation.
pub fn op_gradients() -> Vec<(&'static str, GradCheck)> {
    let mut r = rng(2024);
    ops(&mut r)
        .into_iter()
        .map(|(name, f, inputs)| (name, check(f, &inputs, H).unwrap()))
        .collect()
}

/// Tape gradient of the global similarity with respect to every model
/// parameter against central differences of the forward pass.
pub fn end_to_end_gradient(seed: u64) -> GradCheck {
    let model = random_model(tiny_config(), seed);
    let mut r = rng(seed);
    let image = random_image(&mut r, 2);
    let text = random_text(&mut r, 2);

    let tape = Tape::new();
    let vars = model.bind(&tape);
    let t = model.text_side(&tape, &vars, &text).unwrap();
    let i = model.image_side(&tape, &vars, &image).unwrap();
    let (g, _) = model.pair(&tape, &vars, &t, &i).unwrap();
    let mut grads = tape.backward(g).unwrap();
    let analytic = vars.bound.collect_grads(&model.params, &mut grads);

    let mut probe = model.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    let ids: Vec<_> = model.params.ids().collect();
    for (id, grad) in ids.into_iter().zip(&analytic) {
        for k in 0..grad.len() {
            let orig = model.params.value(id).data()[k];
            probe.params.value_mut(id).data_mut()[k] = orig + H;
            let plus = probe.global_similarity(&image, &text).unwrap();
            probe.params.value_mut(id).data_mut()[k] = orig - H;
            let minus = probe.global_similarity(&image, &text).unwrap();
            probe.params.value_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * H);
            let a = grad.data()[k];
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.max_rel_error = report.max_rel_error.max(rel_error(a, numeric, 1e-6));
            report.checked += 1;
        }
    }
    report
}

fn to_tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

fn rand_mat(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| r.gen_range(-1.0..1.0)).collect())
        .collect()
}

/// Largest absolute difference between the tape convolution and the
/// double-loop oracle over `graphs` random graphs with up to six nodes.
pub fn gcn_oracle_max_error(graphs: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let acts = [Activation::Tanh, Activation::Relu, Activation::Identity];
    let mut worst: f64 = 0.0;
    for g in 0..graphs {
        let p = r.gen_range(1..=6);
        let t_in = r.gen_range(1..=5);
        let kernels = r.gen_range(1..=3);
        let kd = r.gen_range(1..=4);
        let act = acts[g % 3];
        let x = rand_mat(&mut r, p, t_in);
        let weights: Vec<Mat> = (0..kernels)
            .map(|_| {
                (0..p)
                    .map(|i| {
                        (0..p)
                            .map(|j| {
                                if i == j {
                                    r.gen_range(0.1..1.0)
                                } else if r.gen_bool(0.5) {
                                    r.gen_range(0.0..1.0)
                                } else {
                                    0.0
                                }
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let kmats: Vec<Mat> = (0..kernels).map(|_| rand_mat(&mut r, t_in, kd)).collect();
        let bias: Vec<f64> = (0..kd).map(|_| r.gen_range(-1.0..1.0)).collect();

        let expected = naive_gcn(&x, &weights, &kmats, &bias, act);
        let tape = Tape::new();
        let xv = tape.constant(to_tensor(&x));
        let wv: Vec<Var> = weights.iter().map(|w| tape.constant(to_tensor(w))).collect();
        let params = GcnVars {
            kernels: kmats.iter().map(|k| tape.constant(to_tensor(k))).collect(),
            bias: tape.constant(Tensor::vector(bias.clone())),
            pseudo: None,
        };
        let got = tape.value(gcn_layer(&tape, xv, &wv, &params, act).unwrap());
        for (i, row) in expected.iter().enumerate() {
            for (c, e) in row.iter().enumerate() {
                worst = worst.max((got.at(i, c) - e).abs());
            }
        }
    }
    worst
}

/// Configurations exercised by the similarity oracle: both graph
/// variants, each single direction, no structure, two layers, a
/// unidirectional encoder and unnormalised nodes.
pub fn oracle_configs() -> Vec<Config> {
    let base = tiny_config();
    let mut out = vec![base.clone()];
    let mut c = small_config();
    c.variant = GraphVariant::Dense;
    out.push(c);
    let mut c = small_config();
    c.matching.direction = Direction::T2iOnly;
    out.push(c);
    let mut c = small_config();
    c.matching.direction = Direction::I2tOnly;
    c.matching.gcn_activation = Activation::Relu;
    out.push(c);
    let mut c = base.clone();
    c.matching.use_structure = false;
    out.push(c);
    let mut c = small_config();
    c.matching.gcn_depth = 2;
    out.push(c);
    let mut c = base.clone();
    c.bidirectional = false;
    out.push(c);
    let mut c = small_config();
    c.normalize_nodes = false;
    out.push(c);
    out
}

/// Largest |g_tape − g_oracle| over `instances` random pairs. The first
/// instance of every configuration has two words and two regions.
pub fn similarity_oracle_max_error(instances: usize, seed: u64) -> f64 {
    let configs = oracle_configs();
    let mut worst: f64 = 0.0;
    for k in 0..instances {
        let config = configs[k % configs.len()].clone();
        let model = random_model(config, seed + k as u64);
        let mut r = rng(seed * 31 + k as u64);
        let (m, n) = if k < configs.len() {
            (2, 2)
        } else {
            (r.gen_range(1..=5), r.gen_range(1..=5))
        };
        let image = random_image(&mut r, n);
        let text = random_text(&mut r, m);
        let got = model.global_similarity(&image, &text).unwrap();
        let want = oracle_similarity(&model, &image, &text);
        worst = worst.max((got - want).abs());
    }
    worst
}

pub type Check = std::result::Result<(), String>;

pub fn softmax_rows_sum_to_one(x: &Mat, lambda: f64) -> Check {
    let tape = Tape::new();
    let v = tape.constant(to_tensor(x));
    let s = tape.value(tape.softmax_rows(v, lambda).unwrap());
    for i in 0..s.rows() {
        let row = s.row(i);
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > 1e-12 || row.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
            return Err(format!("row {i} = {row:?}"));
        }
    }
    Ok(())
}

/// Rows of the cross-modal attention are distributions.
pub fn attention_rows_normalised(q: &Mat, k: &Mat, lambda: f64) -> Check {
    let tape = Tape::new();
    let (a, _) = attend(&tape, tape.constant(to_tensor(q)), tape.constant(to_tensor(k)), lambda)
        .map_err(|e| e.to_string())?;
    let a = tape.value(a);
    for i in 0..a.rows() {
        let total: f64 = a.row(i).iter().sum();
        if (total - 1.0).abs() > 1e-12 || a.row(i).iter().any(|&w| w < 0.0) {
            return Err(format!("attention row {i} sums to {total}"));
        }
    }
    Ok(())
}

/// Attention entropy does not increase as λ grows.
pub fn entropy_monotone(q: &Mat, k: &Mat, lambdas: &[f64]) -> Check {
    let mut prev: Option<Vec<f64>> = None;
    for &l in lambdas {
        let tape = Tape::new();
        let (a, _) = attend(&tape, tape.constant(to_tensor(q)), tape.constant(to_tensor(k)), l)
            .map_err(|e| e.to_string())?;
        let h = row_entropy(&tape.value(a));
        if let Some(p) = &prev {
            for (i, (hp, hn)) in p.iter().zip(&h).enumerate() {
                if *hn > hp + 1e-12 {
                    return Err(format!("row {i}: entropy rose from {hp} to {hn} at λ={l}"));
                }
            }
        }
        prev = Some(h);
    }
    Ok(())
}

pub fn cosine_bounded(a: &[f64], b: &[f64]) -> Check {
    let tape = Tape::new();
    let c = tape.scalar_value(
        tape.cosine(tape.constant(Tensor::vector(a.to_vec())), tape.constant(Tensor::vector(b.to_vec())))
            .unwrap(),
    );
    if (-1.0 - 1e-12..=1.0 + 1e-12).contains(&c) {
        Ok(())
    } else {
        Err(format!("cosine {c}"))
    }
}

fn loss_value(s: &Mat, margin: f64) -> f64 {
    let tape = Tape::new();
    let v = tape.constant(to_tensor(s));
    tape.scalar_value(triplet_loss_batch(&tape, v, margin, None).unwrap())
}

/// The loss is non-negative and unchanged when the batch is relabelled.
pub fn loss_nonnegative_and_relabel_invariant(s: &Mat, perm: &[usize], margin: f64) -> Check {
    let l = loss_value(s, margin);
    if l < 0.0 {
        return Err(format!("negative loss {l}"));
    }
    let permuted: Mat = perm
        .iter()
        .map(|&i| perm.iter().map(|&j| s[i][j]).collect())
        .collect();
    let lp = loss_value(&permuted, margin);
    if (l - lp).abs() > 1e-12 {
        return Err(format!("loss {l} became {lp} after relabelling"));
    }
    Ok(())
}

/// A batch whose diagonal beats every negative by at least the margin.
pub fn deadzone_loss() -> f64 {
    loss_value(
        &vec![vec![1.0, 0.5, 0.1], vec![0.3, 0.9, 0.2], vec![0.0, 0.3, 0.8]],
        0.2,
    )
}

/// Percentage of queries whose best-ranked true candidate sits in the
/// top `k`, counting ties in favour of the lower index.
pub fn brute_recall(sims: &Mat, truth: &[Vec<usize>], k: usize) -> f64 {
    let hits = sims
        .iter()
        .zip(truth)
        .filter(|(row, t)| {
            t.iter().any(|&c| {
                let ahead = (0..row.len())
                    .filter(|&o| row[o] > row[c] || (row[o] == row[c] && o < c))
                    .count();
                ahead < k
            })
        })
        .count();
    100.0 * hits as f64 / sims.len() as f64
}

/// Recall agrees with the brute-force count and is unchanged by strictly
/// increasing transforms of the scores.
pub fn recall_checks(sims: &Mat, truth: &[Vec<usize>], k: usize) -> Check {
    let base = recall_at_k(&to_tensor(sims), truth, k).map_err(|e| e.to_string())?;
    let brute = brute_recall(sims, truth, k);
    if base != brute {
        return Err(format!("recall {base} but brute force {brute}"));
    }
    let transforms: [fn(f64) -> f64; 3] = [|x| 4.0 * x, |x| x * x * x + 8.0, |x| x.atan()];
    for (n, f) in transforms.iter().enumerate() {
        let t: Mat = sims.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect();
        let r = recall_at_k(&to_tensor(&t), truth, k).map_err(|e| e.to_string())?;
        if r != base {
            return Err(format!("transform {n} moved recall from {base} to {r}"));
        }
    }
    Ok(())
}

pub fn random_perm(r: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(r);
    p
}

/// |g(I, T) − g(πI, T)| for a random region permutation π.
pub fn image_permutation_drift(seed: u64) -> f64 {
    let model = random_model(small_config(), seed);
    let mut r = rng(seed + 1);
    let n = r.gen_range(2..=6);
    let image = random_image(&mut r, n);
    let m = r.gen_range(1..=5);
    let text = random_text(&mut r, m);
    let perm = random_perm(&mut r, n);
    let shuffled = ImageRecord {
        regions: perm.iter().map(|&i| image.regions[i].clone()).collect(),
        ..image.clone()
    };
    let a = model.global_similarity(&image, &text).unwrap();
    let b = model.global_similarity(&shuffled, &text).unwrap();
    (a - b).abs()
}

/// Drift under a permutation of encoded word nodes applied together with
/// the token order and the dependency edges.
pub fn text_permutation_drift(seed: u64, variant: GraphVariant) -> f64 {
    let mut config = small_config();
    config.variant = variant;
    let model = random_model(config, seed);
    let mut r = rng(seed + 2);
    let m = r.gen_range(2..=6);
    let n = r.gen_range(1..=5);
    let image = random_image(&mut r, n);
    let text = random_text(&mut r, m);
    let perm = random_perm(&mut r, m);
    let mut position = vec![0; m];
    for (new, &old) in perm.iter().enumerate() {
        position[old] = new;
    }
    let shuffled = TextRecord {
        tokens: perm.iter().map(|&i| text.tokens[i].clone()).collect(),
        dep_edges: text.dep_edges.iter().map(|&(i, j)| (position[i], position[j])).collect(),
        ..text.clone()
    };

    let tape = Tape::new();
    let vars = model.bind(&tape);
    let ts = model.text_side(&tape, &vars, &text).unwrap();
    let is = model.image_side(&tape, &vars, &image).unwrap();
    let (g, _) = model.pair(&tape, &vars, &ts, &is).unwrap();
    let nodes = tape.gather_rows(ts.nodes, &perm).unwrap();
    let (_, w) = text_graph_weights(&tape, &shuffled, nodes, variant, model.config.text_lambda).unwrap();
    let tp = TextSide {
        nodes,
        weights: Some(w),
    };
    let (gp, _) = model.pair(&tape, &vars, &tp, &is).unwrap();
    (tape.scalar_value(g) - tape.scalar_value(gp)).abs()
}

/// Encoding and decoding a checkpoint reproduces every parameter and the
/// forward pass bit for bit.
pub fn checkpoint_roundtrip(seed: u64) -> Check {
    let model = random_model(small_config(), seed);
    let bytes = Checkpoint::from_model(&model, 3, 412.5).encode();
    let restored = Checkpoint::decode(&bytes)
        .and_then(|c| c.into_model())
        .map_err(|e| e.to_string())?;
    for ((na, ta), (nb, tb)) in model.params.iter().zip(restored.params.iter()) {
        let same = na == nb
            && ta.shape() == tb.shape()
            && ta.data().iter().zip(tb.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(format!("parameter {na} differs"));
        }
    }
    let mut r = rng(seed + 3);
    for _ in 0..3 {
        let image = random_image(&mut r, 3);
        let text = random_text(&mut r, 4);
        let a = model.global_similarity(&image, &text).unwrap();
        let b = restored.global_similarity(&image, &text).unwrap();
        if a.to_bits() != b.to_bits() {
            return Err(format!("forward {a} became {b}"));
        }
    }
    Ok(())
}

pub fn max_grad_error(results: &[(&str, GradCheck)]) -> (String, f64) {
    results
        .iter()
        .map(|(n, g)| (n.to_string(), g.max_rel_error))
        .fold((String::new(), 0.0), |acc, x| if x.1 > acc.1 { x } else { acc })
}
