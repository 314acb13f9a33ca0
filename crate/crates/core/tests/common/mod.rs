#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use fedflat::autodiff::{hvp, Layout, ParamVector, Tape, Tensor, Var};
use fedflat::data::Batch;
use fedflat::experiment::{read_metrics, run_experiment, ExperimentConfig};
use fedflat::federation::RoundMetrics;
use fedflat::models::ModelSpec;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_CASES: usize = 100;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u1: f64 = rng.random_range(1e-12..1.0);
            let u2: f64 = rng.random();
            scale * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Builds a scalar graph on a fresh tape and returns its value.
pub type Graph<'a> = dyn Fn(&mut Tape, &ParamVector) -> Var + 'a;

fn eval_graph(graph: &Graph<'_>, p: &ParamVector) -> (f64, Tape) {
    let mut tape = Tape::new(Arc::clone(p.layout()));
    let out = graph(&mut tape, p);
    let v = tape.value(out).data()[0];
    (v, tape)
}

/// Relative error between the tape gradient and central differences.
pub fn check_graph(graph: &Graph<'_>, p: &ParamVector) -> f64 {
    let (_, tape) = eval_graph(graph, p);
    let analytic = tape.backward().unwrap();
    let mut probe = p.clone();
    let numeric: Vec<f64> = (0..p.len())
        .map(|i| {
            let x = p.as_slice()[i];
            probe.as_mut_slice()[i] = x + FD_STEP;
            let (fp, _) = eval_graph(graph, &probe);
            probe.as_mut_slice()[i] = x - FD_STEP;
            let (fm, _) = eval_graph(graph, &probe);
            probe.as_mut_slice()[i] = x;
            (fp - fm) / (2.0 * FD_STEP)
        })
        .collect();
    rel_err(analytic.as_slice(), &numeric)
}

fn weighted_sum(tape: &mut Tape, y: Var, weights: Vec<f64>) -> Var {
    let shape = tape.value(y).shape().to_vec();
    let r = tape.constant(Tensor::new(shape, weights).unwrap());
    let prod = tape.mul(y, r).unwrap();
    tape.sum(prod)
}

fn params_from<R: Rng>(rng: &mut R, layout: Layout, scale: f64) -> ParamVector {
    let layout = Arc::new(layout);
    let n = layout.len();
    ParamVector::from_vec(layout, normal_vec(rng, n, scale)).unwrap()
}

/// Values spaced 0.01 apart in random order, so no FD step changes an argmax.
fn distinct_values<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .into_iter()
        .map(|k| (k as f64 - n as f64 / 2.0) * 0.01 + rng.random_range(0.0..0.002))
        .collect()
}

/// Worst relative gradient error of one primitive over `cases` random instances.
pub fn primitive_worst_error(name: &str, cases: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let mut r = rng(1000 * name.len() as u64 + case as u64);
        let err = match name {
            "dense" => {
                let (n, i, o) = (r.random_range(1..5), r.random_range(1..7), r.random_range(1..6));
                let layout = Layout::new([("w", vec![o, i]), ("b", vec![o])]);
                let p = params_from(&mut r, layout, 1.0);
                let x = Tensor::new(vec![n, i], normal_vec(&mut r, n * i, 1.0)).unwrap();
                let weights = normal_vec(&mut r, n * o, 1.0);
                check_graph(
                    &|t: &mut Tape, p: &ParamVector| {
                        let xv = t.constant(x.clone());
                        let w = t.param(p, "w").unwrap();
                        let b = t.param(p, "b").unwrap();
                        let y = t.dense(xv, w, b).unwrap();
                        weighted_sum(t, y, weights.clone())
                    },
                    &p,
                )
            }
            "conv5x5" => {
                let (n, c, o) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
                let (h, w) = (r.random_range(5..9), r.random_range(5..9));
                let layout = Layout::new([("x", vec![n, c, h, w]), ("w", vec![o, c, 5, 5]), ("b", vec![o])]);
                let p = params_from(&mut r, layout, 0.5);
                let weights = normal_vec(&mut r, n * o * (h - 4) * (w - 4), 1.0);
                check_graph(
                    &|t: &mut Tape, p: &ParamVector| {
                        let xv = t.param(p, "x").unwrap();
                        let wv = t.param(p, "w").unwrap();
                        let bv = t.param(p, "b").unwrap();
                        let y = t.conv2d(xv, wv, bv).unwrap();
                        weighted_sum(t, y, weights.clone())
                    },
                    &p,
                )
            }
            "maxpool2x2" => {
                let (n, c) = (r.random_range(1..3), r.random_range(1..4));
                let (h, w) = (2 * r.random_range(1..5), 2 * r.random_range(1..5));
                let len = n * c * h * w;
                let layout = Arc::new(Layout::new([("x", vec![n, c, h, w])]));
                let p = ParamVector::from_vec(layout, distinct_values(&mut r, len)).unwrap();
                let weights = normal_vec(&mut r, len / 4, 1.0);
                check_graph(
                    &|t: &mut Tape, p: &ParamVector| {
                        let xv = t.param(p, "x").unwrap();
                        let y = t.maxpool2d(xv, 2).unwrap();
                        weighted_sum(t, y, weights.clone())
                    },
                    &p,
                )
            }
            "relu" => {
                let len = r.random_range(1..40);
                let data: Vec<f64> = (0..len)
                    .map(|_| {
                        let m = r.random_range(0.05..1.0);
                        if r.random::<bool>() {
                            m
                        } else {
                            -m
                        }
                    })
                    .collect();
                let layout = Arc::new(Layout::new([("x", vec![len])]));
                let p = ParamVector::from_vec(layout, data).unwrap();
                let weights = normal_vec(&mut r, len, 1.0);
                check_graph(
                    &|t: &mut Tape, p: &ParamVector| {
                        let xv = t.param(p, "x").unwrap();
                        let y = t.relu(xv);
                        weighted_sum(t, y, weights.clone())
                    },
                    &p,
                )
            }
            "softmax_ce" => {
                let (n, k) = (r.random_range(1..6), r.random_range(2..11));
                let layout = Layout::new([("z", vec![n, k])]);
                let p = params_from(&mut r, layout, 2.0);
                let mut targets = vec![0.0; n * k];
                for row in targets.chunks_mut(k) {
                    if case % 2 == 0 {
                        row[r.random_range(0..k)] = 1.0;
                    } else {
                        let raw: Vec<f64> = (0..k).map(|_| r.random::<f64>()).collect();
                        let s: f64 = raw.iter().sum();
                        for (t, v) in row.iter_mut().zip(raw) {
                            *t = v / s;
                        }
                    }
                }
                check_graph(
                    &|t: &mut Tape, p: &ParamVector| {
                        let z = t.param(p, "z").unwrap();
                        t.softmax_cross_entropy(z, targets.clone()).unwrap()
                    },
                    &p,
                )
            }
            other => panic!("unknown primitive {other}"),
        };
        worst = worst.max(err);
    }
    worst
}

pub const PRIMITIVES: [&str; 5] = ["dense", "conv5x5", "maxpool2x2", "relu", "softmax_ce"];

/// Dense Hessian assembled column by column from Hessian-vector products.
pub fn dense_hessian(params: &ParamVector, model: &ModelSpec, batch: &Batch) -> DMatrix<f64> {
    let n = params.len();
    let mut h = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = params.zeros_like();
        e.as_mut_slice()[j] = 1.0;
        let col = hvp(params, model, batch, &e).unwrap();
        for i in 0..n {
            h[(i, j)] = col.as_slice()[i];
        }
    }
    (&h + h.transpose()) * 0.5
}

/// Top `k` eigenvalues by magnitude of a symmetric matrix, sorted descending.
pub fn dense_top_k(h: DMatrix<f64>, k: usize) -> Vec<f64> {
    let eig = nalgebra::SymmetricEigen::new(h);
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| b.abs().partial_cmp(&a.abs()).unwrap());
    vals.truncate(k);
    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
    vals
}

/// Synthetic federated run used by the trend checks.
pub struct TrendRun {
    pub alpha: f64,
    pub optimizer: &'static str,
    pub swa: bool,
    pub lambda_max: bool,
}

pub const TREND_ROUNDS: usize = 300;
pub const TREND_WINDOW: usize = 50;

pub fn trend_config(seed: u64, run: &TrendRun) -> ExperimentConfig {
    let mut src = format!(
        r#"
seed = {seed}

[dataset]
kind = "synthetic"
num_classes = 10
per_class = 100
test_per_class = 100
input_dim = 8
spread = 1.0

[partition]
num_clients = 20
alpha = {alpha:?}

[model]
kind = "mlp"
hidden = [32]

[client]
optimizer = "{opt}"
lr = 0.3
weight_decay = 4e-4
batch_size = 5
epochs = 10
rho = 0.5
eta = 0.2

[server]
rounds = {TREND_ROUNDS}
clients_per_round = 5

[probes]
lambda_max_every = {lam}
power_iters = 100
power_tol = 1e-6
checkpoint_every = 0
"#,
        alpha = run.alpha,
        opt = run.optimizer,
        lam = if run.lambda_max { TREND_ROUNDS } else { 0 },
    );
    if run.swa {
        src.push_str("\n[swa]\ncycle = 5\nlr_max = 0.3\nlr_min = 0.003\n");
    }
    ExperimentConfig::from_toml(&src).unwrap()
}

pub fn run_rows(cfg: &ExperimentConfig, dir: &Path) -> Vec<RoundMetrics> {
    run_experiment(cfg, dir, false).unwrap();
    read_metrics(std::fs::File::open(dir.join("metrics.csv")).unwrap()).unwrap()
}

pub fn tail_accuracies(rows: &[RoundMetrics]) -> Vec<f64> {
    rows[rows.len() - TREND_WINDOW..]
        .iter()
        .map(|r| 100.0 * r.headline_accuracy().unwrap())
        .collect()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}
