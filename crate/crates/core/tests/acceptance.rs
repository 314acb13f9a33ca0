mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use fedflat::analysis::{eval_plane, eval_random_surface_with, plane_basis, top_k_eigs, Metric, PowerIterConfig};
use fedflat::autodiff::{ModelObjective, ParamVector};
use fedflat::data::{dirichlet_partition, synth_classification, synth_train_test, PartitionSpec, SynthSpec};
use fedflat::federation::{
    fedavg_aggregate, fedavgm_update, run_round, swa_absorb, Augmentation, ClientConfig, ClientUpdate, FedConfig,
    FedEnv, ServerState, SwaConfig,
};
use fedflat::models::{init_params, mlp};
use fedflat::optim::{cyclic_lr, sam_perturb, sam_step, sgd_objective_step, CyclicLr, SamConfig, SgdConfig, SgdState};
use nalgebra::{DMatrix, DVector};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn gradient_oracle() -> Verdict {
    let start = Instant::now();
    let mut worst = Vec::new();
    for name in PRIMITIVES {
        worst.push((name, primitive_worst_error(name, GRAD_CASES)));
    }
    let t = start.elapsed();
    let ok = worst.iter().all(|&(_, e)| e < GRAD_TOL) && t < Duration::from_secs(60);
    let parts: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    verdict(
        ok,
        format!(
            "{GRAD_CASES} cases each, worst rel err: {}; {:.2}s",
            parts.join(", "),
            secs(t)
        ),
    )
}

fn eigensolver_oracle() -> Verdict {
    let start = Instant::now();
    let model = mlp(&[4, 5, 3]).unwrap();
    let ds = synth_classification(3, 10, 4, 7).unwrap();
    let batch = ds.full_batch().unwrap();
    let p = init_params(&model, 7);
    let dense = dense_top_k(dense_hessian(&p, &model, &batch), 5);
    let cfg = PowerIterConfig {
        max_iters: 5000,
        tol: 1e-13,
        seed: 1,
    };
    let power = top_k_eigs(&ModelObjective::new(&model, &batch), &p, 5, &cfg).unwrap();
    let t = start.elapsed();
    let worst = dense
        .iter()
        .zip(&power.eigenvalues)
        .map(|(d, q)| (d - q).abs() / d.abs())
        .fold(0.0f64, f64::max);
    let ok = model.num_params() <= 50 && worst < 1e-3 && t < Duration::from_secs(60);
    verdict(
        ok,
        format!(
            "{} params, dense {:?}, power {:?}, worst rel diff {worst:.1e}; {:.2}s",
            model.num_params(),
            dense.iter().map(|v| format!("{v:.5}")).collect::<Vec<_>>(),
            power.eigenvalues.iter().map(|v| format!("{v:.5}")).collect::<Vec<_>>(),
            secs(t)
        ),
    )
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12)
}

fn closed_form_suite() -> Verdict {
    let mut failed = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failed.push(name.to_string());
        }
    };
    let f = ParamVector::flat;

    // ρg/‖g‖ with g = (3, 4), ρ = 0.5.
    let eps = sam_perturb(
        &f(vec![1.0, 2.0]),
        &f(vec![3.0, 4.0]),
        &SamConfig {
            rho: 0.5,
            adaptive: false,
            eta: 0.0,
        },
    );
    check("sam_perturb", close(eps.as_slice(), &[0.3, 0.4]));

    // t = (1, 1.5), t⊙g = (3, −3), ‖t⊙g‖ = 3√2, ρ = √2: ε = t²⊙g / 3 = (1, −1.5).
    let asam = SamConfig {
        rho: 2f64.sqrt(),
        adaptive: true,
        eta: 0.5,
    };
    let eps = sam_perturb(&f(vec![0.5, -1.0]), &f(vec![3.0, -2.0]), &asam);
    check("asam_perturb", close(eps.as_slice(), &[1.0, -1.5]));

    let s = CyclicLr {
        gamma1: 0.1,
        gamma2: 0.01,
        cycle: 4,
    };
    let lrs: Vec<f64> = (1..=5).map(|i| cyclic_lr(i, &s)).collect();
    check("cyclic_lr", close(&lrs, &[0.0775, 0.055, 0.0325, 0.01, 0.0775]));

    let mut server = ServerState::new(f(vec![3.0, 6.0]));
    server.swa_theta = f(vec![1.0, 2.0]);
    server.n_models = 1;
    swa_absorb(&mut server);
    let first = server.swa_theta.as_slice().to_vec();
    server.theta = f(vec![0.0, 0.0]);
    swa_absorb(&mut server);
    check(
        "swa_absorb",
        close(&first, &[2.0, 4.0])
            && close(server.swa_theta.as_slice(), &[4.0 / 3.0, 8.0 / 3.0])
            && server.n_models == 3,
    );

    let updates = vec![
        ClientUpdate {
            client_id: 4,
            theta: f(vec![0.0, 4.0]),
            n_k: 3,
            train_loss: 0.0,
        },
        ClientUpdate {
            client_id: 1,
            theta: f(vec![4.0, 0.0]),
            n_k: 1,
            train_loss: 0.0,
        },
    ];
    check(
        "fedavg_aggregate",
        close(fedavg_aggregate(&updates).unwrap().as_slice(), &[1.0, 3.0]),
    );

    // Δ = (1, −1), v = 0.9·(0.5, 0) + Δ = (1.45, −1), θ = (1, 1) − 0.5·v.
    let mut server = ServerState::new(f(vec![1.0, 1.0]));
    server.momentum = f(vec![0.5, 0.0]);
    fedavgm_update(&mut server, &f(vec![0.0, 2.0]), 0.9, 0.5).unwrap();
    check(
        "fedavgm_update",
        close(server.momentum.as_slice(), &[1.45, -1.0]) && close(server.theta.as_slice(), &[0.275, 1.5]),
    );

    let ok = failed.is_empty();
    verdict(
        ok,
        if ok {
            "sam_perturb, asam, cyclic_lr, swa_absorb, fedavg_aggregate, fedavgm_update within 1e-12".to_string()
        } else {
            format!("mismatch in {}", failed.join(", "))
        },
    )
}

fn fed_fixture() -> (
    fedflat::models::ModelSpec,
    fedflat::data::Dataset,
    Vec<fedflat::data::ClientShard>,
) {
    let spec = SynthSpec {
        num_classes: 4,
        per_class: 20,
        input_dim: 5,
        spread: 1.0,
        seed: 3,
    };
    let (train, _) = synth_train_test(&spec, 5).unwrap();
    let shards = dirichlet_partition(
        &train,
        &PartitionSpec {
            num_clients: 6,
            alpha: 0.5,
            seed: 3,
        },
    )
    .unwrap();
    (mlp(&[5, 8, 4]).unwrap(), train, shards)
}

fn fed_config(sam: Option<SamConfig>) -> FedConfig {
    FedConfig {
        num_clients: 6,
        clients_per_round: 3,
        client: ClientConfig {
            sgd: SgdConfig {
                lr: 0.1,
                momentum: 0.9,
                weight_decay: 1e-3,
            },
            sam,
            batch_size: 4,
            epochs: 2,
            augment: Augmentation::None,
        },
        server_momentum: 0.0,
        server_lr: 1.0,
        swa: None,
        seed: 5,
        parallel: true,
    }
}

fn reductions() -> Verdict {
    let (model, train, shards) = fed_fixture();
    let env = FedEnv {
        model: &model,
        train: &train,
        shards: &shards,
        test: None,
    };

    let batch = train.batch(&[0, 5, 9, 17]).unwrap();
    let obj = ModelObjective::new(&model, &batch);
    let sgd = SgdConfig {
        lr: 0.1,
        momentum: 0.9,
        weight_decay: 1e-3,
    };
    let (mut a, mut b) = (init_params(&model, 1), init_params(&model, 1));
    let (mut sa, mut sb) = (SgdState::new(), SgdState::new());
    for _ in 0..5 {
        sam_step(
            &mut a,
            &obj,
            &mut sa,
            &SamConfig {
                rho: 0.0,
                adaptive: false,
                eta: 0.0,
            },
            &sgd,
        )
        .unwrap();
        sgd_objective_step(&mut b, &obj, &mut sb, &sgd).unwrap();
    }
    let mut sam_ok = a == b;
    let mut s_sam = ServerState::new(init_params(&model, 2));
    let mut s_sgd = s_sam.clone();
    let zero_rho = fed_config(Some(SamConfig {
        rho: 0.0,
        adaptive: true,
        eta: 0.1,
    }));
    for _ in 0..4 {
        run_round(&mut s_sam, &env, &zero_rho).unwrap();
        run_round(&mut s_sgd, &env, &fed_config(None)).unwrap();
        sam_ok &= s_sam.theta == s_sgd.theta;
    }

    let mut server = ServerState::new(init_params(&model, 4));
    let mut fedavgm_ok = true;
    for _ in 0..5 {
        let out = run_round(&mut server, &env, &fed_config(None)).unwrap();
        fedavgm_ok &= server.theta == fedavg_aggregate(&out.updates).unwrap();
    }

    let s = CyclicLr {
        gamma1: 0.037,
        gamma2: 1e-4,
        cycle: 1,
    };
    let mut cyclic_ok = (1..=1000).all(|i| cyclic_lr(i, &s).to_bits() == 0.037f64.to_bits());
    let mut cfg = fed_config(None);
    cfg.swa = Some(SwaConfig {
        start_round: 3,
        schedule: s,
        cyclic_before_start: false,
    });
    cyclic_ok &= (3..200).all(|r| cfg.round_lr(r).to_bits() == 0.037f64.to_bits());

    verdict(
        sam_ok && fedavgm_ok && cyclic_ok,
        format!("rho=0 SAM/ASAM == SGD: {sam_ok}; beta=0, lr=1 FedAvgM == FedAvg: {fedavgm_ok}; c=1 constant lr: {cyclic_ok}"),
    )
}

struct TrendResults {
    uniform: Vec<f64>,
    alpha0: Vec<f64>,
    alpha0_std: Vec<f64>,
    alpha0_lambda: Vec<f64>,
    asam_lambda: Vec<f64>,
    swa_std: Vec<f64>,
    gap_time: Duration,
    flat_time: Duration,
    swa_time: Duration,
}

const TREND_SEEDS: u64 = 5;

fn trend_runs() -> TrendResults {
    let dir = tempfile::tempdir().unwrap();
    let mut r = TrendResults {
        uniform: vec![],
        alpha0: vec![],
        alpha0_std: vec![],
        alpha0_lambda: vec![],
        asam_lambda: vec![],
        swa_std: vec![],
        gap_time: Duration::ZERO,
        flat_time: Duration::ZERO,
        swa_time: Duration::ZERO,
    };
    for seed in 0..TREND_SEEDS {
        let run = |name: &str, spec: TrendRun| {
            let rows = run_rows(&trend_config(seed, &spec), &dir.path().join(format!("{name}-{seed}")));
            let lam = rows.last().unwrap().lambda_max;
            (tail_accuracies(&rows), lam)
        };
        let t = Instant::now();
        let (u, _) = run(
            "uniform",
            TrendRun {
                alpha: 1000.0,
                optimizer: "sgd",
                swa: false,
                lambda_max: false,
            },
        );
        let (z, lam) = run(
            "alpha0",
            TrendRun {
                alpha: 0.0,
                optimizer: "sgd",
                swa: false,
                lambda_max: true,
            },
        );
        r.gap_time += t.elapsed();
        let t = Instant::now();
        let (_, asam_lam) = run(
            "asam",
            TrendRun {
                alpha: 0.0,
                optimizer: "asam",
                swa: false,
                lambda_max: true,
            },
        );
        r.flat_time += t.elapsed();
        let t = Instant::now();
        let (s, _) = run(
            "swa",
            TrendRun {
                alpha: 0.0,
                optimizer: "sgd",
                swa: true,
                lambda_max: false,
            },
        );
        r.swa_time += t.elapsed();
        r.uniform.push(mean(&u));
        r.alpha0.push(mean(&z));
        r.alpha0_std.push(std_dev(&z));
        r.alpha0_lambda.push(lam.unwrap());
        r.asam_lambda.push(asam_lam.unwrap());
        r.swa_std.push(std_dev(&s));
    }
    r
}

fn fmt_list(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ")
}

fn heterogeneity_gap(r: &TrendResults) -> Verdict {
    let gaps: Vec<f64> = r.uniform.iter().zip(&r.alpha0).map(|(u, z)| u - z).collect();
    let wins = gaps.iter().filter(|&&g| g >= 5.0).count();
    let ok = wins >= 4 && r.gap_time < Duration::from_secs(600);
    verdict(
        ok,
        format!(
            "last-{TREND_WINDOW} mean acc uniform [{}] vs alpha=0 [{}], gap [{}], {wins}/{TREND_SEEDS} seeds >= 5 points; {:.1}s",
            fmt_list(&r.uniform),
            fmt_list(&r.alpha0),
            fmt_list(&gaps),
            secs(r.gap_time)
        ),
    )
}

fn flatness(r: &TrendResults) -> Verdict {
    let wins = r
        .asam_lambda
        .iter()
        .zip(&r.alpha0_lambda)
        .filter(|(a, f)| a < f)
        .count();
    let ok = wins >= 4 && r.flat_time < Duration::from_secs(600);
    verdict(
        ok,
        format!(
            "final lambda_max FedASAM [{}] vs FedAvg [{}], {wins}/{TREND_SEEDS} seeds lower; {:.1}s extra",
            fmt_list(&r.asam_lambda),
            fmt_list(&r.alpha0_lambda),
            secs(r.flat_time)
        ),
    )
}

fn swa_stability(r: &TrendResults) -> Verdict {
    let wins = r.swa_std.iter().zip(&r.alpha0_std).filter(|(s, f)| s < f).count();
    verdict(
        wins >= 4,
        format!(
            "last-{TREND_WINDOW} acc std with SWA [{}] vs without [{}], {wins}/{TREND_SEEDS} seeds lower; {:.1}s",
            fmt_list(&r.swa_std),
            fmt_list(&r.alpha0_std),
            secs(r.swa_time)
        ),
    )
}

fn partition_statistics() -> Verdict {
    let mut structural = true;
    let mut single_class = true;
    let (mut balanced, mut total) = (0usize, 0usize);
    for seed in 0..20u64 {
        let ds = synth_classification(10, 5000, 1, seed).unwrap();
        for alpha in [0.0, 1000.0, 0.1] {
            let k = if alpha == 0.0 { 20 } else { 100 };
            let shards = dirichlet_partition(
                &ds,
                &PartitionSpec {
                    num_clients: k,
                    alpha,
                    seed,
                },
            )
            .unwrap();
            let mut seen = vec![false; ds.len()];
            for s in &shards {
                for &i in &s.indices {
                    structural &= !std::mem::replace(&mut seen[i], true);
                }
                structural &= s.class_hist.iter().sum::<usize>() == s.n_k();
                if alpha == 0.0 {
                    single_class &= s.classes_present() == 1;
                }
                if alpha == 1000.0 {
                    structural &= s.n_k() == 500;
                    let share = *s.class_hist.iter().max().unwrap() as f64 / s.n_k() as f64;
                    total += 1;
                    if share < 2.0 / 10.0 {
                        balanced += 1;
                    }
                }
            }
            structural &= seen.iter().all(|&b| b);
        }
    }
    let frac = balanced as f64 / total as f64;
    verdict(
        structural && single_class && frac >= 0.95,
        format!(
            "alpha=0 one class per client: {single_class}; alpha=1000 max share < 2x uniform in {balanced}/{total} ({:.1}%); conservation/disjointness: {structural}",
            100.0 * frac
        ),
    )
}

/// `½ θᵀAθ + bᵀθ + c` restricted to a plane is an exact quadratic in the plane coordinates.
fn quadratic_surface_residual() -> f64 {
    let n = 20;
    let mut r = rng(17);
    let m = normal_vec(&mut r, n * n, 1.0);
    let b = normal_vec(&mut r, n, 1.0);
    let theta = ParamVector::flat(normal_vec(&mut r, n, 1.0));
    let f = |p: &ParamVector| -> fedflat::Result<f64> {
        let x = p.as_slice();
        let mut v = 0.3;
        for i in 0..n {
            v += b[i] * x[i];
            for j in 0..n {
                v += 0.25 * (m[i * n + j] + m[j * n + i]) * x[i] * x[j];
            }
        }
        Ok(v)
    };
    let g = eval_random_surface_with(&theta, 21, 4, Metric::Loss, f).unwrap();
    let rows: Vec<[f64; 6]> = (0..21)
        .flat_map(|ib| (0..21).map(move |ia| (ia, ib)))
        .map(|(ia, ib)| {
            let (a, c) = (g.coords[ia], g.coords[ib]);
            [1.0, a, c, a * a, a * c, c * c]
        })
        .collect();
    let x = DMatrix::from_fn(rows.len(), 6, |i, j| rows[i][j]);
    let y = DVector::from_column_slice(&g.values);
    let coef = x.clone().svd(true, true).solve(&y, 1e-14).unwrap();
    (x * coef - y).amax()
}

fn geometry_suite() -> Verdict {
    let mut ortho: f64 = 0.0;
    for trial in 0..20 {
        let mut r = rng(trial);
        let t: Vec<ParamVector> = (0..3)
            .map(|_| ParamVector::flat(normal_vec(&mut r, 500, 1.0)))
            .collect();
        let basis = plane_basis(&t[0], &t[1], &t[2]).unwrap();
        ortho = ortho
            .max(basis.u.dot(&basis.v).abs())
            .max((basis.u.norm() - 1.0).abs())
            .max((basis.v.norm() - 1.0).abs());
    }

    let model = mlp(&[3, 6, 3]).unwrap();
    let ds = synth_classification(3, 20, 3, 2).unwrap();
    let thetas: Vec<ParamVector> = (0..3).map(|s| init_params(&model, 10 + s)).collect();
    let basis = plane_basis(&thetas[0], &thetas[1], &thetas[2]).unwrap();
    let mut origin_exact = true;
    for n in [5, 11, 21] {
        let grid = eval_plane(&basis, n, &model, &ds, Metric::Loss).unwrap();
        let ix = grid.xs.iter().position(|&x| x == 0.0);
        let iy = grid.ys.iter().position(|&y| y == 0.0);
        let direct = Metric::Loss.eval(&thetas[0], &model, &ds).unwrap();
        origin_exact &= match (ix, iy) {
            (Some(ix), Some(iy)) => grid.at(ix, iy).to_bits() == direct.to_bits(),
            _ => false,
        };
    }

    let resid = quadratic_surface_residual();
    verdict(
        ortho < 1e-10 && origin_exact && resid < 1e-8,
        format!("orthonormality err {ortho:.1e}; origin equals metric(theta1) bitwise: {origin_exact}; parabola fit residual {resid:.1e}"),
    )
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = trend_config(
        3,
        &TrendRun {
            alpha: 0.0,
            optimizer: "asam",
            swa: true,
            lambda_max: true,
        },
    );
    cfg.server.rounds = 40;
    cfg.probes.lambda_max_every = 10;
    cfg.probes.client_lambda_every = 20;
    cfg.probes.feature_norm_every = 20;
    let files = ["metrics.csv", "client_lambda.csv", "feature_norms.csv"];
    let mut contents = Vec::new();
    for run in ["a", "b"] {
        let path = dir.path().join(run);
        run_rows(&cfg, &path);
        contents.push(files.map(|f| std::fs::read(path.join(f)).unwrap()));
    }
    let same = contents[0] == contents[1];
    verdict(
        same,
        format!("two runs of a 40-round ASAM+SWA config: metrics/probe CSVs identical: {same}"),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut results: Vec<(&str, Verdict)> = vec![
        ("gradient oracle", gradient_oracle()),
        ("eigensolver oracle", eigensolver_oracle()),
        ("closed-form optimizer suite", closed_form_suite()),
        ("reductions", reductions()),
    ];
    let trends = trend_runs();
    results.push(("heterogeneity gap trend", heterogeneity_gap(&trends)));
    results.push(("flatness trend", flatness(&trends)));
    results.push(("SWA stability trend", swa_stability(&trends)));
    results.push(("partition statistics", partition_statistics()));
    results.push(("geometry suite", geometry_suite()));
    results.push(("determinism", determinism()));

    let mut failures = 0;
    for (name, v) in &results {
        println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failures += usize::from(!v.pass);
    }
    println!(
        "acceptance: {}/{} criteria passed in {:.1}s",
        results.len() - failures,
        results.len(),
        secs(start.elapsed())
    );
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
