//! Client optimisers (SGD, SAM, ASAM) and the cyclic SWA learning rate.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Objective, ParamVector};
use crate::error::Result;

/// Below this norm the SAM ascent direction is treated as undefined.
const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Momentum buffer; created lazily on the first step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    buf: Option<Vec<f64>>,
}

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// `g' = g + λθ`, `buf = μ·buf + g'`, `θ -= γ·buf` (the buffer is skipped when `μ = 0`).
pub fn sgd_step(params: &mut ParamVector, grad: &ParamVector, state: &mut SgdState, cfg: &SgdConfig) {
    assert_eq!(params.len(), grad.len(), "gradient length mismatch");
    let theta = params.as_mut_slice();
    let g = grad.as_slice();
    let wd = cfg.weight_decay;
    if cfg.momentum == 0.0 {
        for (t, &gi) in theta.iter_mut().zip(g) {
            let d = if wd != 0.0 { gi + wd * *t } else { gi };
            *t -= cfg.lr * d;
        }
        return;
    }
    match &mut state.buf {
        None => {
            let buf: Vec<f64> = theta
                .iter()
                .zip(g)
                .map(|(t, &gi)| if wd != 0.0 { gi + wd * t } else { gi })
                .collect();
            for (t, b) in theta.iter_mut().zip(&buf) {
                *t -= cfg.lr * b;
            }
            state.buf = Some(buf);
        }
        Some(buf) => {
            for ((t, b), &gi) in theta.iter_mut().zip(buf.iter_mut()).zip(g) {
                let d = if wd != 0.0 { gi + wd * *t } else { gi };
                *b = cfg.momentum * *b + d;
                *t -= cfg.lr * *b;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamConfig {
    /// Neighbourhood radius.
    pub rho: f64,
    /// Scale the neighbourhood elementwise by `|θ| + η` (ASAM).
    pub adaptive: bool,
    /// Stabiliser added to `|θ|`; ignored unless `adaptive`.
    pub eta: f64,
}

/// First-order worst-case perturbation inside the (adaptive) ρ-ball.
///
/// Plain: `ε = ρ g / ‖g‖`. Adaptive with `t = |θ| + η`:
/// `ε = ρ t²⊙g / ‖t⊙g‖`. A zero vector is returned when the norm vanishes.
pub fn sam_perturb(params: &ParamVector, grad: &ParamVector, cfg: &SamConfig) -> ParamVector {
    assert_eq!(params.len(), grad.len(), "gradient length mismatch");
    if !cfg.adaptive {
        let n = grad.norm();
        if n < DEGENERATE_NORM || cfg.rho == 0.0 {
            return grad.zeros_like();
        }
        return grad.scaled(cfg.rho / n);
    }
    let scaled: Vec<f64> = params
        .as_slice()
        .iter()
        .zip(grad.as_slice())
        .map(|(&t, &g)| (t.abs() + cfg.eta) * g)
        .collect();
    let n = scaled.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n < DEGENERATE_NORM || cfg.rho == 0.0 {
        return grad.zeros_like();
    }
    let k = cfg.rho / n;
    grad.with_data(
        params
            .as_slice()
            .iter()
            .zip(&scaled)
            .map(|(&t, &tg)| k * (t.abs() + cfg.eta) * tg)
            .collect(),
    )
}

/// Outcome of one local optimiser step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Loss at the pre-step iterate.
    pub loss: f64,
    /// Forward+backward passes consumed.
    pub grad_evals: usize,
}

/// Plain SGD step on `objective`.
pub fn sgd_objective_step<O: Objective + ?Sized>(
    params: &mut ParamVector,
    objective: &O,
    state: &mut SgdState,
    cfg: &SgdConfig,
) -> Result<StepReport> {
    let (loss, g) = objective.loss_and_grad(params)?;
    sgd_step(params, &g, state, cfg);
    Ok(StepReport { loss, grad_evals: 1 })
}

/// Two-pass sharpness-aware step: gradient at θ, ascent to θ + ε on the same
/// batch, gradient there, then an SGD step at θ with that gradient. Weight
/// decay only enters the descent step.
pub fn sam_step<O: Objective + ?Sized>(
    params: &mut ParamVector,
    objective: &O,
    state: &mut SgdState,
    sam: &SamConfig,
    sgd: &SgdConfig,
) -> Result<StepReport> {
    let (loss, g1) = objective.loss_and_grad(params)?;
    let eps = sam_perturb(params, &g1, sam);
    let mut ascended = params.clone();
    ascended.axpy(1.0, &eps);
    let (_, g2) = objective.loss_and_grad(&ascended)?;
    sgd_step(params, &g2, state, sgd);
    Ok(StepReport { loss, grad_evals: 2 })
}

/// SWA cycle: `gamma1` at the start of each cycle, decreasing linearly to
/// `gamma2` at its last step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CyclicLr {
    pub gamma1: f64,
    pub gamma2: f64,
    pub cycle: usize,
}

/// `γ(i) = (1 − t(i))γ1 + t(i)γ2`, `t(i) = (mod(i − 1, c) + 1) / c`, for the
/// 1-based step `i`. A cycle of length 1 is the constant rate `γ1`.
pub fn cyclic_lr(i: usize, sched: &CyclicLr) -> f64 {
    assert!(i >= 1, "cyclic_lr index is 1-based");
    assert!(sched.cycle >= 1, "cycle length must be positive");
    if sched.cycle == 1 {
        return sched.gamma1;
    }
    let c = sched.cycle;
    let t = ((i - 1) % c + 1) as f64 / c as f64;
    (1.0 - t) * sched.gamma1 + t * sched.gamma2
}
