//! Minimal dense-tensor engine: reverse-mode gradients over a per-call tape
//! and finite-difference Hessian-vector products.

mod params;
mod tape;
mod tensor;

pub use params::{Layout, LayoutEntry, ParamVector};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::models::ModelSpec;

/// Mean cross-entropy of `model` on `batch`, with the tape needed for [`backward`].
pub fn forward_loss(params: &ParamVector, model: &ModelSpec, batch: &Batch) -> Result<(f64, Tape)> {
    if params.layout().as_ref() != model.layout().as_ref() {
        return Err(Error::Config(format!(
            "parameter vector ({} values) does not match the model manifest ({} values)",
            params.len(),
            model.num_params()
        )));
    }
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let mut tape = Tape::new(Arc::clone(params.layout()));
    let x = tape.constant(batch.inputs().clone());
    let logits = model.forward(&mut tape, params, x)?;
    let targets = batch.targets().to_soft(model.num_classes())?;
    let loss = tape.softmax_cross_entropy(logits, targets)?;
    let value = tape.value(loss).data()[0];
    Ok((value, tape))
}

/// Gradient of the tape's scalar terminal with respect to every parameter.
pub fn backward(tape: &Tape) -> Result<ParamVector> {
    tape.backward()
}

/// A differentiable scalar function of a parameter vector.
pub trait Objective: Sync {
    fn loss(&self, params: &ParamVector) -> Result<f64>;

    fn loss_and_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)>;
}

/// Cross-entropy of a model on one fixed batch.
#[derive(Debug)]
pub struct ModelObjective<'a> {
    pub model: &'a ModelSpec,
    pub batch: &'a Batch,
}

impl<'a> ModelObjective<'a> {
    pub fn new(model: &'a ModelSpec, batch: &'a Batch) -> Self {
        Self { model, batch }
    }
}

impl Objective for ModelObjective<'_> {
    fn loss(&self, params: &ParamVector) -> Result<f64> {
        forward_loss(params, self.model, self.batch).map(|(l, _)| l)
    }

    fn loss_and_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)> {
        let (l, tape) = forward_loss(params, self.model, self.batch)?;
        Ok((l, tape.backward()?))
    }
}

/// Wraps an objective and counts gradient evaluations.
#[derive(Debug)]
pub struct CountingObjective<O> {
    inner: O,
    grad_evals: AtomicUsize,
}

impl<O: Objective> CountingObjective<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            grad_evals: AtomicUsize::new(0),
        }
    }

    pub fn grad_evals(&self) -> usize {
        self.grad_evals.load(Ordering::Relaxed)
    }
}

impl<O: Objective> Objective for CountingObjective<O> {
    fn loss(&self, params: &ParamVector) -> Result<f64> {
        self.inner.loss(params)
    }

    fn loss_and_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)> {
        self.grad_evals.fetch_add(1, Ordering::Relaxed);
        self.inner.loss_and_grad(params)
    }
}

/// Hessian-vector product by central differences of gradients,
/// `(g(θ + εv) − g(θ − εv)) / 2ε` with `ε = 1e-4 / max(1, ‖v‖)`.
///
/// Exact for quadratic objectives up to round-off.
pub fn hvp_with<O: Objective + ?Sized>(objective: &O, params: &ParamVector, v: &ParamVector) -> Result<ParamVector> {
    params.check_compatible(v)?;
    let vn = v.norm();
    if !vn.is_finite() {
        return Err(Error::Usage("hvp direction is not finite".into()));
    }
    if vn == 0.0 {
        return Ok(params.zeros_like());
    }
    let eps = 1e-4 / vn.max(1.0);
    let mut plus = params.clone();
    plus.axpy(eps, v);
    let mut minus = params.clone();
    minus.axpy(-eps, v);
    let (_, gp) = objective.loss_and_grad(&plus)?;
    let (_, gm) = objective.loss_and_grad(&minus)?;
    let inv = 1.0 / (2.0 * eps);
    Ok(params.with_data(
        gp.as_slice()
            .iter()
            .zip(gm.as_slice())
            .map(|(a, b)| (a - b) * inv)
            .collect(),
    ))
}

/// Hessian of the model's batch loss applied to `v`.
pub fn hvp(params: &ParamVector, model: &ModelSpec, batch: &Batch, v: &ParamVector) -> Result<ParamVector> {
    hvp_with(&ModelObjective::new(model, batch), params, v)
}
