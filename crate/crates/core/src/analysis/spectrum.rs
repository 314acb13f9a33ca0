//! Top-k Hessian eigenpairs by power iteration with Hotelling deflation.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{hvp_with, ModelObjective, Objective, ParamVector};
use crate::data::{Batch, ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::federation::ClientUpdate;
use crate::models::ModelSpec;

/// Default size of the fixed batch used for Hessian products.
pub const DEFAULT_MEGABATCH: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerIterConfig {
    pub max_iters: usize,
    /// Stop once `‖Hv − λv‖ ≤ tol·|λ|`.
    pub tol: f64,
    /// Seed of the random start vectors.
    pub seed: u64,
}

impl Default for PowerIterConfig {
    fn default() -> Self {
        Self {
            max_iters: 20,
            tol: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Descending.
    pub eigenvalues: Vec<f64>,
    pub iters: Vec<usize>,
    /// `‖Hv − λv‖ / ‖v‖` against the undeflated Hessian.
    pub residuals: Vec<f64>,
    pub converged: Vec<bool>,
    #[serde(skip)]
    pub eigenvectors: Vec<ParamVector>,
}

impl SpectrumReport {
    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues[0]
    }
}

fn random_unit(template: &ParamVector, rng: &mut ChaCha8Rng) -> ParamVector {
    let mut v = template.with_data((0..template.len()).map(|_| StandardNormal.sample(rng)).collect());
    let n = v.norm();
    v.scale(1.0 / n);
    v
}

fn orthogonalize(v: &mut ParamVector, basis: &[ParamVector]) {
    for b in basis {
        let c = v.dot(b);
        v.axpy(-c, b);
    }
}

fn non_finite(index: usize) -> Error {
    Error::NonFinite {
        index,
        msg: "Hessian-vector product produced a non-finite value".into(),
    }
}

/// The `k` dominant eigenpairs of the Hessian of `objective` at `params`.
///
/// Pair `j` iterates `v ← normalize(Hv − Σ_{i<j} λ_i ⟨v_i, v⟩ v_i)`, keeping
/// `v` orthogonal to the earlier eigenvectors, until the residual
/// `‖Hv − λv‖` drops to `tol·|λ|` or `max_iters` is reached. A pair is
/// flagged converged only if every pair found before it converged too. Pairs
/// are found in order of magnitude and reported in descending order of value.
pub fn top_k_eigs<O: Objective + ?Sized>(
    objective: &O,
    params: &ParamVector,
    k: usize,
    cfg: &PowerIterConfig,
) -> Result<SpectrumReport> {
    if k == 0 || cfg.max_iters == 0 {
        return Err(Error::Usage("top_k_eigs needs k ≥ 1 and max_iters ≥ 1".into()));
    }
    if k > params.len() {
        return Err(Error::Usage(format!(
            "requested {k} eigenvalues of a {}-dimensional Hessian",
            params.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut vals: Vec<f64> = Vec::with_capacity(k);
    let mut vecs: Vec<ParamVector> = Vec::with_capacity(k);
    let mut iters = Vec::with_capacity(k);
    let mut converged = Vec::with_capacity(k);
    for j in 0..k {
        let mut v = random_unit(params, &mut rng);
        orthogonalize(&mut v, &vecs);
        v.scale(1.0 / v.norm());
        let mut lambda = f64::NAN;
        let mut used = 0;
        let mut done = false;
        while used < cfg.max_iters {
            used += 1;
            let mut w = hvp_with(objective, params, &v)?;
            if !w.is_finite() {
                return Err(non_finite(j));
            }
            for (l, u) in vals.iter().zip(&vecs) {
                let c = l * u.dot(&v);
                w.axpy(-c, u);
            }
            orthogonalize(&mut w, &vecs);
            lambda = v.dot(&w);
            let wn = w.norm();
            if wn == 0.0 {
                done = true;
                break;
            }
            let mut r = w.clone();
            r.axpy(-lambda, &v);
            let residual = r.norm();
            v = w;
            v.scale(1.0 / wn);
            if residual <= cfg.tol * lambda.abs() {
                done = true;
                break;
            }
        }
        vals.push(lambda);
        vecs.push(v);
        iters.push(used);
        // Deflating against an unconverged pair leaves its error in later pairs.
        let clean = converged.iter().all(|&c| c);
        converged.push(done && clean);
    }
    let mut residuals = Vec::with_capacity(k);
    for (j, (l, v)) in vals.iter().zip(&vecs).enumerate() {
        let mut r = hvp_with(objective, params, v)?;
        if !r.is_finite() {
            return Err(non_finite(j));
        }
        r.axpy(-l, v);
        residuals.push(r.norm() / v.norm());
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    Ok(SpectrumReport {
        eigenvalues: order.iter().map(|&i| vals[i]).collect(),
        iters: order.iter().map(|&i| iters[i]).collect(),
        residuals: order.iter().map(|&i| residuals[i]).collect(),
        converged: order.iter().map(|&i| converged[i]).collect(),
        eigenvectors: order.iter().map(|&i| vecs[i].clone()).collect(),
    })
}

/// `λ_max / λ_5`; `None` when `|λ_5| < 1e-12`.
pub fn sharpness_ratio(report: &SpectrumReport) -> Result<Option<f64>> {
    if report.eigenvalues.len() < 5 {
        return Err(Error::Usage(format!(
            "sharpness ratio needs 5 eigenvalues, report has {}",
            report.eigenvalues.len()
        )));
    }
    let l5 = report.eigenvalues[4];
    if l5.abs() < 1e-12 {
        return Ok(None);
    }
    Ok(Some(report.eigenvalues[0] / l5))
}

/// Seeded subset of at most `size` samples taken from `indices`, in
/// ascending order.
pub fn megabatch(ds: &Dataset, indices: &[usize], size: usize, seed: u64) -> Result<Batch> {
    if indices.is_empty() || size == 0 {
        return Err(Error::Usage("mega-batch needs at least one sample".into()));
    }
    let mut picked: Vec<usize> = if indices.len() <= size {
        indices.to_vec()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        index::sample(&mut rng, indices.len(), size)
            .into_iter()
            .map(|i| indices[i])
            .collect()
    };
    picked.sort_unstable();
    ds.batch(&picked)
}

/// Top eigenvalue of the Hessian of model loss on a fixed mega-batch.
pub fn model_top_k_eigs(
    params: &ParamVector,
    model: &ModelSpec,
    batch: &Batch,
    k: usize,
    cfg: &PowerIterConfig,
) -> Result<SpectrumReport> {
    top_k_eigs(&ModelObjective::new(model, batch), params, k, cfg)
}

/// `λ_max` of each client's objective at that client's parameters.
pub fn per_client_lambda_max_with<O, F>(
    clients: &[(usize, &ParamVector)],
    objective: F,
    cfg: &PowerIterConfig,
) -> Result<Vec<(usize, f64)>>
where
    O: Objective,
    F: Fn(usize) -> Result<O> + Sync,
{
    clients
        .par_iter()
        .map(|&(id, theta)| {
            let obj = objective(id)?;
            let r = top_k_eigs(&obj, theta, 1, cfg)?;
            Ok((id, r.lambda_max()))
        })
        .collect()
}

/// `λ_max^k` at each client's locally updated parameters on its own data
/// (capped at `max_batch` samples).
pub fn per_client_lambda_max(
    updates: &[ClientUpdate],
    model: &ModelSpec,
    train: &Dataset,
    shards: &[ClientShard],
    max_batch: usize,
    cfg: &PowerIterConfig,
) -> Result<Vec<(usize, f64)>> {
    let batches: Vec<(usize, Batch)> = updates
        .iter()
        .map(|u| {
            let shard = shards
                .iter()
                .find(|s| s.client_id == u.client_id)
                .ok_or_else(|| Error::Usage(format!("no shard for client {}", u.client_id)))?;
            Ok((u.client_id, megabatch(train, &shard.indices, max_batch, cfg.seed)?))
        })
        .collect::<Result<_>>()?;
    let clients: Vec<(usize, &ParamVector)> = updates.iter().map(|u| (u.client_id, &u.theta)).collect();
    per_client_lambda_max_with(
        &clients,
        |id| {
            let (_, b) = batches.iter().find(|(c, _)| *c == id).expect("batch built above");
            Ok(ModelObjective::new(model, b))
        },
        cfg,
    )
}
