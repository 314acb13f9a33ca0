//! Post-hoc analysis of checkpoints into JSON exports.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::runner::{Prepared, CONFIG_FILE};
use crate::analysis::{
    eval_plane, eval_random_surface, megabatch, model_top_k_eigs, plane_basis, Export, Metric, PowerIterConfig,
};
use crate::autodiff::ParamVector;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::federation::ServerState;

/// Which server model a checkpoint contributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Line {
    /// The SWA average when present, else the FedAvg model.
    Headline,
    Sgd,
    Swa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Line {
    pub fn select(self, state: &ServerState) -> Result<ParamVector> {
        match self {
            Line::Sgd => Ok(state.theta.clone()),
            Line::Swa if state.n_models == 0 => Err(Error::Usage(format!(
                "checkpoint at round {} has no SWA model yet",
                state.round
            ))),
            Line::Swa => Ok(state.swa_theta.clone()),
            Line::Headline => Ok(super::runner::headline_theta(state).clone()),
        }
    }
}

fn check(prep: &Prepared, theta: &ParamVector) -> Result<()> {
    if theta.layout() != prep.model.layout() {
        return Err(Error::Config("checkpoint does not match the configured model".into()));
    }
    Ok(())
}

fn split(prep: &Prepared, s: Split) -> &Dataset {
    match s {
        Split::Train => &prep.train,
        Split::Test => &prep.test,
    }
}

/// `config.toml` of the run a checkpoint belongs to: the checkpoint's
/// directory or one of its two parents.
pub fn find_run_config(checkpoint: &Path) -> Option<PathBuf> {
    checkpoint
        .ancestors()
        .skip(1)
        .take(3)
        .map(|d| d.join(CONFIG_FILE))
        .find(|p| p.is_file())
}

/// Top-`k` Hessian eigenvalues on a seeded mega-batch of the training set.
pub fn spectrum_export(
    prep: &Prepared,
    state: &ServerState,
    line: Line,
    k: usize,
    batch_size: usize,
    power: &PowerIterConfig,
) -> Result<Export> {
    let theta = line.select(state)?;
    check(prep, &theta)?;
    let all: Vec<usize> = (0..prep.train.len()).collect();
    let batch = megabatch(&prep.train, &all, batch_size, power.seed)?;
    let r = model_top_k_eigs(&theta, &prep.model, &batch, k, power)?;
    Ok(Export::spectrum(&r, power.seed))
}

/// Plane through three checkpoints, the first at the origin.
pub fn plane_export(
    prep: &Prepared,
    states: [&ServerState; 3],
    line: Line,
    n: usize,
    metric: Metric,
    s: Split,
) -> Result<Export> {
    let t: Vec<ParamVector> = states.iter().map(|st| line.select(st)).collect::<Result<_>>()?;
    for theta in &t {
        check(prep, theta)?;
    }
    let basis = plane_basis(&t[0], &t[1], &t[2])?;
    let grid = eval_plane(&basis, n, &prep.model, split(prep, s), metric)?;
    Ok(Export::plane(&grid))
}

/// Surface around one checkpoint along two seeded random directions.
pub fn surface_export(
    prep: &Prepared,
    state: &ServerState,
    line: Line,
    n: usize,
    seed: u64,
    metric: Metric,
    s: Split,
) -> Result<Export> {
    let theta = line.select(state)?;
    check(prep, &theta)?;
    let grid = eval_random_surface(&theta, &prep.model, split(prep, s), n, seed, metric)?;
    Ok(Export::surface(&grid))
}
