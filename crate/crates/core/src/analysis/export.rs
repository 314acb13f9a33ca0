//! JSON exports read by the plotting tools:
//! `{"kind", "meta": {"N", "extent", "seed", "metric", ...}, "values"}` with
//! grid values row-major.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::landscape::{PlaneGrid, SurfaceGrid};
use super::spectrum::SpectrumReport;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportKind {
    Plane,
    Surface,
    Spectrum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportMeta {
    /// Grid resolution, or the number of eigenvalues for a spectrum.
    #[serde(rename = "N")]
    pub n: usize,
    /// `[x_min, x_max, y_min, y_max]`; empty for a spectrum.
    pub extent: Vec<f64>,
    pub seed: Option<u64>,
    pub metric: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchors: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axes: Option<[Vec<f64>; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residuals: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iters: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Export {
    pub kind: ExportKind,
    pub meta: ExportMeta,
    pub values: Vec<f64>,
}

impl Export {
    pub fn plane(g: &PlaneGrid) -> Self {
        Export {
            kind: ExportKind::Plane,
            meta: ExportMeta {
                n: g.resolution,
                extent: g.extent().to_vec(),
                seed: None,
                metric: g.metric.name().into(),
                margin: Some(g.margin),
                anchors: Some(g.anchors.iter().map(|&(x, y)| [x, y]).collect()),
                axes: Some([g.xs.clone(), g.ys.clone()]),
                residuals: None,
                iters: None,
            },
            values: g.values.clone(),
        }
    }

    pub fn surface(g: &SurfaceGrid) -> Self {
        Export {
            kind: ExportKind::Surface,
            meta: ExportMeta {
                n: g.resolution,
                extent: vec![-1.0, 1.0, -1.0, 1.0],
                seed: Some(g.seed),
                metric: g.metric.name().into(),
                margin: None,
                anchors: None,
                axes: Some([g.coords.clone(), g.coords.clone()]),
                residuals: None,
                iters: None,
            },
            values: g.values.clone(),
        }
    }

    pub fn spectrum(r: &SpectrumReport, seed: u64) -> Self {
        Export {
            kind: ExportKind::Spectrum,
            meta: ExportMeta {
                n: r.eigenvalues.len(),
                extent: vec![],
                seed: Some(seed),
                metric: "hessian_eigenvalue".into(),
                margin: None,
                anchors: None,
                axes: None,
                residuals: Some(r.residuals.clone()),
                iters: Some(r.iters.clone()),
            },
            values: r.eigenvalues.clone(),
        }
    }

    /// Checks that `values` has the length implied by `kind` and `N`.
    pub fn validate(&self) -> Result<()> {
        let want = match self.kind {
            ExportKind::Spectrum => self.meta.n,
            ExportKind::Plane | ExportKind::Surface => self.meta.n * self.meta.n,
        };
        if self.values.len() != want {
            return Err(Error::Usage(format!(
                "{:?} export with N = {} needs {want} values, found {}",
                self.kind,
                self.meta.n,
                self.values.len()
            )));
        }
        if self.kind != ExportKind::Spectrum && self.meta.extent.len() != 4 {
            return Err(Error::Usage("grid extent must have 4 entries".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let e: Export = serde_json::from_str(s)?;
        e.validate()?;
        Ok(e)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
