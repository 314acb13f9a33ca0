//! Loss planes through three weight vectors and random-direction surfaces.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamVector;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::federation::evaluate;
use crate::models::ModelSpec;

/// Default grid resolution.
pub const DEFAULT_RESOLUTION: usize = 21;
/// Fraction of the anchor bounding box added on every side of a plane grid.
pub const PLANE_MARGIN: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Mean cross-entropy.
    Loss,
    /// Top-1 error, `1 − accuracy`.
    Error,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Loss => "loss",
            Metric::Error => "error",
        }
    }

    pub fn eval(self, theta: &ParamVector, model: &ModelSpec, ds: &Dataset) -> Result<f64> {
        let r = evaluate(theta, model, ds)?;
        Ok(match self {
            Metric::Loss => r.loss,
            Metric::Error => 1.0 - r.accuracy,
        })
    }
}

/// Orthonormal basis of the plane through `θ1, θ2, θ3`, with `θ1` at the
/// origin and `θ2` on the positive `û` axis.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneBasis {
    pub origin: ParamVector,
    pub u: ParamVector,
    pub v: ParamVector,
    /// Plane coordinates of `θ1, θ2, θ3`.
    pub anchors: [(f64, f64); 3],
}

impl PlaneBasis {
    /// `θ1 + x·û + y·v̂`; the origin itself is returned unchanged.
    pub fn point(&self, x: f64, y: f64) -> ParamVector {
        let mut p = self.origin.clone();
        if x != 0.0 {
            p.axpy(x, &self.u);
        }
        if y != 0.0 {
            p.axpy(y, &self.v);
        }
        p
    }

    /// Orthogonal projection of `theta` onto plane coordinates.
    pub fn coords(&self, theta: &ParamVector) -> (f64, f64) {
        let d = theta.sub(&self.origin);
        (d.dot(&self.u), d.dot(&self.v))
    }
}

/// Gram–Schmidt on `u = θ2 − θ1`, `v = (θ3 − θ1) − ⟨θ3 − θ1, u⟩/‖u‖² · u`,
/// both normalized.
pub fn plane_basis(theta1: &ParamVector, theta2: &ParamVector, theta3: &ParamVector) -> Result<PlaneBasis> {
    theta1.check_compatible(theta2)?;
    theta1.check_compatible(theta3)?;
    let u = theta2.sub(theta1);
    let w = theta3.sub(theta1);
    let un = u.norm();
    if un == 0.0 || !un.is_finite() {
        return Err(Error::Geometry("θ2 coincides with θ1".into()));
    }
    let mut v = w.clone();
    v.axpy(-w.dot(&u) / (un * un), &u);
    let vn = v.norm();
    if !(vn > 1e-10 * w.norm()) {
        return Err(Error::Geometry("θ3 is collinear with θ1 and θ2".into()));
    }
    let u = u.scaled(1.0 / un);
    let v = v.scaled(1.0 / vn);
    let anchors = [(0.0, 0.0), (un, 0.0), (w.dot(&u), w.dot(&v))];
    Ok(PlaneBasis {
        origin: theta1.clone(),
        u,
        v,
        anchors,
    })
}

/// `n` evenly spaced values from `a` to `b`, endpoints exact.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![a],
        _ => (0..n)
            .map(|i| {
                if i == n - 1 {
                    b
                } else {
                    a + (b - a) * i as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

/// Grid axis of `n` equal steps covering `[lo, hi]` widened by `margin` of
/// its span on each side. For `n ≥ 3` the axis contains 0 exactly.
pub fn grid_axis(lo: f64, hi: f64, n: usize, margin: f64) -> Vec<f64> {
    let (lo, hi) = (lo.min(0.0), hi.max(0.0));
    let span = hi - lo;
    let (a, b) = (lo - margin * span, hi + margin * span);
    if n < 3 || span == 0.0 {
        return linspace(a, b, n);
    }
    let mut best = (f64::INFINITY, 1);
    for k in 1..(n - 1) {
        let dx = (-a / k as f64).max(b / (n - 1 - k) as f64);
        if dx < best.0 {
            best = (dx, k);
        }
    }
    let (dx, k) = best;
    (0..n).map(|i| (i as f64 - k as f64) * dx).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneGrid {
    pub resolution: usize,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub anchors: [(f64, f64); 3],
    pub margin: f64,
    pub metric: Metric,
    /// Row-major, rows indexed by `y`.
    pub values: Vec<f64>,
}

impl PlaneGrid {
    /// `[x_min, x_max, y_min, y_max]`.
    pub fn extent(&self) -> [f64; 4] {
        [
            self.xs[0],
            *self.xs.last().unwrap(),
            self.ys[0],
            *self.ys.last().unwrap(),
        ]
    }

    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.resolution + ix]
    }
}

fn eval_grid<F>(xs: &[f64], ys: &[f64], point: impl Fn(f64, f64) -> ParamVector + Sync, f: F) -> Result<Vec<f64>>
where
    F: Fn(&ParamVector) -> Result<f64> + Sync,
{
    let cells: Vec<(f64, f64)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
    cells.par_iter().map(|&(x, y)| f(&point(x, y))).collect()
}

/// Evaluates `f` on the `n × n` grid spanning the anchors.
pub fn eval_plane_with<F>(basis: &PlaneBasis, n: usize, metric: Metric, f: F) -> Result<PlaneGrid>
where
    F: Fn(&ParamVector) -> Result<f64> + Sync,
{
    if n < 2 {
        return Err(Error::Usage("plane resolution must be at least 2".into()));
    }
    let (xl, xh, yl, yh) = basis.anchors.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), &(x, y)| (a.min(x), b.max(x), c.min(y), d.max(y)),
    );
    let xs = grid_axis(xl, xh, n, PLANE_MARGIN);
    let ys = grid_axis(yl, yh, n, PLANE_MARGIN);
    let values = eval_grid(&xs, &ys, |x, y| basis.point(x, y), f)?;
    Ok(PlaneGrid {
        resolution: n,
        xs,
        ys,
        anchors: basis.anchors,
        margin: PLANE_MARGIN,
        metric,
        values,
    })
}

/// Model `metric` on `ds` over the plane grid.
pub fn eval_plane(basis: &PlaneBasis, n: usize, model: &ModelSpec, ds: &Dataset, metric: Metric) -> Result<PlaneGrid> {
    eval_plane_with(basis, n, metric, |p| metric.eval(p, model, ds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceGrid {
    pub resolution: usize,
    pub seed: u64,
    /// Shared by both axes.
    pub coords: Vec<f64>,
    pub metric: Metric,
    /// Row-major, rows indexed by the `d2` coordinate.
    pub values: Vec<f64>,
    #[serde(skip)]
    pub directions: Option<(ParamVector, ParamVector)>,
}

impl SurfaceGrid {
    pub fn at(&self, ia: usize, ib: usize) -> f64 {
        self.values[ib * self.resolution + ia]
    }
}

/// Two seeded Gaussian directions scaled to unit norm.
pub fn random_directions(template: &ParamVector, seed: u64) -> (ParamVector, ParamVector) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || {
        let mut d = template.with_data((0..template.len()).map(|_| StandardNormal.sample(&mut rng)).collect());
        let n = d.norm();
        d.scale(1.0 / n);
        d
    };
    let d1 = draw();
    let d2 = draw();
    (d1, d2)
}

/// Evaluates `f` at `θ + a·d1 + b·d2` for `a, b` on `resolution` points of
/// `[−1, 1]`.
pub fn eval_random_surface_with<F>(
    theta: &ParamVector,
    resolution: usize,
    seed: u64,
    metric: Metric,
    f: F,
) -> Result<SurfaceGrid>
where
    F: Fn(&ParamVector) -> Result<f64> + Sync,
{
    if resolution < 2 {
        return Err(Error::Usage("surface resolution must be at least 2".into()));
    }
    let (d1, d2) = random_directions(theta, seed);
    let coords = linspace(-1.0, 1.0, resolution);
    let point = |a: f64, b: f64| {
        let mut p = theta.clone();
        if a != 0.0 {
            p.axpy(a, &d1);
        }
        if b != 0.0 {
            p.axpy(b, &d2);
        }
        p
    };
    let values = eval_grid(&coords, &coords, point, f)?;
    Ok(SurfaceGrid {
        resolution,
        seed,
        coords,
        metric,
        values,
        directions: Some((d1, d2)),
    })
}

pub fn eval_random_surface(
    theta: &ParamVector,
    model: &ModelSpec,
    ds: &Dataset,
    resolution: usize,
    seed: u64,
    metric: Metric,
) -> Result<SurfaceGrid> {
    eval_random_surface_with(theta, resolution, seed, metric, |p| metric.eval(p, model, ds))
}
