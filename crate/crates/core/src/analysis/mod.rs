//! Diagnostics: Hessian spectra, loss landscapes and feature norms.

mod export;
mod landscape;
mod probes;
mod spectrum;

pub use export::{Export, ExportKind, ExportMeta};
pub use landscape::{
    eval_plane, eval_plane_with, eval_random_surface, eval_random_surface_with, grid_axis, linspace, plane_basis,
    random_directions, Metric, PlaneBasis, PlaneGrid, SurfaceGrid, DEFAULT_RESOLUTION, PLANE_MARGIN,
};
pub use probes::feature_norm_probe;
pub use spectrum::{
    megabatch, model_top_k_eigs, per_client_lambda_max, per_client_lambda_max_with, sharpness_ratio, top_k_eigs,
    PowerIterConfig, SpectrumReport, DEFAULT_MEGABATCH,
};
