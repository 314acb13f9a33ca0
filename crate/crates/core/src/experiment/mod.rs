//! Config-driven experiment runs: parsing, orchestration, checkpoints,
//! metric files, reports and post-hoc analysis of checkpoints.

mod analyze;
mod checkpoint;
mod config;
mod report;
mod runner;

pub use analyze::{find_run_config, plane_export, spectrum_export, surface_export, Line, Split};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint};
pub use config::{
    locate_key, preset, AugmentKind, ClientSection, DatasetKind, DatasetSection, ExperimentConfig, ModelKind,
    ModelSection, OptimizerKind, PartitionSection, ProbeSection, ServerSection, SwaSection, PRESETS,
};
pub use report::{
    compare_runs, improvement, metrics_record, read_metrics, summarize, write_metrics, Comparison, ComparisonRow,
    ExperimentReport, FINAL_WINDOW, METRICS_HEADER,
};
pub use runner::{
    checkpoint_path, config_snapshot, headline_theta, latest_checkpoint, output_root, prepare, run_dir, run_experiment,
    Prepared, CHECKPOINT_DIR, CLIENT_LAMBDA_FILE, CONFIG_FILE, FEATURE_NORM_FILE, METRICS_FILE, OUTPUT_ROOT_ENV,
    REPORT_FILE,
};
