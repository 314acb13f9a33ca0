//! `fedflat` command line.
//!
//! Exit codes: 0 success, 1 configuration or invocation error, 2 runtime
//! error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fedflat::analysis::{Export, Metric, PowerIterConfig, DEFAULT_MEGABATCH, DEFAULT_RESOLUTION};
use fedflat::experiment::{
    compare_runs, find_run_config, plane_export, prepare, read_checkpoint, run_dir, run_experiment, spectrum_export,
    surface_export, ExperimentConfig, ExperimentReport, Line, Split, OUTPUT_ROOT_ENV,
};
use fedflat::{Error, Result};

#[derive(Parser)]
#[command(name = "fedflat", version, about = "Federated learning simulator")]
#[command(after_help = format!("Run directories are created under ${OUTPUT_ROOT_ENV} (default: the current directory)."))]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a TOML config.
    Run {
        config: PathBuf,
        /// Continue from the newest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Analyse checkpoints and write a JSON export.
    Analyze {
        #[command(subcommand)]
        what: Analyze,
    },
    /// Compare final accuracies of run reports against the first one.
    Compare {
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
        /// Print the comparison as JSON.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct Common {
    /// Run config; defaults to the config.toml of the checkpoint's run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model taken from each checkpoint.
    #[arg(long, value_enum, default_value_t = LineArg::Headline)]
    line: LineArg,
    /// Output file; defaults to <run>/analysis/<kind>.json.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Analyze {
    /// Top-k Hessian eigenvalues.
    Spectrum {
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 20)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = DEFAULT_MEGABATCH)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Loss or error plane through three checkpoints.
    Plane {
        #[arg(num_args = 3, required = true)]
        checkpoints: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
        resolution: usize,
        #[arg(long, value_enum, default_value_t = MetricArg::Loss)]
        metric: MetricArg,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
    },
    /// Loss or error surface along two random directions.
    Surface {
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = MetricArg::Loss)]
        metric: MetricArg,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LineArg {
    Headline,
    Sgd,
    Swa,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Loss,
    Error,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<LineArg> for Line {
    fn from(l: LineArg) -> Self {
        match l {
            LineArg::Headline => Line::Headline,
            LineArg::Sgd => Line::Sgd,
            LineArg::Swa => Line::Swa,
        }
    }
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Loss => Metric::Loss,
            MetricArg::Error => Metric::Error,
        }
    }
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

fn load_run_config(common: &Common, checkpoint: &Path) -> Result<(ExperimentConfig, PathBuf)> {
    let path = match &common.config {
        Some(p) => p.clone(),
        None => find_run_config(checkpoint).ok_or_else(|| {
            Error::Config(format!(
                "no config.toml found next to {}; pass --config",
                checkpoint.display()
            ))
        })?,
    };
    let cfg = ExperimentConfig::from_path(&path)?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, dir))
}

fn write_export(export: &Export, common: &Common, run: &Path, kind: &str) -> Result<()> {
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| run.join("analysis").join(format!("{kind}.json")));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    export.write(&out)?;
    println!("{}", out.display());
    Ok(())
}

fn read_report(path: &Path) -> Result<ExperimentReport> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read report {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, resume } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let dir = run_dir(&cfg);
            let report = run_experiment(&cfg, &dir, resume)?;
            println!("run directory: {}", dir.display());
            match report.final_accuracy {
                Some(a) => println!("final accuracy (mean of last {} rounds): {a:.2}%", report.window),
                None => println!("final accuracy: not evaluated"),
            }
            Ok(())
        }
        Command::Analyze { what } => match what {
            Analyze::Spectrum {
                checkpoint,
                common,
                k,
                max_iters,
                tol,
                batch,
                seed,
            } => {
                let (cfg, run) = load_run_config(&common, &checkpoint)?;
                let prep = prepare(&cfg)?;
                let state = read_checkpoint(&checkpoint)?;
                let power = PowerIterConfig { max_iters, tol, seed };
                let e = spectrum_export(&prep, &state, common.line.into(), k, batch, &power)?;
                write_export(&e, &common, &run, "spectrum")
            }
            Analyze::Plane {
                checkpoints,
                common,
                resolution,
                metric,
                split,
            } => {
                let (cfg, run) = load_run_config(&common, &checkpoints[0])?;
                let prep = prepare(&cfg)?;
                let states = checkpoints
                    .iter()
                    .map(|p| read_checkpoint(p))
                    .collect::<Result<Vec<_>>>()?;
                let e = plane_export(
                    &prep,
                    [&states[0], &states[1], &states[2]],
                    common.line.into(),
                    resolution,
                    metric.into(),
                    split.into(),
                )?;
                write_export(&e, &common, &run, "plane")
            }
            Analyze::Surface {
                checkpoint,
                common,
                resolution,
                seed,
                metric,
                split,
            } => {
                let (cfg, run) = load_run_config(&common, &checkpoint)?;
                let prep = prepare(&cfg)?;
                let state = read_checkpoint(&checkpoint)?;
                let e = surface_export(
                    &prep,
                    &state,
                    common.line.into(),
                    resolution,
                    seed,
                    metric.into(),
                    split.into(),
                )?;
                write_export(&e, &common, &run, "surface")
            }
        },
        Command::Compare { reports, json } => {
            let reports = reports.iter().map(|p| read_report(p)).collect::<Result<Vec<_>>>()?;
            let table = compare_runs(&reports)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&table)?);
            } else {
                print!("{table}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
