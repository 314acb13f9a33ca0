use std::fs::{self, File, OpenOptions};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use super::checkpoint::{read_checkpoint, write_checkpoint};
use super::config::{DatasetKind, ExperimentConfig, ModelKind};
use super::report::{read_metrics, summarize, write_metrics, ExperimentReport};
use crate::analysis::{feature_norm_probe, megabatch, model_top_k_eigs, per_client_lambda_max, PowerIterConfig};
use crate::autodiff::{ParamVector, Tensor};
use crate::data::{
    channel_stats, dirichlet_partition, load_cifar_binary, synth_train_test, CifarVariant, ClientShard, Dataset,
    PartitionSpec, SynthSpec,
};
use crate::error::{Error, Result};
use crate::federation::{run_round, FedConfig, FedEnv, RoundMetrics, ServerState};
use crate::models::{init_params, lenet_cifar, Layer, ModelSpec};

/// Environment variable naming the directory run directories live under.
pub const OUTPUT_ROOT_ENV: &str = "FEDFLAT_OUTPUT_ROOT";

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.json";
pub const CLIENT_LAMBDA_FILE: &str = "client_lambda.csv";
pub const FEATURE_NORM_FILE: &str = "feature_norms.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// `<output root>/<output_dir>`, defaulting to `runs/<name>`.
pub fn run_dir(cfg: &ExperimentConfig) -> PathBuf {
    let rel = cfg
        .output_dir
        .clone()
        .unwrap_or_else(|| Path::new("runs").join(cfg.name.as_deref().unwrap_or("experiment")));
    output_root().join(rel)
}

pub fn checkpoint_path(run_dir: &Path, round: usize) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(format!("round_{round:06}.ckpt"))
}

/// Newest checkpoint in the run directory.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>> {
    let dir = run_dir.join(CHECKPOINT_DIR);
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let round = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("round_"))
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(r) = round {
            if best.as_ref().is_none_or(|(b, _)| r > *b) {
                best = Some((r, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Everything a run reads: model, datasets, shards and round settings.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub model: ModelSpec,
    pub train: Dataset,
    pub test: Dataset,
    pub shards: Vec<ClientShard>,
    pub fed: FedConfig,
}

impl Prepared {
    pub fn env(&self, with_test: bool) -> FedEnv<'_> {
        FedEnv {
            model: &self.model,
            train: &self.train,
            shards: &self.shards,
            test: with_test.then_some(&self.test),
        }
    }
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    let first = parts.first().ok_or_else(|| Error::Config("no training files".into()))?;
    let shape = first.sample_shape().to_vec();
    let k = first.num_classes();
    let n: usize = parts.iter().map(Dataset::len).sum();
    let mut data = Vec::with_capacity(n * first.inputs().row_len());
    let mut labels = Vec::with_capacity(n);
    for p in &parts {
        data.extend_from_slice(p.inputs().data());
        labels.extend_from_slice(p.labels());
    }
    let mut full = vec![n];
    full.extend(shape);
    Dataset::new(Tensor::new(full, data)?, labels, k)
}

fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.dataset;
    let variant = match d.kind {
        DatasetKind::Synthetic => {
            let spec = SynthSpec {
                num_classes: d.num_classes,
                per_class: d.per_class,
                input_dim: d.input_dim,
                spread: d.spread,
                seed: cfg.dataset_seed(),
            };
            return synth_train_test(&spec, d.test_per_class);
        }
        DatasetKind::Cifar10 => CifarVariant::Cifar10,
        DatasetKind::Cifar100 => CifarVariant::Cifar100,
    };
    let load = |p: &Path| {
        let path = cfg.resolve(p);
        load_cifar_binary(&path, variant).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("cannot read {}: {io}", path.display())),
            e => e,
        })
    };
    let train = concat(d.train.iter().map(|p| load(p)).collect::<Result<_>>()?)?;
    let test_path = d
        .test
        .as_ref()
        .ok_or_else(|| Error::Config("CIFAR datasets need a `dataset.test` file".into()))?;
    let mut test = load(test_path)?;
    let mut train = train;
    if d.normalize {
        let norm = channel_stats(&train)?;
        train.map_samples(|s| norm.apply(s));
        test.map_samples(|s| norm.apply(s));
    }
    Ok((train, test))
}

fn build_model(cfg: &ExperimentConfig, train: &Dataset) -> Result<ModelSpec> {
    let shape = train.sample_shape().to_vec();
    let k = train.num_classes();
    match cfg.model.kind {
        ModelKind::Lenet => {
            if shape != [3, 32, 32] {
                return Err(Error::Config(format!(
                    "lenet needs [3, 32, 32] inputs, dataset has {shape:?}"
                )));
            }
            Ok(lenet_cifar(k))
        }
        ModelKind::Mlp => {
            let mut layers = Vec::new();
            if shape.len() > 1 {
                layers.push(Layer::Flatten);
            }
            for &h in &cfg.model.hidden {
                layers.push(Layer::Dense { out: h });
                layers.push(Layer::Relu);
            }
            layers.push(Layer::Dense { out: k });
            ModelSpec::new(layers, shape, k)
        }
    }
}

/// Loads data, builds the model and partitions the training set.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let (train, test) = load_datasets(cfg)?;
    let model = build_model(cfg, &train)?;
    let shards = dirichlet_partition(
        &train,
        &PartitionSpec {
            num_clients: cfg.partition.num_clients,
            alpha: cfg.partition.alpha,
            seed: cfg.partition_seed(),
        },
    )?;
    let fed = cfg.fed_config();
    fed.validate()?;
    Ok(Prepared {
        model,
        train,
        test,
        shards,
        fed,
    })
}

fn due(every: usize, round: usize, total: usize) -> bool {
    every > 0 && ((round + 1).is_multiple_of(every) || round + 1 == total)
}

/// The model reported for `state`: the SWA average once it exists.
pub fn headline_theta(state: &ServerState) -> &ParamVector {
    if state.n_models > 0 {
        &state.swa_theta
    } else {
        &state.theta
    }
}

fn append_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let fresh = !path.exists();
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let io = |e: csv::Error| Error::Usage(format!("csv: {e}"));
    if fresh {
        w.write_record(header).map_err(io)?;
    }
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Keeps the header and the rows whose 1-based round is at most `round`.
fn truncate_rounds(path: &Path, round: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split(',')
                .next()
                .and_then(|r| r.parse::<usize>().ok())
                .is_some_and(|r| r <= round);
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Config as stored in the run directory, with dataset paths made absolute.
pub fn config_snapshot(cfg: &ExperimentConfig) -> Result<String> {
    let mut c = cfg.clone();
    let abs = |p: &Path| {
        let r = cfg.resolve(p);
        fs::canonicalize(&r).unwrap_or(r)
    };
    c.dataset.train = c.dataset.train.iter().map(|p| abs(p)).collect();
    c.dataset.test = c.dataset.test.as_deref().map(abs);
    toml::to_string(&c).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
}

/// Runs (or resumes) an experiment in `run_dir`, writing the config
/// snapshot, `metrics.csv`, checkpoints, probe CSVs and `report.json`.
pub fn run_experiment(cfg: &ExperimentConfig, run_dir: &Path, resume: bool) -> Result<ExperimentReport> {
    let prep = prepare(cfg)?;
    let total = cfg.rounds();
    let snapshot = config_snapshot(cfg)?;
    fs::create_dir_all(run_dir)?;
    let metrics_path = run_dir.join(METRICS_FILE);
    let client_path = run_dir.join(CLIENT_LAMBDA_FILE);
    let norm_path = run_dir.join(FEATURE_NORM_FILE);

    let latest = if resume { latest_checkpoint(run_dir)? } else { None };
    let (mut server, mut rows) = match latest {
        Some(ckpt) => {
            let stored = fs::read_to_string(run_dir.join(CONFIG_FILE)).unwrap_or_default();
            if stored != snapshot {
                return Err(Error::Config(format!(
                    "config differs from the snapshot in {}; refusing to resume",
                    run_dir.display()
                )));
            }
            let state = read_checkpoint(&ckpt)?;
            if state.theta.layout() != prep.model.layout() {
                return Err(Error::Config(format!("{} does not match the model", ckpt.display())));
            }
            let rows: Vec<RoundMetrics> = read_metrics(BufReader::new(File::open(&metrics_path)?))?
                .into_iter()
                .filter(|r| r.round < state.round)
                .collect();
            if rows.len() != state.round {
                return Err(Error::Format {
                    offset: 0,
                    msg: format!(
                        "{} holds {} rows before round {}",
                        metrics_path.display(),
                        rows.len(),
                        state.round
                    ),
                });
            }
            write_metrics(File::create(&metrics_path)?, &rows, true)?;
            truncate_rounds(&client_path, state.round)?;
            truncate_rounds(&norm_path, state.round)?;
            (state, rows)
        }
        None => {
            fs::write(run_dir.join(CONFIG_FILE), &snapshot)?;
            write_metrics(File::create(&metrics_path)?, &[], true)?;
            for p in [&client_path, &norm_path] {
                if p.exists() {
                    fs::remove_file(p)?;
                }
            }
            let ckpts = run_dir.join(CHECKPOINT_DIR);
            if ckpts.exists() {
                fs::remove_dir_all(&ckpts)?;
            }
            (ServerState::new(init_params(&prep.model, cfg.seed)), Vec::new())
        }
    };

    let probes = &cfg.probes;
    let power = PowerIterConfig {
        max_iters: probes.power_iters,
        tol: probes.power_tol,
        seed: cfg.seed,
    };
    let all: Vec<usize> = (0..prep.train.len()).collect();
    let global_batch = if probes.lambda_max_every > 0 {
        Some(megabatch(&prep.train, &all, probes.megabatch, cfg.seed)?)
    } else {
        None
    };

    while server.round < total {
        let round = server.round;
        let env = prep.env(due(probes.eval_every, round, total));
        let mut outcome = run_round(&mut server, &env, &prep.fed)?;
        let probe = |e: Error| e.in_round(round);
        if let (Some(batch), true) = (&global_batch, due(probes.lambda_max_every, round, total)) {
            let r = model_top_k_eigs(headline_theta(&server), &prep.model, batch, 1, &power).map_err(probe)?;
            outcome.metrics.lambda_max = Some(r.lambda_max());
        }
        if due(probes.client_lambda_every, round, total) {
            let l = per_client_lambda_max(
                &outcome.updates,
                &prep.model,
                &prep.train,
                &prep.shards,
                probes.megabatch,
                &power,
            )
            .map_err(probe)?;
            let recs: Vec<Vec<String>> = l
                .iter()
                .map(|(c, v)| vec![(round + 1).to_string(), c.to_string(), v.to_string()])
                .collect();
            append_rows(&client_path, &["round", "client_id", "lambda_max"], &recs)?;
        }
        if due(probes.feature_norm_every, round, total) {
            let n =
                feature_norm_probe(headline_theta(&server), &prep.model, &prep.train, &prep.shards).map_err(probe)?;
            let recs: Vec<Vec<String>> = n
                .iter()
                .map(|(c, v)| vec![(round + 1).to_string(), c.to_string(), v.to_string()])
                .collect();
            append_rows(&norm_path, &["round", "client_id", "feature_norm"], &recs)?;
        }
        let file = OpenOptions::new().append(true).open(&metrics_path)?;
        write_metrics(file, std::slice::from_ref(&outcome.metrics), false)?;
        rows.push(outcome.metrics);
        if due(probes.checkpoint_every, round, total) || server.round == total {
            write_checkpoint(&checkpoint_path(run_dir, server.round), &server)?;
        }
    }

    let name = cfg.name.clone().unwrap_or_else(|| {
        run_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "experiment".into())
    });
    let report = summarize(&name, cfg.seed, &rows, server.n_models);
    fs::write(run_dir.join(REPORT_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}
