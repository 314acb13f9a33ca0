//! Experiment config files (TOML).
//!
//! ```toml
//! seed = 1
//! output_dir = "runs/demo"
//!
//! [dataset]
//! kind = "synthetic"        # synthetic | cifar10 | cifar100
//! num_classes = 10
//! per_class = 100
//! test_per_class = 100
//! input_dim = 16
//!
//! [partition]
//! num_clients = 20
//! alpha = 0.0
//!
//! [model]
//! kind = "mlp"              # mlp | lenet
//! hidden = [32]
//!
//! [client]
//! optimizer = "sgd"         # sgd | sam | asam
//! lr = 0.01
//!
//! [server]
//! rounds = 10
//! clients_per_round = 5
//! ```
//!
//! Optional sections `[swa]` and `[probes]` are described on
//! [`SwaSection`] and [`ProbeSection`]. Relative dataset paths resolve
//! against the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DEFAULT_SPREAD;
use crate::error::{Error, Result};
use crate::federation::{Augmentation, ClientConfig, FedConfig, SwaConfig};
use crate::optim::{CyclicLr, SamConfig, SgdConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
    Cifar100,
}

fn default_num_classes() -> usize {
    10
}
fn default_per_class() -> usize {
    100
}
fn default_input_dim() -> usize {
    16
}
fn default_spread() -> f64 {
    DEFAULT_SPREAD
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    #[serde(default = "default_per_class")]
    pub test_per_class: usize,
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    #[serde(default = "default_spread")]
    pub spread: f64,
    /// Generator seed; the top-level seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    /// CIFAR binary batches.
    #[serde(default)]
    pub train: Vec<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    /// Standardize CIFAR channels with training-set statistics.
    #[serde(default = "default_true")]
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    pub num_clients: usize,
    /// Dirichlet concentration; 0 gives one class per client.
    pub alpha: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mlp,
    Lenet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    /// Hidden widths of the MLP.
    #[serde(default)]
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Sam,
    Asam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentKind {
    None,
    Standard,
    Mixup,
    Cutout,
}

fn default_batch() -> usize {
    64
}
fn default_one() -> usize {
    1
}
fn default_rho() -> f64 {
    0.05
}
fn default_mixup_alpha() -> f64 {
    1.0
}
fn default_cutout() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSection {
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_one")]
    pub epochs: usize,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default)]
    pub eta: f64,
    #[serde(default = "default_augment")]
    pub augment: AugmentKind,
    #[serde(default = "default_mixup_alpha")]
    pub mixup_alpha: f64,
    #[serde(default = "default_cutout")]
    pub cutout_size: usize,
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Sgd
}
fn default_augment() -> AugmentKind {
    AugmentKind::None
}
fn default_server_lr() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerSection {
    pub rounds: i64,
    pub clients_per_round: usize,
    /// Server momentum β (FedAvgM); 0 is FedAvg.
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_server_lr")]
    pub lr: f64,
    #[serde(default = "default_true")]
    pub parallel: bool,
}

/// `[swa]`: `enabled`, `start_round` (default 75% of the rounds), `cycle`,
/// `lr_max` (γ1), `lr_min` (γ2), `cyclic_before_start`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwaSection {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default)]
    pub start_round: Option<usize>,
    pub cycle: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    #[serde(default)]
    pub cyclic_before_start: bool,
}

fn default_checkpoint_every() -> usize {
    100
}
fn default_megabatch() -> usize {
    crate::analysis::DEFAULT_MEGABATCH
}
fn default_power_iters() -> usize {
    20
}
fn default_power_tol() -> f64 {
    1e-4
}

/// `[probes]`: intervals in rounds, 0 disables. Probes run on rounds whose
/// 1-based index is a multiple of the interval, and on the final round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSection {
    #[serde(default = "default_one")]
    pub eval_every: usize,
    #[serde(default)]
    pub lambda_max_every: usize,
    #[serde(default)]
    pub client_lambda_every: usize,
    #[serde(default)]
    pub feature_norm_every: usize,
    #[serde(default = "default_megabatch")]
    pub megabatch: usize,
    #[serde(default = "default_power_iters")]
    pub power_iters: usize,
    #[serde(default = "default_power_tol")]
    pub power_tol: f64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            eval_every: 1,
            lambda_max_every: 0,
            client_lambda_every: 0,
            feature_norm_every: 0,
            megabatch: default_megabatch(),
            power_iters: default_power_iters(),
            power_tol: default_power_tol(),
            checkpoint_every: default_checkpoint_every(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub seed: u64,
    /// Run directory, relative to the output root.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetSection,
    pub partition: PartitionSection,
    pub model: ModelSection,
    pub client: ClientSection,
    pub server: ServerSection,
    #[serde(default)]
    pub swa: Option<SwaSection>,
    #[serde(default)]
    pub probes: ProbeSection,
    /// Directory of the source file; dataset paths resolve against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// 1-based line of `key` inside `[section]` (`""` for the top level).
pub fn locate_key(src: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, line) in src.lines().enumerate() {
        let t = line.trim();
        if let Some(h) = t.strip_prefix('[') {
            current = h.trim_end_matches(']').trim().to_string();
            continue;
        }
        if current == section {
            if let Some((k, _)) = t.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

/// Dotted key written on `line`, with its section.
fn key_on_line(src: &str, line: usize) -> Option<String> {
    let mut section = String::new();
    for (i, l) in src.lines().enumerate() {
        let t = l.trim();
        if let Some(h) = t.strip_prefix('[') {
            section = h.trim_end_matches(']').trim().to_string();
        }
        if i + 1 == line {
            if let Some((k, _)) = t.split_once('=') {
                let k = k.trim();
                return Some(if section.is_empty() {
                    k.to_string()
                } else {
                    format!("{section}.{k}")
                });
            }
            return (!section.is_empty()).then_some(section);
        }
    }
    None
}

fn backticked(msg: &str) -> Option<String> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(msg[start..start + len].to_string())
}

fn parse_error(src: &str, e: toml::de::Error) -> Error {
    let msg = e.message().trim().to_string();
    let line = e.span().map(|s| line_of(src, s.start));
    let key = if msg.starts_with("unknown field") || msg.starts_with("missing field") {
        backticked(&msg)
    } else {
        None
    }
    .or_else(|| line.and_then(|l| key_on_line(src, l)))
    .unwrap_or_else(|| "<config>".into());
    Error::ConfigKey { key, line, msg }
}

impl ExperimentConfig {
    pub fn from_toml(src: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(src).map_err(|e| parse_error(src, e))?;
        cfg.validate(src)?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&src)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn rounds(&self) -> usize {
        self.server.rounds as usize
    }

    fn validate(&self, src: &str) -> Result<()> {
        let bad = |section: &str, key: &str, msg: String| Error::ConfigKey {
            key: if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            },
            line: locate_key(src, section, key),
            msg,
        };
        if self.server.rounds < 1 {
            return Err(bad(
                "server",
                "rounds",
                format!("rounds must be at least 1, got {}", self.server.rounds),
            ));
        }
        let rounds = self.rounds();
        let d = &self.dataset;
        if d.kind == DatasetKind::Synthetic {
            for (k, v) in [
                ("num_classes", d.num_classes),
                ("per_class", d.per_class),
                ("test_per_class", d.test_per_class),
                ("input_dim", d.input_dim),
            ] {
                if v == 0 {
                    return Err(bad("dataset", k, "must be positive".into()));
                }
            }
            if !(d.spread >= 0.0 && d.spread.is_finite()) {
                return Err(bad("dataset", "spread", "must be a finite non-negative number".into()));
            }
        } else if d.train.is_empty() {
            return Err(bad(
                "dataset",
                "train",
                "CIFAR datasets need at least one training batch file".into(),
            ));
        }
        if self.model.kind == ModelKind::Lenet && d.kind == DatasetKind::Synthetic {
            return Err(bad("model", "kind", "lenet needs 3×32×32 CIFAR images".into()));
        }
        if self.model.hidden.contains(&0) {
            return Err(bad("model", "hidden", "widths must be positive".into()));
        }
        let p = &self.partition;
        if p.num_clients == 0 {
            return Err(bad("partition", "num_clients", "must be positive".into()));
        }
        if !(p.alpha >= 0.0 && p.alpha.is_finite()) {
            return Err(bad(
                "partition",
                "alpha",
                format!("must be finite and ≥ 0, got {}", p.alpha),
            ));
        }
        let c = &self.client;
        if !(c.lr >= 0.0 && c.lr.is_finite()) {
            return Err(bad("client", "lr", format!("must be finite and ≥ 0, got {}", c.lr)));
        }
        if !(0.0..1.0).contains(&c.momentum) {
            return Err(bad(
                "client",
                "momentum",
                format!("must lie in [0, 1), got {}", c.momentum),
            ));
        }
        if !(c.weight_decay >= 0.0) {
            return Err(bad("client", "weight_decay", "must be ≥ 0".into()));
        }
        if c.batch_size == 0 {
            return Err(bad("client", "batch_size", "must be positive".into()));
        }
        if c.epochs == 0 {
            return Err(bad("client", "epochs", "must be positive".into()));
        }
        if !(c.rho >= 0.0) {
            return Err(bad("client", "rho", "must be ≥ 0".into()));
        }
        if !(c.eta >= 0.0) {
            return Err(bad("client", "eta", "must be ≥ 0".into()));
        }
        if c.augment == AugmentKind::Mixup && !(c.mixup_alpha > 0.0) {
            return Err(bad("client", "mixup_alpha", "must be positive".into()));
        }
        if c.augment == AugmentKind::Cutout && c.cutout_size == 0 {
            return Err(bad("client", "cutout_size", "must be positive".into()));
        }
        if matches!(c.augment, AugmentKind::Standard | AugmentKind::Cutout) && d.kind == DatasetKind::Synthetic {
            return Err(bad("client", "augment", "image augmentations need CIFAR images".into()));
        }
        let s = &self.server;
        if s.clients_per_round == 0 || s.clients_per_round > p.num_clients {
            return Err(bad(
                "server",
                "clients_per_round",
                format!("must lie in [1, {}], got {}", p.num_clients, s.clients_per_round),
            ));
        }
        if !(0.0..1.0).contains(&s.momentum) {
            return Err(bad(
                "server",
                "momentum",
                format!("must lie in [0, 1), got {}", s.momentum),
            ));
        }
        if !(s.lr > 0.0 && s.lr.is_finite()) {
            return Err(bad("server", "lr", "must be positive".into()));
        }
        if let Some(w) = &self.swa {
            if w.cycle == 0 {
                return Err(bad("swa", "cycle", "must be at least 1".into()));
            }
            if !(w.lr_max > 0.0) {
                return Err(bad("swa", "lr_max", "must be positive".into()));
            }
            if !(w.lr_min > 0.0) {
                return Err(bad("swa", "lr_min", "must be positive".into()));
            }
            if let Some(start) = w.start_round {
                if start >= rounds {
                    return Err(bad("swa", "start_round", format!("must be below rounds ({rounds})")));
                }
            }
        }
        let pr = &self.probes;
        if pr.eval_every == 0 {
            return Err(bad("probes", "eval_every", "must be positive".into()));
        }
        if pr.megabatch == 0 {
            return Err(bad("probes", "megabatch", "must be positive".into()));
        }
        if pr.power_iters == 0 {
            return Err(bad("probes", "power_iters", "must be positive".into()));
        }
        if !(pr.power_tol >= 0.0) {
            return Err(bad("probes", "power_tol", "must be ≥ 0".into()));
        }
        Ok(())
    }

    pub fn partition_seed(&self) -> u64 {
        self.partition.seed.unwrap_or(self.seed)
    }

    pub fn dataset_seed(&self) -> u64 {
        self.dataset.seed.unwrap_or(self.seed)
    }

    /// The SWA schedule, with the default start at 75% of the rounds.
    pub fn swa_config(&self) -> Option<SwaConfig> {
        let w = self.swa.as_ref().filter(|w| w.enabled)?;
        Some(SwaConfig {
            start_round: w.start_round.unwrap_or(self.rounds() * 3 / 4),
            schedule: CyclicLr {
                gamma1: w.lr_max,
                gamma2: w.lr_min,
                cycle: w.cycle,
            },
            cyclic_before_start: w.cyclic_before_start,
        })
    }

    pub fn client_config(&self) -> ClientConfig {
        let c = &self.client;
        let sam = match c.optimizer {
            OptimizerKind::Sgd => None,
            OptimizerKind::Sam => Some(SamConfig {
                rho: c.rho,
                adaptive: false,
                eta: 0.0,
            }),
            OptimizerKind::Asam => Some(SamConfig {
                rho: c.rho,
                adaptive: true,
                eta: c.eta,
            }),
        };
        ClientConfig {
            sgd: SgdConfig {
                lr: c.lr,
                momentum: c.momentum,
                weight_decay: c.weight_decay,
            },
            sam,
            batch_size: c.batch_size,
            epochs: c.epochs,
            augment: match c.augment {
                AugmentKind::None => Augmentation::None,
                AugmentKind::Standard => Augmentation::Standard,
                AugmentKind::Mixup => Augmentation::Mixup { alpha: c.mixup_alpha },
                AugmentKind::Cutout => Augmentation::Cutout { size: c.cutout_size },
            },
        }
    }

    pub fn fed_config(&self) -> FedConfig {
        FedConfig {
            num_clients: self.partition.num_clients,
            clients_per_round: self.server.clients_per_round,
            client: self.client_config(),
            server_momentum: self.server.momentum,
            server_lr: self.server.lr,
            swa: self.swa_config(),
            seed: self.seed,
            parallel: self.server.parallel,
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

/// Shipped configs with the CIFAR hyper-parameter defaults.
pub const PRESETS: [(&str, &str); 2] = [
    ("cifar100", include_str!("../../presets/cifar100.toml")),
    ("cifar10", include_str!("../../presets/cifar10.toml")),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}
