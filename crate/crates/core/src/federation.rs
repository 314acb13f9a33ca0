//! The round loop: client sampling, local training, FedAvg/FedAvgM
//! aggregation and server-side stochastic weight averaging.
//!
//! Every random draw is taken from a ChaCha stream keyed by
//! `(seed, round, client, purpose)`, so a round's outcome does not depend on
//! how many clients ran before it or on which thread they ran.

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ModelObjective, ParamVector, Tensor};
use crate::data::{cutout, mixup_batch, standard_augment, Batch, ClientShard, Dataset, Targets};
use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::optim::{cyclic_lr, sam_step, sgd_objective_step, CyclicLr, SamConfig, SgdConfig, SgdState};

/// `purpose` key of the per-round client-sampling stream.
pub const STREAM_SAMPLING: u64 = 1;
/// `purpose` key of a client's local-training stream (shuffles, augmentation).
pub const STREAM_CLIENT: u64 = 2;

/// RNG stream for one `(seed, round, client, purpose)` key.
pub fn keyed_rng(seed: u64, round: usize, client: usize, purpose: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(round as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(client as u64).to_le_bytes());
    key[24..].copy_from_slice(&purpose.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// `m` distinct client ids drawn uniformly without replacement, ascending.
pub fn sample_clients(k: usize, m: usize, round: usize, seed: u64) -> Result<Vec<usize>> {
    if m > k {
        return Err(Error::Config(format!("cannot sample {m} clients out of {k}")));
    }
    if m == 0 {
        return Err(Error::Config("clients_per_round must be positive".into()));
    }
    let mut rng = keyed_rng(seed, round, 0, STREAM_SAMPLING);
    let mut ids = index::sample(&mut rng, k, m).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Augmentation {
    None,
    /// Pad-4 random crop plus horizontal flip.
    Standard,
    Mixup {
        alpha: f64,
    },
    Cutout {
        size: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientConfig {
    /// Base learning rate, momentum and weight decay.
    pub sgd: SgdConfig,
    /// `Some` selects SAM (or ASAM when adaptive).
    pub sam: Option<SamConfig>,
    pub batch_size: usize,
    pub epochs: usize,
    pub augment: Augmentation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwaConfig {
    /// First round (0-based) of the averaging phase.
    pub start_round: usize,
    pub schedule: CyclicLr,
    /// Use the cyclic rate before `start_round` too.
    pub cyclic_before_start: bool,
}

impl SwaConfig {
    /// Index of `round` within the averaging phase, 1-based.
    fn step(&self, round: usize) -> Option<usize> {
        (round >= self.start_round).then(|| round - self.start_round + 1)
    }

    /// Last round of a cycle: `(round − start) mod c = c − 1`.
    pub fn is_cycle_end(&self, round: usize) -> bool {
        self.step(round).is_some_and(|i| i % self.schedule.cycle == 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FedConfig {
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub client: ClientConfig,
    /// Server momentum β; 0 is plain FedAvg.
    pub server_momentum: f64,
    pub server_lr: f64,
    pub swa: Option<SwaConfig>,
    pub seed: u64,
    /// Train the round's clients on the rayon pool.
    pub parallel: bool,
}

impl FedConfig {
    /// Client learning rate broadcast in `round`.
    pub fn round_lr(&self, round: usize) -> f64 {
        match &self.swa {
            Some(swa) => match swa.step(round) {
                Some(i) => cyclic_lr(i, &swa.schedule),
                None if swa.cyclic_before_start => cyclic_lr(round + 1, &swa.schedule),
                None => self.client.sgd.lr,
            },
            None => self.client.sgd.lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.client;
        if c.batch_size == 0 || c.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.server_momentum) {
            return Err(Error::Config(format!(
                "server momentum must lie in [0, 1), got {}",
                self.server_momentum
            )));
        }
        if !(0.0..1.0).contains(&c.sgd.momentum) {
            return Err(Error::Config(format!(
                "client momentum must lie in [0, 1), got {}",
                c.sgd.momentum
            )));
        }
        if let Some(s) = &c.sam {
            if !(s.rho >= 0.0 && s.eta >= 0.0) {
                return Err(Error::Config("rho and eta must be non-negative".into()));
            }
        }
        if let Some(swa) = &self.swa {
            if swa.schedule.cycle == 0 {
                return Err(Error::Config("SWA cycle must be at least 1".into()));
            }
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.num_clients {
            return Err(Error::Config(format!(
                "clients_per_round {} must lie in [1, {}]",
                self.clients_per_round, self.num_clients
            )));
        }
        Ok(())
    }
}

/// Everything the clients read during a run.
#[derive(Debug, Clone, Copy)]
pub struct FedEnv<'a> {
    pub model: &'a ModelSpec,
    pub train: &'a Dataset,
    pub shards: &'a [ClientShard],
    pub test: Option<&'a Dataset>,
}

/// Global model, SWA running average and server momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub theta: ParamVector,
    pub momentum: ParamVector,
    pub swa_theta: ParamVector,
    pub n_models: usize,
    /// Number of completed rounds.
    pub round: usize,
}

impl ServerState {
    pub fn new(theta: ParamVector) -> Self {
        Self {
            momentum: theta.zeros_like(),
            swa_theta: theta.zeros_like(),
            n_models: 0,
            round: 0,
            theta,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundPlan {
    pub round: usize,
    pub clients: Vec<usize>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub theta: ParamVector,
    pub n_k: usize,
    pub train_loss: f64,
}

fn augmented_batch<R: rand::Rng>(ds: &Dataset, idx: &[usize], augment: Augmentation, rng: &mut R) -> Result<Batch> {
    let batch = ds.batch(idx)?;
    match augment {
        Augmentation::None => Ok(batch),
        Augmentation::Mixup { alpha } if batch.len() >= 2 => mixup_batch(&batch, alpha, ds.num_classes(), rng),
        Augmentation::Mixup { .. } => Ok(batch),
        Augmentation::Standard | Augmentation::Cutout { .. } => {
            let shape = ds.sample_shape().to_vec();
            let mut data = Vec::with_capacity(batch.inputs().len());
            for i in 0..batch.len() {
                let img = Tensor::new(shape.clone(), batch.inputs().row(i).to_vec())?;
                let out = match augment {
                    Augmentation::Standard => standard_augment(&img, None, rng)?,
                    Augmentation::Cutout { size } => cutout(&img, size, rng)?,
                    _ => unreachable!(),
                };
                data.extend_from_slice(out.data());
            }
            let mut full = vec![batch.len()];
            full.extend(shape);
            let labels = match batch.targets() {
                Targets::Labels(l) => l.clone(),
                Targets::Soft { .. } => unreachable!("dataset batches carry labels"),
            };
            Batch::new(Tensor::new(full, data)?, Targets::Labels(labels))
        }
    }
}

/// Runs `epochs` passes of minibatch SGD/SAM/ASAM over the shard starting
/// from a copy of `theta`. Batches are reshuffled every epoch from `rng`.
pub fn local_train<R: rand::Rng>(
    theta: &ParamVector,
    shard: &ClientShard,
    env: &FedEnv<'_>,
    cfg: &ClientConfig,
    lr: f64,
    rng: &mut R,
) -> Result<ClientUpdate> {
    if shard.n_k() == 0 {
        return Err(Error::Usage(format!("client {} has no samples", shard.client_id)));
    }
    let sgd = SgdConfig { lr, ..cfg.sgd };
    let mut params = theta.clone();
    let mut state = SgdState::new();
    let mut order = shard.indices.clone();
    let (mut loss_sum, mut steps) = (0.0, 0usize);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = augmented_batch(env.train, chunk, cfg.augment, rng)?;
            let objective = ModelObjective::new(env.model, &batch);
            let report = match &cfg.sam {
                Some(sam) => sam_step(&mut params, &objective, &mut state, sam, &sgd)?,
                None => sgd_objective_step(&mut params, &objective, &mut state, &sgd)?,
            };
            loss_sum += report.loss;
            steps += 1;
        }
    }
    Ok(ClientUpdate {
        client_id: shard.client_id,
        theta: params,
        n_k: shard.n_k(),
        train_loss: loss_sum / steps as f64,
    })
}

/// `Σ_k (N_k / N) θ_k` over the participating clients, summed in ascending
/// client-id order.
pub fn fedavg_aggregate(updates: &[ClientUpdate]) -> Result<ParamVector> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Usage("cannot aggregate zero client updates".into()))?;
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let total: usize = sorted.iter().map(|u| u.n_k).sum();
    if total == 0 {
        return Err(Error::Usage("client updates carry no samples".into()));
    }
    let mut agg = first.theta.zeros_like();
    for u in sorted {
        u.theta.check_compatible(&agg)?;
        agg.axpy(u.n_k as f64 / total as f64, &u.theta);
    }
    Ok(agg)
}

/// Server momentum on the pseudo-gradient `Δ = θ − aggregate`:
/// `v ← βv + Δ`, `θ ← θ − lr·v`. With `β = 0` and `lr = 1` the new model is
/// the aggregate itself, bit for bit.
pub fn fedavgm_update(server: &mut ServerState, aggregate: &ParamVector, beta: f64, server_lr: f64) -> Result<()> {
    server.theta.check_compatible(aggregate)?;
    let v = server.momentum.as_mut_slice();
    for ((vi, &t), &a) in v.iter_mut().zip(server.theta.as_slice()).zip(aggregate.as_slice()) {
        *vi = beta * *vi + (t - a);
    }
    if beta == 0.0 && server_lr == 1.0 {
        server.theta = aggregate.clone();
    } else {
        server.theta.axpy(-server_lr, &server.momentum);
    }
    Ok(())
}

/// `θ_SWA ← (θ_SWA · n + θ) / (n + 1)`, `n ← n + 1`.
pub fn swa_absorb(server: &mut ServerState) {
    let n = server.n_models as f64;
    for (s, &t) in server.swa_theta.as_mut_slice().iter_mut().zip(server.theta.as_slice()) {
        *s = (*s * n + t) / (n + 1.0);
    }
    server.n_models += 1;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub loss: f64,
}

const EVAL_CHUNK: usize = 256;

/// Top-1 accuracy and mean cross-entropy; ties in the logits resolve to the
/// lowest class id.
pub fn evaluate(theta: &ParamVector, model: &ModelSpec, ds: &Dataset) -> Result<EvalResult> {
    if ds.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    let starts: Vec<usize> = (0..ds.len()).step_by(EVAL_CHUNK).collect();
    let parts: Vec<Result<(usize, f64)>> = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + EVAL_CHUNK).min(ds.len())).collect();
            let batch = ds.batch(&idx)?;
            let logits = model.logits(theta, batch.inputs())?;
            let k = model.num_classes();
            let mut correct = 0;
            let mut loss = 0.0;
            for (row, &i) in logits.data().chunks(k).zip(&idx) {
                let label = ds.labels()[i];
                let (arg, m) =
                    row.iter().enumerate().fold(
                        (0, f64::NEG_INFINITY),
                        |best, (j, &v)| if v > best.1 { (j, v) } else { best },
                    );
                if arg == label {
                    correct += 1;
                }
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                loss += lse - row[label];
            }
            Ok((correct, loss))
        })
        .collect();
    let (mut correct, mut loss) = (0usize, 0.0);
    for p in parts {
        let (c, l) = p?;
        correct += c;
        loss += l;
    }
    Ok(EvalResult {
        accuracy: correct as f64 / ds.len() as f64,
        loss: loss / ds.len() as f64,
    })
}

/// Per-round record; one CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub lr: f64,
    pub mean_client_train_loss: f64,
    pub test_acc_sgd: Option<f64>,
    /// Present once the SWA model has absorbed at least one snapshot.
    pub test_acc_swa: Option<f64>,
    pub lambda_max: Option<f64>,
}

impl RoundMetrics {
    /// Accuracy of the reported model: the SWA line when it exists.
    pub fn headline_accuracy(&self) -> Option<f64> {
        self.test_acc_swa.or(self.test_acc_sgd)
    }
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub plan: RoundPlan,
    pub updates: Vec<ClientUpdate>,
    pub metrics: RoundMetrics,
}

/// One communication round: sample, train locally, aggregate, apply server
/// momentum, absorb into SWA at cycle ends and evaluate both lines.
pub fn run_round(server: &mut ServerState, env: &FedEnv<'_>, cfg: &FedConfig) -> Result<RoundOutcome> {
    let round = server.round;
    let mut inner = || -> Result<RoundOutcome> {
        if env.shards.len() != cfg.num_clients {
            return Err(Error::Config(format!(
                "{} shards for {} clients",
                env.shards.len(),
                cfg.num_clients
            )));
        }
        let clients = sample_clients(cfg.num_clients, cfg.clients_per_round, round, cfg.seed)?;
        let lr = cfg.round_lr(round);
        let train_one = |&id: &usize| {
            let mut rng = keyed_rng(cfg.seed, round, id, STREAM_CLIENT);
            local_train(&server.theta, &env.shards[id], env, &cfg.client, lr, &mut rng)
        };
        let updates: Vec<ClientUpdate> = if cfg.parallel {
            clients.par_iter().map(train_one).collect::<Result<_>>()?
        } else {
            clients.iter().map(train_one).collect::<Result<_>>()?
        };
        let aggregate = fedavg_aggregate(&updates)?;
        fedavgm_update(server, &aggregate, cfg.server_momentum, cfg.server_lr)?;
        if let Some(swa) = &cfg.swa {
            if swa.is_cycle_end(round) {
                swa_absorb(server);
            }
        }
        let mean_loss = updates.iter().map(|u| u.train_loss).sum::<f64>() / updates.len() as f64;
        let (test_acc_sgd, test_acc_swa) = match env.test {
            Some(test) => {
                let sgd = evaluate(&server.theta, env.model, test)?.accuracy;
                let swa = if server.n_models > 0 {
                    Some(evaluate(&server.swa_theta, env.model, test)?.accuracy)
                } else {
                    None
                };
                (Some(sgd), swa)
            }
            None => (None, None),
        };
        Ok(RoundOutcome {
            plan: RoundPlan { round, clients, lr },
            updates,
            metrics: RoundMetrics {
                round,
                lr,
                mean_client_train_loss: mean_loss,
                test_acc_sgd,
                test_acc_swa,
                lambda_max: None,
            },
        })
    };
    let out = inner().map_err(|e| e.in_round(round))?;
    server.round += 1;
    Ok(out)
}
