use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{ClientShard, Dataset};
use crate::error::{Error, Result};

/// Label-skew partition: `num_clients` shards whose class proportions are
/// drawn from a symmetric Dirichlet with concentration `alpha`.
///
/// `alpha == 0` means one class per client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub alpha: f64,
    pub seed: u64,
}

pub fn dirichlet_partition(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientShard>> {
    let k = spec.num_clients;
    if k == 0 {
        return Err(Error::Config("num_clients must be at least 1".into()));
    }
    if !(spec.alpha >= 0.0) || !spec.alpha.is_finite() {
        return Err(Error::Config(format!(
            "alpha must be finite and non-negative, got {}",
            spec.alpha
        )));
    }
    if k > ds.len() {
        return Err(Error::Config(format!("{k} clients but only {} samples", ds.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for (i, &l) in ds.labels().iter().enumerate() {
        pools[l].push(i);
    }
    for p in &mut pools {
        p.shuffle(&mut rng);
    }
    let assignments = if spec.alpha == 0.0 {
        single_class(pools, k)?
    } else {
        lda(pools, k, ds.len(), spec.alpha, &mut rng)?
    };
    Ok(assignments
        .into_iter()
        .enumerate()
        .map(|(id, idx)| ClientShard::new(id, idx, ds))
        .collect())
}

/// Client `k` holds class `k mod C`; each class is split evenly among its clients.
fn single_class(pools: Vec<Vec<usize>>, k: usize) -> Result<Vec<Vec<usize>>> {
    let c = pools.len();
    if k < c {
        return Err(Error::Config(format!(
            "alpha = 0 needs at least one client per class ({k} clients, {c} classes)"
        )));
    }
    let mut out = vec![Vec::new(); k];
    for (class, pool) in pools.into_iter().enumerate() {
        let owners: Vec<usize> = (class..k).step_by(c).collect();
        let m = owners.len();
        if pool.len() < m {
            return Err(Error::Config(format!(
                "class {class} has {} samples for {m} single-class clients",
                pool.len()
            )));
        }
        let (base, extra) = (pool.len() / m, pool.len() % m);
        let mut start = 0;
        for (j, &owner) in owners.iter().enumerate() {
            let size = base + usize::from(j < extra);
            out[owner] = pool[start..start + size].to_vec();
            start += size;
        }
    }
    Ok(out)
}

fn lda(mut pools: Vec<Vec<usize>>, k: usize, n: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    let c = pools.len();
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Config(format!("alpha: {e}")))?;
    let per_client = n / k;
    let mut out = vec![Vec::with_capacity(per_client + 1); k];
    let mut weights = vec![0.0; c];
    for shard in out.iter_mut() {
        let mut q: Vec<f64> = (0..c).map(|_| gamma.sample(rng)).collect();
        let total: f64 = q.iter().sum();
        if total > 0.0 && total.is_finite() {
            q.iter_mut().for_each(|v| *v /= total);
        } else {
            // every gamma draw underflowed: the limit of Dir(α→0) is a vertex
            q.iter_mut().for_each(|v| *v = 0.0);
            q[rng.random_range(0..c)] = 1.0;
        }
        for _ in 0..per_client {
            for (w, (qc, pool)) in weights.iter_mut().zip(q.iter().zip(&pools)) {
                *w = if pool.is_empty() { 0.0 } else { *qc };
            }
            let mut mass: f64 = weights.iter().sum();
            if mass <= 0.0 {
                for (w, pool) in weights.iter_mut().zip(&pools) {
                    *w = if pool.is_empty() { 0.0 } else { 1.0 };
                }
                mass = weights.iter().sum();
            }
            let class = categorical(&weights, mass, rng);
            shard.push(pools[class].pop().expect("class with positive weight is non-empty"));
        }
    }
    let leftovers = pools.into_iter().flatten();
    for (i, idx) in leftovers.enumerate() {
        out[i % k].push(idx);
    }
    Ok(out)
}

fn categorical(weights: &[f64], mass: f64, rng: &mut ChaCha8Rng) -> usize {
    let u = rng.random::<f64>() * mass;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}
