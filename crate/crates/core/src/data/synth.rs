use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Within-class standard deviation used by [`synth_classification`].
pub const DEFAULT_SPREAD: f64 = 1.0;

/// Gaussian class clusters: class means are standard normal vectors, samples
/// add isotropic noise of standard deviation `spread`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub input_dim: usize,
    pub spread: f64,
    pub seed: u64,
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.per_class == 0 || self.input_dim == 0 {
            return Err(Error::Config(format!(
                "synthetic dataset sizes must be positive: {self:?}"
            )));
        }
        if !(self.spread >= 0.0) || !self.spread.is_finite() {
            return Err(Error::Config(format!("invalid spread {}", self.spread)));
        }
        Ok(())
    }
}

fn draw(spec: &SynthSpec, means: &[Vec<f64>], per_class: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let n = spec.num_classes * per_class;
    let mut xs = Vec::with_capacity(n * spec.input_dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.num_classes;
        labels.push(class);
        for &m in &means[class] {
            let z: f64 = StandardNormal.sample(rng);
            xs.push(m + spec.spread * z);
        }
    }
    Dataset::new(Tensor::new(vec![n, spec.input_dim], xs)?, labels, spec.num_classes)
}

fn means(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..spec.num_classes)
        .map(|_| (0..spec.input_dim).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

/// Train and held-out sets sharing the same class means.
pub fn synth_train_test(spec: &SynthSpec, test_per_class: usize) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    if test_per_class == 0 {
        return Err(Error::Config("test_per_class must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mu = means(spec, &mut rng);
    let train = draw(spec, &mu, spec.per_class, &mut rng)?;
    let test = draw(spec, &mu, test_per_class, &mut rng)?;
    Ok((train, test))
}

/// Samples are ordered with labels cycling `0, 1, …, C−1, 0, …`.
pub fn synth_classification(num_classes: usize, per_class: usize, input_dim: usize, seed: u64) -> Result<Dataset> {
    let spec = SynthSpec {
        num_classes,
        per_class,
        input_dim,
        spread: DEFAULT_SPREAD,
        seed,
    };
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu = means(&spec, &mut rng);
    draw(&spec, &mu, per_class, &mut rng)
}
