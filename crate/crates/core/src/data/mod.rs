//! Datasets, federated partitions and augmentation.

mod augment;
mod cifar;
mod partition;
mod synth;

pub use augment::{
    channel_stats, cutout, cutout_at, mixup_batch, mixup_with, standard_augment, standard_augment_with, Normalization,
};
pub use cifar::{load_cifar_binary, write_cifar_binary, CifarVariant};
pub use partition::{dirichlet_partition, PartitionSpec};
pub use synth::{synth_classification, synth_train_test, SynthSpec, DEFAULT_SPREAD};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Labelled samples stacked along the leading dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.shape().len() < 2 {
            return Err(Error::Shape(format!(
                "dataset inputs need a leading sample dimension, got {:?}",
                inputs.shape()
            )));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} inputs but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Config(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Shape of one sample, e.g. `[3, 32, 32]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    pub fn class_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &i in indices {
            h[self.labels[i]] += 1;
        }
        h
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let inputs = self.inputs.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Batch::new(inputs, Targets::Labels(labels))
    }

    /// The whole dataset as one batch.
    pub fn full_batch(&self) -> Result<Batch> {
        Batch::new(self.inputs.clone(), Targets::Labels(self.labels.clone()))
    }

    /// Applies `f` to every sample in place (e.g. normalisation).
    pub fn map_samples(&mut self, mut f: impl FnMut(&mut [f64])) {
        let k = self.inputs.row_len();
        for row in self.inputs.data_mut().chunks_mut(k) {
            f(row);
        }
    }
}

/// Hard class ids or per-class probability rows.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Labels(Vec<usize>),
    Soft { probs: Vec<f64>, num_classes: usize },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Labels(l) => l.len(),
            Targets::Soft { probs, num_classes } => probs.len() / num_classes,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major `[n, num_classes]` target distribution.
    pub fn to_soft(&self, num_classes: usize) -> Result<Vec<f64>> {
        match self {
            Targets::Labels(labels) => {
                let mut out = vec![0.0; labels.len() * num_classes];
                for (i, &l) in labels.iter().enumerate() {
                    if l >= num_classes {
                        return Err(Error::Shape(format!("label {l} outside [0, {num_classes})")));
                    }
                    out[i * num_classes + l] = 1.0;
                }
                Ok(out)
            }
            Targets::Soft { probs, num_classes: k } => {
                if *k != num_classes {
                    return Err(Error::Shape(format!(
                        "soft targets over {k} classes, model has {num_classes}"
                    )));
                }
                Ok(probs.clone())
            }
        }
    }
}

/// A minibatch: inputs `[n, ...]` plus targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Tensor,
    targets: Targets,
}

impl Batch {
    pub fn new(inputs: Tensor, targets: Targets) -> Result<Self> {
        if inputs.rows() != targets.len() {
            return Err(Error::Shape(format!(
                "{} inputs but {} targets",
                inputs.rows(),
                targets.len()
            )));
        }
        Ok(Self { inputs, targets })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One client's slice of a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientShard {
    pub client_id: usize,
    pub indices: Vec<usize>,
    pub class_hist: Vec<usize>,
}

impl ClientShard {
    pub fn new(client_id: usize, indices: Vec<usize>, ds: &Dataset) -> Self {
        let class_hist = ds.class_histogram(&indices);
        Self {
            client_id,
            indices,
            class_hist,
        }
    }

    /// Number of samples `N_k`.
    pub fn n_k(&self) -> usize {
        self.indices.len()
    }

    pub fn classes_present(&self) -> usize {
        self.class_hist.iter().filter(|&&c| c > 0).count()
    }
}
