//! CIFAR binary record format.
//!
//! CIFAR-10: `<1 label byte><3072 pixel bytes>` per record.
//! CIFAR-100: `<1 coarse byte><1 fine byte><3072 pixel bytes>`; the fine
//! label is used. Pixels are channel-major (1024 red, 1024 green, 1024 blue),
//! each plane row-major.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const PIXELS: usize = 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + PIXELS
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

/// Reads a CIFAR binary file into `[n, 3, 32, 32]` images scaled to `[0, 1]`.
pub fn load_cifar_binary(path: &Path, variant: CifarVariant) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    parse(&bytes, variant)
}

fn parse(bytes: &[u8], variant: CifarVariant) -> Result<Dataset> {
    let rec = variant.record_len();
    if bytes.is_empty() {
        return Err(Error::Format {
            offset: 0,
            msg: "empty file".into(),
        });
    }
    if !bytes.len().is_multiple_of(rec) {
        let whole = bytes.len() / rec;
        return Err(Error::Format {
            offset: (whole * rec) as u64,
            msg: format!(
                "truncated record: {} trailing bytes, records are {rec} bytes",
                bytes.len() - whole * rec
            ),
        });
    }
    let n = bytes.len() / rec;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * PIXELS);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let label = r[variant.label_bytes() - 1] as usize;
        if label >= variant.num_classes() {
            return Err(Error::Format {
                offset: (i * rec + variant.label_bytes() - 1) as u64,
                msg: format!("label {label} out of range"),
            });
        }
        labels.push(label);
        pixels.extend(r[variant.label_bytes()..].iter().map(|&b| b as f64 / 255.0));
    }
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], pixels)?, labels, variant.num_classes())
}

/// Writes records in the binary layout; pixel values are rounded from `[0, 1]`.
/// For CIFAR-100 the coarse byte is written as 0.
pub fn write_cifar_binary(path: &Path, ds: &Dataset, variant: CifarVariant) -> Result<()> {
    if ds.sample_shape() != [3, 32, 32] {
        return Err(Error::Shape(format!(
            "CIFAR records hold [3, 32, 32] images, got {:?}",
            ds.sample_shape()
        )));
    }
    let mut out = Vec::with_capacity(ds.len() * variant.record_len());
    for i in 0..ds.len() {
        if variant == CifarVariant::Cifar100 {
            out.push(0);
        }
        out.push(ds.labels()[i] as u8);
        out.extend(ds.sample(i).iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    fs::write(path, out)?;
    Ok(())
}
