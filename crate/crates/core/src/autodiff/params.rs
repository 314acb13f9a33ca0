use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One named parameter block inside a flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Manifest of contiguous, non-overlapping parameter blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
    len: usize,
}

impl Layout {
    pub fn new<S: Into<String>>(blocks: impl IntoIterator<Item = (S, Vec<usize>)>) -> Self {
        let mut offset = 0;
        let entries = blocks
            .into_iter()
            .map(|(name, shape)| {
                let e = LayoutEntry {
                    name: name.into(),
                    shape,
                    offset,
                };
                offset += e.len();
                e
            })
            .collect();
        Self { entries, len: offset }
    }

    /// A single unnamed block of `n` values.
    pub fn flat(n: usize) -> Self {
        Self::new([("theta", vec![n])])
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Flat double-precision view of all model weights plus their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    data: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        Self {
            data: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn from_vec(layout: Arc<Layout>, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.len() {
            return Err(Error::Shape(format!(
                "layout expects {} values, got {}",
                layout.len(),
                data.len()
            )));
        }
        Ok(Self { data, layout })
    }

    /// Vector with a single-block layout; convenient for toy objectives.
    pub fn flat(data: Vec<f64>) -> Self {
        Self {
            layout: Arc::new(Layout::flat(data.len())),
            data,
        }
    }

    /// A vector sharing this one's layout.
    pub fn with_data(&self, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), self.data.len(), "length mismatch");
        Self {
            data,
            layout: Arc::clone(&self.layout),
        }
    }

    pub fn zeros_like(&self) -> Self {
        self.with_data(vec![0.0; self.data.len()])
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layout.entry(name).map(|e| &self.data[e.range()])
    }

    pub fn check_compatible(&self, other: &ParamVector) -> Result<()> {
        if self.data.len() != other.data.len() {
            return Err(Error::Shape(format!(
                "parameter vectors of length {} and {}",
                self.data.len(),
                other.data.len()
            )));
        }
        Ok(())
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &ParamVector) {
        assert_eq!(self.data.len(), x.data.len(), "length mismatch");
        for (a, b) in self.data.iter_mut().zip(&x.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        self.with_data(self.data.iter().map(|v| v * alpha).collect())
    }

    pub fn add(&self, other: &ParamVector) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ParamVector) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    fn zip_map(&self, other: &ParamVector, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.data.len(), other.data.len(), "length mismatch");
        self.with_data(self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
