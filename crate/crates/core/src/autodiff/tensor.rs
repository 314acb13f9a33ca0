use crate::error::{Error, Result};

/// Dense row-major tensor of doubles.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Size of the leading dimension.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of values per leading-dimension entry.
    pub fn row_len(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.row_len();
        &self.data[i * k..(i + 1) * k]
    }

    /// Gathers the given rows into a new tensor with the same trailing shape.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Usage("cannot select zero rows".into()));
        }
        let k = self.row_len();
        let mut data = Vec::with_capacity(rows.len() * k);
        for &r in rows {
            if r >= self.shape[0] {
                return Err(Error::Shape(format!(
                    "row {r} out of range for leading dimension {}",
                    self.shape[0]
                )));
            }
            data.extend_from_slice(self.row(r));
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Self { shape, data })
    }
}
