use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::{Batch, Dataset, Targets};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Pixels of zero padding on each side before the random crop.
pub const CROP_PADDING: usize = 4;

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Normalises a `[c, h, w]` image stored row-major in `img`.
    pub fn apply(&self, img: &mut [f64]) {
        let c = self.mean.len();
        let plane = img.len() / c;
        for (ch, chunk) in img.chunks_mut(plane).enumerate() {
            let (m, s) = (self.mean[ch], self.std[ch]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
    }
}

/// Channel statistics of a `[n, c, h, w]` dataset.
pub fn channel_stats(ds: &Dataset) -> Result<Normalization> {
    let shape = ds.sample_shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "channel statistics need [c, h, w] samples, got {shape:?}"
        )));
    }
    let c = shape[0];
    let plane = shape[1] * shape[2];
    let mut sum = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for i in 0..ds.len() {
        for (ch, chunk) in ds.sample(i).chunks(plane).enumerate() {
            sum[ch] += chunk.iter().sum::<f64>();
            sq[ch] += chunk.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let count = (ds.len() * plane) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / count - m * m).max(0.0).sqrt().max(1e-12))
        .collect();
    Ok(Normalization { mean, std })
}

fn image_dims(img: &Tensor) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::Shape(format!("expected a [c, h, w] image, got {s:?}"))),
    }
}

/// Zero-pad by [`CROP_PADDING`], crop an `h x w` window whose top-left corner
/// sits at `offset` in padded coordinates, optionally mirror horizontally,
/// then normalise.
pub fn standard_augment_with(
    img: &Tensor,
    offset: (usize, usize),
    flip: bool,
    norm: Option<&Normalization>,
) -> Result<Tensor> {
    let (c, h, w) = image_dims(img)?;
    let (oy, ox) = offset;
    if oy > 2 * CROP_PADDING || ox > 2 * CROP_PADDING {
        return Err(Error::Shape(format!(
            "crop offset {offset:?} exceeds the padded border"
        )));
    }
    let src = img.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + oy) as isize - CROP_PADDING as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + ox) as isize - CROP_PADDING as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let dx = if flip { w - 1 - x } else { x };
                out[(ch * h + y) * w + dx] = src[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    if let Some(n) = norm {
        if n.mean.len() != c {
            return Err(Error::Shape(format!(
                "normalisation has {} channels, image has {c}",
                n.mean.len()
            )));
        }
        n.apply(&mut out);
    }
    Tensor::new(vec![c, h, w], out)
}

/// Random crop with padding 4, horizontal flip with probability 0.5, then
/// per-channel normalisation.
pub fn standard_augment<R: Rng + ?Sized>(img: &Tensor, norm: Option<&Normalization>, rng: &mut R) -> Result<Tensor> {
    let oy = rng.random_range(0..=2 * CROP_PADDING);
    let ox = rng.random_range(0..=2 * CROP_PADDING);
    let flip = rng.random_bool(0.5);
    standard_augment_with(img, (oy, ox), flip, norm)
}

/// Zeroes a `size x size` square whose centre is pixel `(cy, cx)`; the square
/// is clipped at the image border.
pub fn cutout_at(img: &Tensor, size: usize, cy: usize, cx: usize) -> Result<Tensor> {
    let (c, h, w) = image_dims(img)?;
    let half = size / 2;
    let (y0, y1) = (cy.saturating_sub(half), (cy + size - half).min(h));
    let (x0, x1) = (cx.saturating_sub(half), (cx + size - half).min(w));
    let mut out = img.clone();
    let data = out.data_mut();
    for ch in 0..c {
        for y in y0..y1 {
            let row = (ch * h + y) * w;
            data[row + x0..row + x1].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(out)
}

/// Cutout with the mask centre drawn uniformly over all pixels.
pub fn cutout<R: Rng + ?Sized>(img: &Tensor, size: usize, rng: &mut R) -> Result<Tensor> {
    let (_, h, w) = image_dims(img)?;
    if size == 0 {
        return Err(Error::Config("cutout size must be positive".into()));
    }
    let cy = rng.random_range(0..h);
    let cx = rng.random_range(0..w);
    cutout_at(img, size, cy, cx)
}

/// Mixes sample `i` with sample `partner[i]` using weight `lambdas[i]`:
/// `x = λ x_i + (1 − λ) x_j`, same for the one-hot labels.
pub fn mixup_with(b: &Batch, partner: &[usize], lambdas: &[f64], num_classes: usize) -> Result<Batch> {
    let n = b.len();
    if partner.len() != n || lambdas.len() != n {
        return Err(Error::Shape(format!(
            "mixup needs {n} partners and weights, got {} and {}",
            partner.len(),
            lambdas.len()
        )));
    }
    if let Some(l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::Usage(format!("mixup weight {l} outside [0, 1]")));
    }
    let x = b.inputs();
    let k = x.row_len();
    let y = b.targets().to_soft(num_classes)?;
    let mut xs = Vec::with_capacity(n * k);
    let mut ys = Vec::with_capacity(n * num_classes);
    for i in 0..n {
        let (j, lam) = (partner[i], lambdas[i]);
        xs.extend(x.row(i).iter().zip(x.row(j)).map(|(a, c)| lam * a + (1.0 - lam) * c));
        let (yi, yj) = (
            &y[i * num_classes..(i + 1) * num_classes],
            &y[j * num_classes..(j + 1) * num_classes],
        );
        ys.extend(yi.iter().zip(yj).map(|(a, c)| lam * a + (1.0 - lam) * c));
    }
    Batch::new(
        Tensor::new(x.shape().to_vec(), xs)?,
        Targets::Soft { probs: ys, num_classes },
    )
}

/// Mixup with partners from a random in-batch permutation and
/// `λ ~ Beta(alpha, alpha)` drawn per sample.
pub fn mixup_batch<R: Rng + ?Sized>(b: &Batch, alpha: f64, num_classes: usize, rng: &mut R) -> Result<Batch> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Config(format!("mixup alpha must be positive, got {alpha}")));
    }
    if b.len() < 2 {
        return Err(Error::Usage("mixup needs at least two samples".into()));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("mixup alpha: {e}")))?;
    let mut partner: Vec<usize> = (0..b.len()).collect();
    partner.shuffle(rng);
    let lambdas: Vec<f64> = (0..b.len()).map(|_| beta.sample(rng)).collect();
    mixup_with(b, &partner, &lambdas, num_classes)
}
