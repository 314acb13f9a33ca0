//! Model definitions: the LeNet-style CIFAR CNN and plain MLPs.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Layout, ParamVector, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    /// Valid, stride-1 square convolution.
    Conv {
        out_channels: usize,
        kernel: usize,
    },
    MaxPool {
        size: usize,
    },
    Dense {
        out: usize,
    },
    Relu,
    Flatten,
}

/// An ordered stack of layers with a validated parameter manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModelSpec", into = "RawModelSpec")]
pub struct ModelSpec {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    num_classes: usize,
    layout: Arc<Layout>,
    /// Parameter block names per layer (weight, bias); `None` for parameter-free layers.
    blocks: Vec<Option<(String, String)>>,
}

#[derive(Serialize, Deserialize)]
struct RawModelSpec {
    layers: Vec<Layer>,
    input_shape: Vec<usize>,
    num_classes: usize,
}

impl TryFrom<RawModelSpec> for ModelSpec {
    type Error = Error;
    fn try_from(r: RawModelSpec) -> Result<Self> {
        ModelSpec::new(r.layers, r.input_shape, r.num_classes)
    }
}

impl From<ModelSpec> for RawModelSpec {
    fn from(m: ModelSpec) -> Self {
        RawModelSpec {
            layers: m.layers,
            input_shape: m.input_shape,
            num_classes: m.num_classes,
        }
    }
}

impl ModelSpec {
    /// Validates that consecutive layer shapes compose and that the network
    /// ends in `num_classes` logits.
    pub fn new(layers: Vec<Layer>, input_shape: Vec<usize>, num_classes: usize) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Config(format!("invalid input shape {input_shape:?}")));
        }
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        let mut shape = input_shape.clone();
        let mut blocks_spec = Vec::new();
        let mut blocks = Vec::new();
        let (mut n_conv, mut n_dense) = (0, 0);
        for (i, layer) in layers.iter().enumerate() {
            let bad = |msg: String| Error::Config(format!("layer {i} ({layer:?}): {msg}"));
            match *layer {
                Layer::Conv { out_channels, kernel } => {
                    if shape.len() != 3 {
                        return Err(bad(format!("expects [c, h, w] input, got {shape:?}")));
                    }
                    if out_channels == 0 || kernel == 0 || kernel > shape[1] || kernel > shape[2] {
                        return Err(bad(format!("does not fit input {shape:?}")));
                    }
                    n_conv += 1;
                    let (wn, bn) = (format!("conv{n_conv}.weight"), format!("conv{n_conv}.bias"));
                    blocks_spec.push((wn.clone(), vec![out_channels, shape[0], kernel, kernel]));
                    blocks_spec.push((bn.clone(), vec![out_channels]));
                    blocks.push(Some((wn, bn)));
                    shape = vec![out_channels, shape[1] - kernel + 1, shape[2] - kernel + 1];
                }
                Layer::MaxPool { size } => {
                    if shape.len() != 3 || size == 0 || shape[1] < size || shape[2] < size {
                        return Err(bad(format!("does not fit input {shape:?}")));
                    }
                    blocks.push(None);
                    shape = vec![shape[0], shape[1] / size, shape[2] / size];
                }
                Layer::Dense { out } => {
                    if shape.len() != 1 {
                        return Err(bad(format!("expects flat input, got {shape:?}")));
                    }
                    if out == 0 {
                        return Err(bad("zero width".into()));
                    }
                    n_dense += 1;
                    let (wn, bn) = (format!("dense{n_dense}.weight"), format!("dense{n_dense}.bias"));
                    blocks_spec.push((wn.clone(), vec![out, shape[0]]));
                    blocks_spec.push((bn.clone(), vec![out]));
                    blocks.push(Some((wn, bn)));
                    shape = vec![out];
                }
                Layer::Relu => blocks.push(None),
                Layer::Flatten => {
                    blocks.push(None);
                    shape = vec![shape.iter().product()];
                }
            }
        }
        if shape != [num_classes] {
            return Err(Error::Config(format!(
                "network emits {shape:?}, expected [{num_classes}] logits"
            )));
        }
        Ok(Self {
            layers,
            input_shape,
            num_classes,
            layout: Arc::new(Layout::new(blocks_spec)),
            blocks,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.len()
    }

    /// Records the forward pass on `tape`; `input` is `[n, ...input_shape]`.
    pub fn forward(&self, tape: &mut Tape, params: &ParamVector, input: Var) -> Result<Var> {
        let xs = tape.value(input).shape();
        if xs.len() != self.input_shape.len() + 1 || xs[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!(
                "model expects [n, {:?}] input, got {xs:?}",
                self.input_shape
            )));
        }
        let mut x = input;
        for (layer, block) in self.layers.iter().zip(&self.blocks) {
            x = match (*layer, block) {
                (Layer::Conv { .. }, Some((w, b))) => {
                    let w = tape.param(params, w)?;
                    let b = tape.param(params, b)?;
                    tape.conv2d(x, w, b)?
                }
                (Layer::Dense { .. }, Some((w, b))) => {
                    let w = tape.param(params, w)?;
                    let b = tape.param(params, b)?;
                    tape.dense(x, w, b)?
                }
                (Layer::MaxPool { size }, _) => tape.maxpool2d(x, size)?,
                (Layer::Relu, _) => tape.relu(x),
                (Layer::Flatten, _) => tape.flatten(x)?,
                _ => unreachable!("blocks are built alongside layers"),
            };
        }
        Ok(x)
    }

    /// Logits `[n, num_classes]` for a stack of inputs.
    pub fn logits(&self, params: &ParamVector, inputs: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new(Arc::clone(&self.layout));
        let x = tape.constant(inputs.clone());
        let y = self.forward(&mut tape, params, x)?;
        Ok(tape.value(y).clone())
    }
}

/// The LeNet-style CIFAR network: two 5×5 convolutions with 64 channels, each
/// followed by ReLU and 2×2 max-pooling, then dense 384 and 192 with ReLU and
/// a linear classifier. Input is `[3, 32, 32]`.
pub fn lenet_cifar(num_classes: usize) -> ModelSpec {
    ModelSpec::new(
        vec![
            Layer::Conv {
                out_channels: 64,
                kernel: 5,
            },
            Layer::Relu,
            Layer::MaxPool { size: 2 },
            Layer::Conv {
                out_channels: 64,
                kernel: 5,
            },
            Layer::Relu,
            Layer::MaxPool { size: 2 },
            Layer::Flatten,
            Layer::Dense { out: 384 },
            Layer::Relu,
            Layer::Dense { out: 192 },
            Layer::Relu,
            Layer::Dense { out: num_classes },
        ],
        vec![3, 32, 32],
        num_classes,
    )
    .expect("lenet layers compose for any positive class count")
}

/// Dense + ReLU chain over `dims`; the last layer is linear.
pub fn mlp(dims: &[usize]) -> Result<ModelSpec> {
    if dims.len() < 2 {
        return Err(Error::Usage(format!(
            "mlp needs at least input and output widths, got {dims:?}"
        )));
    }
    let mut layers = Vec::new();
    for (i, &d) in dims[1..].iter().enumerate() {
        layers.push(Layer::Dense { out: d });
        if i + 2 < dims.len() {
            layers.push(Layer::Relu);
        }
    }
    ModelSpec::new(layers, vec![dims[0]], *dims.last().unwrap())
}

/// He-uniform fan-in initialisation, zero biases; deterministic in `seed`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamVector::zeros(Arc::clone(spec.layout()));
    for entry in spec.layout().entries() {
        if entry.shape.len() < 2 {
            continue;
        }
        let fan_in: usize = entry.shape[1..].iter().product();
        let bound = (6.0 / fan_in as f64).sqrt();
        for v in &mut p.as_mut_slice()[entry.range()] {
            *v = rng.random_range(-bound..bound);
        }
    }
    p
}
