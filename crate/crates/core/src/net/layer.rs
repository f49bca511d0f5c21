use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{kernels, Graph, Tensor, Var};

/// One network layer. Trainable layers own their parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// Fixed per-channel `(x - mean) / std`, used to fold dataset
    /// normalization into the network.
    Normalize { mean: Vec<f64>, std: Vec<f64> },
    /// `y = W x + b` with `W: [out, in]`.
    Affine { weight: Tensor, bias: Tensor },
    /// NCHW convolution with `W: [out_ch, in_ch, kh, kw]`.
    Conv2d {
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    Relu,
    Flatten,
}

/// Serializable layer description without parameter values.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Normalize { channels: usize },
    Affine { inputs: usize, outputs: usize },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    Flatten,
}

impl Layer {
    pub fn affine(inputs: usize, outputs: usize) -> Self {
        Layer::Affine {
            weight: Tensor::zeros(&[outputs, inputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn conv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Layer::Conv2d {
            weight: Tensor::zeros(&[out_ch, in_ch, kernel, kernel]),
            bias: Tensor::zeros(&[out_ch]),
            stride,
            padding,
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, Layer::Affine { .. } | Layer::Conv2d { .. })
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Normalize { mean, .. } => LayerSpec::Normalize { channels: mean.len() },
            Layer::Affine { weight, .. } => LayerSpec::Affine {
                inputs: weight.shape()[1],
                outputs: weight.shape()[0],
            },
            Layer::Conv2d {
                weight,
                stride,
                padding,
                ..
            } => LayerSpec::Conv2d {
                in_ch: weight.shape()[1],
                out_ch: weight.shape()[0],
                kernel: weight.shape()[2],
                stride: *stride,
                padding: *padding,
            },
            Layer::Relu => LayerSpec::Relu,
            Layer::Flatten => LayerSpec::Flatten,
        }
    }

    /// Layer with zero-valued parameters matching `spec`.
    pub fn from_spec(spec: &LayerSpec) -> Self {
        match *spec {
            LayerSpec::Normalize { channels } => Layer::Normalize {
                mean: vec![0.0; channels],
                std: vec![1.0; channels],
            },
            LayerSpec::Affine { inputs, outputs } => Layer::affine(inputs, outputs),
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => Layer::conv(in_ch, out_ch, kernel, stride, padding),
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::Flatten => Layer::Flatten,
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Affine { weight, bias } | Layer::Conv2d { weight, bias, .. } => vec![weight, bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Affine { weight, bias } | Layer::Conv2d { weight, bias, .. } => {
                vec![weight, bias]
            }
            _ => Vec::new(),
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Normalize { mean, std } => {
                if input.is_empty() || input[0] != mean.len() || std.len() != mean.len() {
                    return Err(Error::shape(
                        "normalize",
                        format!("{} channels for input {input:?}", mean.len()),
                    ));
                }
                Ok(input.to_vec())
            }
            Layer::Affine { weight, bias } => {
                if input.len() != 1 || input[0] != weight.shape()[1] || bias.len() != weight.shape()[0] {
                    return Err(Error::shape(
                        "affine",
                        format!("weight {:?} for input {input:?}", weight.shape()),
                    ));
                }
                Ok(vec![weight.shape()[0]])
            }
            Layer::Conv2d {
                weight,
                stride,
                padding,
                ..
            } => {
                if input.len() != 3 {
                    return Err(Error::shape("conv2d", format!("input {input:?} is not CHW")));
                }
                let full = [1, input[0], input[1], input[2]];
                let out = kernels::ConvGeometry::new(&full, weight.shape(), *stride, *padding)?;
                Ok(vec![out.out_ch, out.out_h, out.out_w])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// Concrete batched evaluation.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.apply_linear_part(x, true)
    }

    /// Evaluates the layer, optionally dropping the additive offset of
    /// affine-type layers (bias, normalization mean). ReLU is applied as-is.
    pub fn apply_linear_part(&self, x: &Tensor, with_offset: bool) -> Result<Tensor> {
        match self {
            Layer::Normalize { mean, std } => {
                let c = mean.len();
                let inner = x.row_len() / c;
                let mut out = x.clone();
                for (i, v) in out.data_mut().iter_mut().enumerate() {
                    let ch = (i / inner) % c;
                    let shift = if with_offset { mean[ch] } else { 0.0 };
                    *v = (*v - shift) / std[ch];
                }
                Ok(out)
            }
            Layer::Affine { weight, bias } => {
                let x2 = flatten_batch(x)?;
                let mut out = kernels::matmul_nt(&x2, weight)?;
                if with_offset {
                    let m = bias.len();
                    for (i, v) in out.data_mut().iter_mut().enumerate() {
                        *v += bias.data()[i % m];
                    }
                }
                Ok(out)
            }
            Layer::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => {
                let mut out = kernels::conv2d(x, weight, *stride, *padding)?;
                if with_offset {
                    add_channel_bias(&mut out, bias.data());
                }
                Ok(out)
            }
            Layer::Relu => Ok(x.map(|v| v.max(0.0))),
            Layer::Flatten => flatten_batch(x),
        }
    }

    /// Records the layer on a tape. `params` holds the bound weight and bias
    /// for trainable layers.
    pub fn apply_on_tape(&self, g: &mut Graph, params: Option<(Var, Var)>, x: Var) -> Result<Var> {
        match self {
            Layer::Normalize { mean, std } => {
                let shape = g.value(x).shape().to_vec();
                let (scale, shift) = normalize_tensors(&shape, mean, std);
                let s = g.constant(scale);
                let o = g.constant(shift);
                let y = g.sub(x, o)?;
                g.mul(y, s)
            }
            Layer::Affine { .. } => {
                let (w, b) = params.ok_or_else(|| Error::InvalidArgument("unbound affine layer".into()))?;
                let x2 = flatten_on_tape(g, x)?;
                let wt = g.transpose(w)?;
                let y = g.matmul(x2, wt)?;
                g.add_bias(y, b)
            }
            Layer::Conv2d { stride, padding, .. } => {
                let (w, b) = params.ok_or_else(|| Error::InvalidArgument("unbound conv layer".into()))?;
                let y = g.conv2d(x, w, *stride, *padding)?;
                g.add_channel_bias(y, b)
            }
            Layer::Relu => g.relu(x),
            Layer::Flatten => flatten_on_tape(g, x),
        }
    }
}

pub(crate) fn flatten_batch(x: &Tensor) -> Result<Tensor> {
    if x.ndim() == 2 {
        return Ok(x.clone());
    }
    x.reshape(&[x.rows(), x.row_len()])
}

pub(crate) fn flatten_on_tape(g: &mut Graph, x: Var) -> Result<Var> {
    let t = g.value(x);
    if t.ndim() == 2 {
        return Ok(x);
    }
    let shape = [t.rows(), t.row_len()];
    g.reshape(x, &shape)
}

pub(crate) fn add_channel_bias(out: &mut Tensor, bias: &[f64]) {
    let s = out.shape();
    let (c, hw) = (s[1], s[2] * s[3]);
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += bias[(i / hw) % c];
    }
}

/// Elementwise `1/std` and `mean` tensors broadcast to a batch shape.
pub(crate) fn normalize_tensors(shape: &[usize], mean: &[f64], std: &[f64]) -> (Tensor, Tensor) {
    let c = mean.len();
    let n: usize = shape.iter().product();
    let inner = n / shape[0] / c;
    let scale = (0..n).map(|i| 1.0 / std[(i / inner) % c]).collect();
    let shift = (0..n).map(|i| mean[(i / inner) % c]).collect();
    (
        Tensor::raw(shape.to_vec(), scale),
        Tensor::raw(shape.to_vec(), shift),
    )
}
