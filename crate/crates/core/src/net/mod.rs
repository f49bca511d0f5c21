//! Layers, architectures and networks split into a feature extractor and a
//! classifier.

mod layer;

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use layer::{Layer, LayerSpec};
pub(crate) use layer::{add_channel_bias, flatten_batch, flatten_on_tape};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Named architecture families.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Architecture {
    /// Fully connected ReLU network with the given hidden widths.
    Mlp(Vec<usize>),
    /// Two stride-2 convolutions followed by one hidden affine layer.
    Cnn3,
    /// Five convolutions and two affine layers, without batch norm.
    Cnn7,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::Mlp(h) if h == &[128, 128] => write!(f, "mlp"),
            Architecture::Mlp(h) => {
                let widths: Vec<String> = h.iter().map(ToString::to_string).collect();
                write!(f, "mlp:{}", widths.join(","))
            }
            Architecture::Cnn3 => write!(f, "cnn3"),
            Architecture::Cnn7 => write!(f, "cnn7"),
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    /// Accepts `mlp`, `mlp:W1,W2,...`, `cnn3` and `cnn7`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Architecture::Mlp(vec![128, 128])),
            "cnn3" => Ok(Architecture::Cnn3),
            "cnn7" => Ok(Architecture::Cnn7),
            _ => {
                let widths = s
                    .strip_prefix("mlp:")
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown architecture '{s}'")))?;
                let hidden = widths
                    .split(',')
                    .map(|w| w.trim().parse::<usize>().ok().filter(|&w| w > 0))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| Error::InvalidArgument(format!("bad mlp widths in '{s}'")))?;
                Ok(Architecture::Mlp(hidden))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Normal weights with variance `2*pi / fan_in^2`, keeping box radii
    /// roughly constant over depth.
    IbpStable,
    /// Normal weights with variance `2 / fan_in`.
    Kaiming,
}

/// Sequential network with an extractor/classifier split.
///
/// `layers[..split_index]` is the feature extractor and
/// `layers[split_index..]` the classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub split_index: usize,
    pub num_classes: usize,
    /// Per-sample input shape, e.g. `[1, 28, 28]` or `[2]`.
    pub input_shape: Vec<usize>,
}

impl Network {
    pub fn new(layers: Vec<Layer>, input_shape: Vec<usize>, num_classes: usize, split_index: usize) -> Result<Self> {
        let net = Self {
            layers,
            split_index,
            num_classes,
            input_shape,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.split_index > self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "split index {} beyond {} layers",
                self.split_index,
                self.layers.len()
            )));
        }
        match self.layers.last() {
            Some(Layer::Affine { weight, .. }) if weight.shape()[0] == self.num_classes => {}
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "final layer must be affine with {} outputs",
                    self.num_classes
                )))
            }
        }
        self.layer_shapes().map(|_| ())
    }

    /// Per-sample shapes before each layer plus the output shape.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for layer in &self.layers {
            let next = layer.output_shape(shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn extractor(&self) -> Range<usize> {
        0..self.split_index
    }

    pub fn classifier(&self) -> Range<usize> {
        self.split_index..self.layers.len()
    }

    pub fn has_classifier(&self) -> bool {
        self.split_index < self.layers.len()
    }

    pub fn relu_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::Relu)).count()
    }

    pub fn classifier_relu_count(&self) -> usize {
        self.layers[self.classifier()]
            .iter()
            .filter(|l| matches!(l, Layer::Relu))
            .count()
    }

    /// Moves the split so the classifier holds exactly `count` ReLU layers
    /// and begins with a linear layer. `count = 0` puts the split at the end.
    pub fn set_classifier_relus(&mut self, count: usize) -> Result<()> {
        self.split_index = split_for_relu_count(&self.layers, count)?;
        Ok(())
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// All parameters flattened in declaration order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(
                "set_flat_params",
                format!("expected {} values, got {}", self.param_count(), flat.len()),
            ));
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.len();
            p.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Draws fresh weights; biases are set to zero.
    pub fn init_params(&mut self, seed: u64, mode: InitMode) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut after_relu = false;
        for layer in &mut self.layers {
            if matches!(layer, Layer::Relu) {
                after_relu = true;
            }
            let (weight, bias) = match layer {
                Layer::Affine { weight, bias } | Layer::Conv2d { weight, bias, .. } => (weight, bias),
                _ => continue,
            };
            let fan_in = weight.row_len() as f64;
            let std = match mode {
                // E|w| * fan_in = 1 keeps the radius; a preceding ReLU halves it on average.
                InitMode::IbpStable if after_relu => (2.0 * std::f64::consts::PI).sqrt() / fan_in,
                InitMode::IbpStable => (0.5 * std::f64::consts::PI).sqrt() / fan_in,
                InitMode::Kaiming => (2.0 / fan_in).sqrt(),
            };
            let normal = Normal::new(0.0, std).expect("positive std");
            for w in weight.data_mut() {
                *w = normal.sample(&mut rng);
            }
            bias.data_mut().fill(0.0);
        }
    }

    /// Batched concrete forward pass; `x` has shape `[B, ..input_shape]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_range(x, 0..self.layers.len())
    }

    pub fn forward_range(&self, x: &Tensor, range: Range<usize>) -> Result<Tensor> {
        if range.start == 0 && x.shape()[1..] != self.input_shape[..] {
            return Err(Error::shape(
                "forward",
                format!("input {:?} vs network input {:?}", x.shape(), self.input_shape),
            ));
        }
        let mut h = x.clone();
        for layer in &self.layers[range] {
            h = layer.apply(&h)?;
        }
        Ok(h)
    }

    /// Binds the parameters to leaves on `g`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Affine { weight, bias } | Layer::Conv2d { weight, bias, .. } => {
                    Some((g.leaf(weight.clone(), trainable), g.leaf(bias.clone(), trainable)))
                }
                _ => None,
            })
            .collect();
        BoundParams { vars }
    }

    /// Records layers `range` on the tape.
    pub fn forward_on_tape(&self, g: &mut Graph, params: &BoundParams, x: Var, range: Range<usize>) -> Result<Var> {
        let mut h = x;
        for i in range {
            h = self.layers[i].apply_on_tape(g, params.vars[i], h)?;
        }
        Ok(h)
    }

    /// Replaces the final affine layer by logit differences to class `y`:
    /// rows `W_i - W_y`, biases `b_i - b_y`.
    pub fn elide_final_layer(&self, y: usize) -> Result<Network> {
        if y >= self.num_classes {
            return Err(Error::InvalidArgument(format!(
                "class {y} out of range for {} classes",
                self.num_classes
            )));
        }
        let mut net = self.clone();
        let Some(Layer::Affine { weight, bias }) = net.layers.last_mut() else {
            return Err(Error::InvalidArgument("final layer is not affine".into()));
        };
        let cols = weight.shape()[1];
        let w_y = weight.row(y).to_vec();
        let b_y = bias.data()[y];
        for (i, v) in weight.data_mut().iter_mut().enumerate() {
            *v -= w_y[i % cols];
        }
        for v in bias.data_mut() {
            *v -= b_y;
        }
        Ok(net)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    /// Network with zero-valued parameters from layer specs.
    pub fn from_specs(specs: &[LayerSpec], input_shape: Vec<usize>, num_classes: usize, split_index: usize) -> Result<Self> {
        Network::new(
            specs.iter().map(Layer::from_spec).collect(),
            input_shape,
            num_classes,
            split_index,
        )
    }

    /// Prepends a fixed per-channel normalization. The split index is shifted
    /// so the extractor/classifier boundary is unchanged.
    pub fn with_normalization(mut self, mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if std.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidArgument("normalization std must be positive".into()));
        }
        let full = self.split_index == self.layers.len();
        self.layers.insert(0, Layer::Normalize { mean, std });
        self.split_index = if full { self.layers.len() } else { self.split_index + 1 };
        self.validate()?;
        Ok(self)
    }
}

/// Parameter leaves of a network on one tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Option<(Var, Var)>>,
}

impl BoundParams {
    pub fn layer(&self, i: usize) -> Option<(Var, Var)> {
        self.vars[i]
    }

    /// Leaves in declaration order (weight, bias per trainable layer).
    pub fn vars(&self) -> Vec<Var> {
        self.vars.iter().flatten().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Same bindings with the final layer replaced by its logit-difference
    /// form for class `y`, recorded on the tape so gradients reach the
    /// original weights.
    pub fn elided(&self, g: &mut Graph, num_classes: usize, y: usize) -> Result<BoundParams> {
        if y >= num_classes {
            return Err(Error::InvalidArgument(format!("class {y} out of range")));
        }
        let mut out = self.clone();
        let slot = out
            .vars
            .last_mut()
            .and_then(Option::as_mut)
            .ok_or_else(|| Error::InvalidArgument("final layer is not affine".into()))?;
        let (w, b) = *slot;
        let k = num_classes;
        let mut e = Tensor::zeros(&[k, k]);
        for i in 0..k {
            e.data_mut()[i * k + i] += 1.0;
            e.data_mut()[i * k + y] -= 1.0;
        }
        let e = g.constant(e);
        let w2 = g.matmul(e, w)?;
        let b_col = g.reshape(b, &[k, 1])?;
        let b2 = g.matmul(e, b_col)?;
        let b2 = g.reshape(b2, &[k])?;
        *slot = (w2, b2);
        Ok(out)
    }
}

/// Index where the classifier must start to contain `count` ReLU layers.
fn split_for_relu_count(layers: &[Layer], count: usize) -> Result<usize> {
    if count == 0 {
        return Ok(layers.len());
    }
    let relu_positions: Vec<usize> = layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, Layer::Relu))
        .map(|(i, _)| i)
        .collect();
    if count > relu_positions.len() {
        return Err(Error::InvalidArgument(format!(
            "classifier cannot hold {count} ReLU layers; network has {}",
            relu_positions.len()
        )));
    }
    let relu = relu_positions[relu_positions.len() - count];
    layers[..relu]
        .iter()
        .rposition(Layer::is_linear)
        .ok_or_else(|| Error::InvalidArgument("no linear layer before split ReLU".into()))
}

/// Builds an architecture with zero parameters (call
/// [`Network::init_params`] afterwards).
pub fn build_architecture(
    arch: &Architecture,
    input_shape: &[usize],
    num_classes: usize,
    classifier_relu_count: usize,
) -> Result<Network> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument("need at least two classes".into()));
    }
    let mut layers = Vec::new();
    match arch {
        Architecture::Mlp(hidden) => {
            if input_shape.len() > 1 {
                layers.push(Layer::Flatten);
            }
            let mut width: usize = input_shape.iter().product();
            for &h in hidden {
                layers.push(Layer::affine(width, h));
                layers.push(Layer::Relu);
                width = h;
            }
            layers.push(Layer::affine(width, num_classes));
        }
        Architecture::Cnn3 | Architecture::Cnn7 => {
            if input_shape.len() != 3 {
                return Err(Error::InvalidArgument(format!(
                    "{arch} needs CHW input, got {input_shape:?}"
                )));
            }
            let convs: &[(usize, usize, usize, usize)] = match arch {
                // (out_ch, kernel, stride, padding)
                Architecture::Cnn3 => &[(16, 4, 2, 1), (32, 4, 2, 1)],
                _ => &[(64, 3, 1, 1), (64, 3, 1, 1), (128, 3, 2, 1), (128, 3, 1, 1), (128, 3, 1, 1)],
            };
            let hidden = if *arch == Architecture::Cnn3 { 100 } else { 512 };
            let mut ch = input_shape[0];
            for &(out_ch, k, s, p) in convs {
                layers.push(Layer::conv(ch, out_ch, k, s, p));
                layers.push(Layer::Relu);
                ch = out_ch;
            }
            layers.push(Layer::Flatten);
            let mut shape = input_shape.to_vec();
            for l in &layers {
                shape = l.output_shape(&shape)?;
            }
            layers.push(Layer::affine(shape[0], hidden));
            layers.push(Layer::Relu);
            layers.push(Layer::affine(hidden, num_classes));
        }
    }
    let split = split_for_relu_count(&layers, classifier_relu_count)?;
    Network::new(layers, input_shape.to_vec(), num_classes, split)
}

#[cfg(test)]
mod tests;
