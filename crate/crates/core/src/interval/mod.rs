//! Box-domain (interval) bound propagation.
//!
//! Boxes are carried as center/radius pairs: affine maps act as
//! `c' = W c + b`, `r' = |W| r`, and ReLU is applied to the endpoints.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::net::{add_channel_bias, flatten_batch, flatten_on_tape, BoundParams, Layer, Network};
use crate::tensor::{kernels, Graph, Tensor, Var};

/// Axis-aligned box `[lo, hi]` over a batch of tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxBounds {
    pub lo: Tensor,
    pub hi: Tensor,
}

impl BoxBounds {
    pub fn new(lo: Tensor, hi: Tensor) -> Result<Self> {
        if lo.shape() != hi.shape() {
            return Err(Error::shape(
                "box",
                format!("lo {:?} vs hi {:?}", lo.shape(), hi.shape()),
            ));
        }
        if let Some(i) = lo.data().iter().zip(hi.data()).position(|(l, h)| l > h) {
            return Err(Error::InvalidArgument(format!(
                "box has lo > hi at index {i} ({} > {})",
                lo.data()[i],
                hi.data()[i]
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn point(x: &Tensor) -> Self {
        Self {
            lo: x.clone(),
            hi: x.clone(),
        }
    }

    pub fn from_center_radius(center: &Tensor, radius: &Tensor) -> Self {
        Self {
            lo: center.zip_map(radius, |c, r| c - r),
            hi: center.zip_map(radius, |c, r| c + r),
        }
    }

    pub fn center(&self) -> Tensor {
        self.lo.zip_map(&self.hi, |l, h| 0.5 * (l + h))
    }

    pub fn radius(&self) -> Tensor {
        self.lo.zip_map(&self.hi, |l, h| 0.5 * (h - l))
    }

    pub fn contains(&self, x: &Tensor, slack: f64) -> bool {
        x.shape() == self.lo.shape()
            && x
                .data()
                .iter()
                .zip(self.lo.data().iter().zip(self.hi.data()))
                .all(|(&v, (&l, &h))| v >= l - slack && v <= h + slack)
    }

    /// Whether `self` lies inside `other` up to `slack`.
    pub fn is_subset_of(&self, other: &BoxBounds, slack: f64) -> bool {
        other.contains(&self.lo, slack) && other.contains(&self.hi, slack)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            lo: self.lo.select_rows(idx),
            hi: self.hi.select_rows(idx),
        }
    }
}

/// `B(x, eps)` intersected with `[clip.0, clip.1]` when given.
pub fn box_from_ball(x: &Tensor, eps: f64, clip: Option<(f64, f64)>) -> Result<BoxBounds> {
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {eps}")));
    }
    let (min, max) = clip.unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
    Ok(BoxBounds {
        lo: x.map(|v| (v - eps).max(min)),
        hi: x.map(|v| (v + eps).min(max)),
    })
}

/// Image of a box under one layer.
pub fn propagate_interval(layer: &Layer, input: &BoxBounds) -> Result<BoxBounds> {
    match layer {
        Layer::Relu => Ok(BoxBounds {
            lo: input.lo.map(|v| v.max(0.0)),
            hi: input.hi.map(|v| v.max(0.0)),
        }),
        Layer::Flatten => Ok(BoxBounds {
            lo: flatten_batch(&input.lo)?,
            hi: flatten_batch(&input.hi)?,
        }),
        // Positive scaling is monotone.
        Layer::Normalize { .. } => Ok(BoxBounds {
            lo: layer.apply(&input.lo)?,
            hi: layer.apply(&input.hi)?,
        }),
        Layer::Affine { weight, bias } => {
            let c = flatten_batch(&input.center())?;
            let r = flatten_batch(&input.radius())?;
            let abs_w = weight.map(f64::abs);
            let mut c2 = kernels::matmul_nt(&c, weight)?;
            let m = bias.len();
            for (i, v) in c2.data_mut().iter_mut().enumerate() {
                *v += bias.data()[i % m];
            }
            let r2 = kernels::matmul_nt(&r, &abs_w)?;
            Ok(BoxBounds::from_center_radius(&c2, &r2))
        }
        Layer::Conv2d {
            weight,
            bias,
            stride,
            padding,
        } => {
            let abs_w = weight.map(f64::abs);
            let mut c2 = kernels::conv2d(&input.center(), weight, *stride, *padding)?;
            add_channel_bias(&mut c2, bias.data());
            let r2 = kernels::conv2d(&input.radius(), &abs_w, *stride, *padding)?;
            Ok(BoxBounds::from_center_radius(&c2, &r2))
        }
    }
}

/// Propagates a box through `net.layers[range]`.
pub fn propagate_range(net: &Network, input: &BoxBounds, range: Range<usize>) -> Result<BoxBounds> {
    let mut b = input.clone();
    for layer in &net.layers[range] {
        b = propagate_interval(layer, &b)?;
    }
    Ok(b)
}

/// Where [`ibp_bounds`] stops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundTarget {
    /// Output of the feature extractor (`layers[..split_index]`).
    ExtractorOutput,
    /// Logit differences `o - o_y` through the whole network.
    ElidedLogits,
}

/// Off-tape IBP for a batch with per-sample labels.
pub fn ibp_bounds(net: &Network, input: &BoxBounds, labels: &[usize], upto: BoundTarget) -> Result<BoxBounds> {
    match upto {
        BoundTarget::ExtractorOutput => propagate_range(net, input, net.extractor()),
        BoundTarget::ElidedLogits => {
            let last = net.layers.len() - 1;
            let pre = propagate_range(net, input, 0..last)?;
            elided_final_bounds(net, &pre, labels)
        }
    }
}

/// Bounds of `o - o_y` given a box on the input of the final affine layer.
pub fn elided_final_bounds(net: &Network, pre: &BoxBounds, labels: &[usize]) -> Result<BoxBounds> {
    let Some(Layer::Affine { weight, bias }) = net.layers.last() else {
        return Err(Error::InvalidArgument("final layer is not affine".into()));
    };
    let c = flatten_batch(&pre.center())?;
    let r = flatten_batch(&pre.radius())?;
    if labels.len() != c.rows() {
        return Err(Error::shape(
            "elided_final_bounds",
            format!("{} labels for batch of {}", labels.len(), c.rows()),
        ));
    }
    let k = net.num_classes;
    let width = weight.shape()[1];
    let mut lo = Vec::with_capacity(c.rows() * k);
    let mut hi = Vec::with_capacity(c.rows() * k);
    for (s, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::InvalidArgument(format!("label {y} out of range")));
        }
        let wy = weight.row(y);
        let (cs, rs) = (c.row(s), r.row(s));
        for i in 0..k {
            if i == y {
                lo.push(0.0);
                hi.push(0.0);
                continue;
            }
            let wi = weight.row(i);
            let mut center = bias.data()[i] - bias.data()[y];
            let mut radius = 0.0;
            for j in 0..width {
                let d = wi[j] - wy[j];
                center += d * cs[j];
                radius += d.abs() * rs[j];
            }
            lo.push(center - radius);
            hi.push(center + radius);
        }
    }
    Ok(BoxBounds {
        lo: Tensor::raw(vec![labels.len(), k], lo),
        hi: Tensor::raw(vec![labels.len(), k], hi),
    })
}

/// Box on a tape, held as center and radius nodes.
#[derive(Clone, Copy, Debug)]
pub struct BoxVars {
    pub center: Var,
    pub radius: Var,
}

impl BoxVars {
    /// Records a constant input box.
    pub fn constant(g: &mut Graph, b: &BoxBounds) -> Self {
        Self {
            center: g.constant(b.center()),
            radius: g.constant(b.radius()),
        }
    }

    pub fn lo(&self, g: &mut Graph) -> Result<Var> {
        g.sub(self.center, self.radius)
    }

    pub fn hi(&self, g: &mut Graph) -> Result<Var> {
        g.add(self.center, self.radius)
    }

    pub fn values(&self, g: &Graph) -> BoxBounds {
        BoxBounds::from_center_radius(g.value(self.center), g.value(self.radius))
    }
}

/// Records the interval image of one layer on the tape.
pub fn propagate_on_tape(g: &mut Graph, layer: &Layer, params: Option<(Var, Var)>, b: BoxVars) -> Result<BoxVars> {
    match layer {
        Layer::Relu => {
            let lo = b.lo(g)?;
            let hi = b.hi(g)?;
            let lo = g.relu(lo)?;
            let hi = g.relu(hi)?;
            let s = g.add(hi, lo)?;
            let d = g.sub(hi, lo)?;
            Ok(BoxVars {
                center: g.scale(s, 0.5)?,
                radius: g.scale(d, 0.5)?,
            })
        }
        Layer::Flatten | Layer::Normalize { .. } => {
            let center = layer.apply_on_tape(g, None, b.center)?;
            // Radius only scales: drop the mean shift.
            let radius = match layer {
                Layer::Normalize { mean, std } => {
                    let no_shift = Layer::Normalize {
                        mean: vec![0.0; mean.len()],
                        std: std.clone(),
                    };
                    no_shift.apply_on_tape(g, None, b.radius)?
                }
                _ => layer.apply_on_tape(g, None, b.radius)?,
            };
            Ok(BoxVars { center, radius })
        }
        Layer::Affine { .. } => {
            let (w, _) = params.ok_or_else(|| Error::InvalidArgument("unbound affine layer".into()))?;
            let center = layer.apply_on_tape(g, params, b.center)?;
            let abs_w = g.abs(w)?;
            let abs_wt = g.transpose(abs_w)?;
            let r = flatten_on_tape(g, b.radius)?;
            let radius = g.matmul(r, abs_wt)?;
            Ok(BoxVars { center, radius })
        }
        Layer::Conv2d { stride, padding, .. } => {
            let (w, _) = params.ok_or_else(|| Error::InvalidArgument("unbound conv layer".into()))?;
            let center = layer.apply_on_tape(g, params, b.center)?;
            let abs_w = g.abs(w)?;
            let radius = g.conv2d(b.radius, abs_w, *stride, *padding)?;
            Ok(BoxVars { center, radius })
        }
    }
}

/// Records IBP through `net.layers[range]`.
pub fn propagate_range_on_tape(
    g: &mut Graph,
    net: &Network,
    params: &BoundParams,
    input: BoxVars,
    range: Range<usize>,
) -> Result<BoxVars> {
    let mut b = input;
    for i in range {
        b = propagate_on_tape(g, &net.layers[i], params.layer(i), b)?;
    }
    Ok(b)
}

#[cfg(test)]
mod tests;
