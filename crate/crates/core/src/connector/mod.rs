//! Gradient connector between a latent box and latent adversarial points.
//!
//! The forward value is the attack output `ẑ`, treated as data. The backward
//! pass routes `dL/dẑ_i` to `lo_i` and `hi_i` through a rectified-linear
//! pseudo-gradient, one coordinate at a time.

use crate::error::{Error, Result};
use crate::tensor::{BackwardRule, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConnectorParams {
    /// Width of the activation band as a fraction of the box width.
    /// `0` is the binary connector, `1` the linear one.
    pub c: f64,
    /// How close `ẑ` must be to a bound to count as "at" it when `c = 0`.
    pub tolerance_eq: f64,
}

impl Default for ConnectorParams {
    fn default() -> Self {
        Self {
            c: 0.5,
            tolerance_eq: 1e-9,
        }
    }
}

impl ConnectorParams {
    pub fn new(c: f64) -> Result<Self> {
        let p = Self { c, ..Self::default() };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.c) {
            return Err(Error::Config(format!("connector c must lie in [0, 1], got {}", self.c)));
        }
        if !(self.tolerance_eq >= 0.0) {
            return Err(Error::Config("connector tolerance must be >= 0".into()));
        }
        Ok(())
    }
}

/// `(∂ẑ/∂lo, ∂ẑ/∂hi)` for one coordinate.
pub fn connector_partials(lo: f64, hi: f64, z: f64, params: &ConnectorParams) -> Result<(f64, f64)> {
    if !(lo <= z && z <= hi) {
        return Err(Error::InvalidArgument(format!(
            "latent point {z} outside its box [{lo}, {hi}]"
        )));
    }
    if lo == hi {
        return Ok((0.5, 0.5));
    }
    if params.c == 0.0 {
        let at = |d: f64| if d.abs() <= params.tolerance_eq { 1.0 } else { 0.0 };
        return Ok((at(z - lo), at(hi - z)));
    }
    let band = params.c * (hi - lo);
    Ok((
        (1.0 - (z - lo) / band).max(0.0),
        (1.0 - (hi - z) / band).max(0.0),
    ))
}

/// Elementwise partials for whole tensors.
pub fn connector_partials_tensor(lo: &Tensor, hi: &Tensor, z: &Tensor, params: &ConnectorParams) -> Result<(Tensor, Tensor)> {
    if lo.shape() != hi.shape() || lo.shape() != z.shape() {
        return Err(Error::shape(
            "connector",
            format!("lo {:?}, hi {:?}, ẑ {:?}", lo.shape(), hi.shape(), z.shape()),
        ));
    }
    let mut dlo = Vec::with_capacity(z.len());
    let mut dhi = Vec::with_capacity(z.len());
    for ((&l, &h), &v) in lo.data().iter().zip(hi.data()).zip(z.data()) {
        let (a, b) = connector_partials(l, h, v, params)?;
        dlo.push(a);
        dhi.push(b);
    }
    Ok((
        Tensor::raw(z.shape().to_vec(), dlo),
        Tensor::raw(z.shape().to_vec(), dhi),
    ))
}

struct ConnectorRule {
    dlo: Tensor,
    dhi: Tensor,
}

impl BackwardRule for ConnectorRule {
    fn name(&self) -> &'static str {
        "connector"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![
            grad.zip_map(&self.dlo, |g, p| g * p),
            grad.zip_map(&self.dhi, |g, p| g * p),
        ])
    }
}

/// Records a connector node with inputs `lo`, `hi` and forward value `z`.
pub fn connector_node(g: &mut Graph, lo: Var, hi: Var, z: Tensor, params: &ConnectorParams) -> Result<Var> {
    params.validate()?;
    let (dlo, dhi) = connector_partials_tensor(g.value(lo), g.value(hi), &z, params)?;
    g.custom(&[lo, hi], z, Box::new(ConnectorRule { dlo, dhi }))
}

#[cfg(test)]
mod tests;
