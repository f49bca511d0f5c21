//! Define-by-run reverse-mode tape.
//!
//! A [`Graph`] records every primitive applied to its variables. Values are
//! computed eagerly; [`Graph::backward`] walks the recorded nodes in reverse
//! creation order, which is a valid topological order because a node can only
//! reference nodes that already exist.
//!
//! Nodes that do not depend on any gradient-requiring leaf are marked as
//! constants and skipped during the backward sweep.

use std::fmt;

use super::kernels::{self, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// The built-in differentiable operations.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    /// `[m,k] x [k,n]`.
    MatMul,
    Transpose,
    /// `[n,m] + [m]`, bias broadcast over rows.
    AddBias,
    /// `[N,C,H,W] + [C]`.
    AddChannelBias,
    Conv2d { stride: usize, padding: usize },
    Relu,
    Abs,
    MaxScalar(f64),
    Exp,
    Log,
    Sum,
    Mean,
    Clamp { lo: f64, hi: f64 },
    Scale(f64),
    AddScalar(f64),
    Reshape(Vec<usize>),
    /// Row-wise log-sum-exp of a 2-D tensor, `[n,m] -> [n]`.
    LogSumExp,
}

impl Primitive {
    fn arity(&self) -> usize {
        match self {
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::Div
            | Primitive::MatMul
            | Primitive::AddBias
            | Primitive::AddChannelBias
            | Primitive::Conv2d { .. } => 2,
            _ => 1,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::AddBias => "add_bias",
            Primitive::AddChannelBias => "add_channel_bias",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::Relu => "relu",
            Primitive::Abs => "abs",
            Primitive::MaxScalar(_) => "max_scalar",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Clamp { .. } => "clamp",
            Primitive::Scale(_) => "scale",
            Primitive::AddScalar(_) => "add_scalar",
            Primitive::Reshape(_) => "reshape",
            Primitive::LogSumExp => "logsumexp",
        }
    }
}

/// A user-supplied backward rule for nodes whose forward value is computed
/// outside the tape.
pub trait BackwardRule {
    fn name(&self) -> &'static str;

    /// Maps the output gradient to one gradient per input, each shaped like
    /// the corresponding input value.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>>;
}

enum Op {
    Leaf,
    Prim(Primitive),
    Custom(Box<dyn BackwardRule>),
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Leaf => write!(f, "Leaf"),
            Op::Prim(p) => write!(f, "{p:?}"),
            Op::Custom(r) => write!(f, "Custom({})", r.name()),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<Var>,
    requires_grad: bool,
}

/// Tape of recorded operations.
pub struct Graph {
    nodes: Vec<Node>,
    checked: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// New tape that rejects non-finite intermediate values.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            checked: true,
        }
    }

    /// New tape that skips the per-node finiteness scan.
    pub fn unchecked() -> Self {
        Self {
            nodes: Vec::new(),
            checked: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, Vec::new(), requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: Vec<Var>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_var(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::InvalidArgument(format!("unknown node id {}", v.0)));
        }
        Ok(())
    }

    /// Applies a primitive, recording it on the tape.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != prim.arity() {
            return Err(Error::shape(
                prim.name(),
                format!("expected {} inputs, got {}", prim.arity(), inputs.len()),
            ));
        }
        for &v in inputs {
            self.check_var(v)?;
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = forward(&prim, &values)?;
        if self.checked && !out.all_finite() {
            return Err(Error::NonFinite(format!(
                "output of {} with input shapes {:?}",
                prim.name(),
                values.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>()
            )));
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(out, Op::Prim(prim), inputs.to_vec(), rg))
    }

    /// Records a node whose value was computed elsewhere and whose gradient is
    /// given by `rule`.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, rule: Box<dyn BackwardRule>) -> Result<Var> {
        for &v in inputs {
            self.check_var(v)?;
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, Op::Custom(rule), inputs.to_vec(), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Div, &[a, b])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Transpose, &[a])
    }
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::AddBias, &[x, b])
    }
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::AddChannelBias, &[x, b])
    }
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        self.apply(Primitive::Conv2d { stride, padding }, &[x, w])
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[x])
    }
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Abs, &[x])
    }
    pub fn max_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.apply(Primitive::MaxScalar(s), &[x])
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[x])
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[x])
    }
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[x])
    }
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[x])
    }
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(Primitive::Clamp { lo, hi }, &[x])
    }
    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        self.apply(Primitive::Scale(k), &[x])
    }
    pub fn add_scalar(&mut self, x: Var, k: f64) -> Result<Var> {
        self.apply(Primitive::AddScalar(k), &[x])
    }
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Primitive::Reshape(shape.to_vec()), &[x])
    }
    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::LogSumExp, &[x])
    }

    /// Signed distances to every non-differentiable point recorded on the
    /// tape: ReLU/abs inputs, max-with-scalar offsets and clamp edges.
    pub fn kink_quantities(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for node in &self.nodes {
            let Op::Prim(p) = &node.op else { continue };
            let x = || self.nodes[node.inputs[0].0].value.data().iter().copied();
            match p {
                Primitive::Relu | Primitive::Abs => out.extend(x()),
                Primitive::MaxScalar(s) => out.extend(x().map(|v| v - s)),
                Primitive::Clamp { lo, hi } => {
                    out.extend(x().map(|v| v - lo));
                    out.extend(x().map(|v| v - hi));
                }
                _ => {}
            }
        }
        out
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.check_var(root)?;
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", self.nodes[root.0].value.shape()),
            ));
        }
        self.backward_with(root, Tensor::full(self.nodes[root.0].value.shape(), 1.0))
    }

    /// Reverse sweep seeded with an explicit output gradient.
    pub fn backward_with(&self, root: Var, seed: Tensor) -> Result<Gradients> {
        self.check_var(root)?;
        if seed.shape() != self.nodes[root.0].value.shape() {
            return Err(Error::shape("backward", "seed shape differs from root"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed);
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad || node.inputs.is_empty() {
                grads[id] = Some(g);
                continue;
            }
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let input_grads = match &node.op {
                Op::Leaf => unreachable!("leaf with inputs"),
                Op::Prim(p) => backward_prim(p, &inputs, &node.value, &g)?,
                Op::Custom(rule) => {
                    let gs = rule.backward(&inputs, &node.value, &g)?;
                    if gs.len() != inputs.len()
                        || gs.iter().zip(&inputs).any(|(a, b)| a.shape() != b.shape())
                    {
                        return Err(Error::shape(
                            rule.name(),
                            "custom backward returned mismatched gradients",
                        ));
                    }
                    gs
                }
            };
            for (v, gi) in node.inputs.iter().zip(input_grads) {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zeros when `v` does not
    /// influence the root.
    pub fn get(&self, v: Var) -> Tensor {
        match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads.get_mut(v.0).and_then(Option::take) {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn binary_shape_check(p: &Primitive, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            p.name(),
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn forward(p: &Primitive, x: &[&Tensor]) -> Result<Tensor> {
    let a = x[0];
    Ok(match p {
        Primitive::Add => {
            binary_shape_check(p, a, x[1])?;
            a.zip_map(x[1], |u, v| u + v)
        }
        Primitive::Sub => {
            binary_shape_check(p, a, x[1])?;
            a.zip_map(x[1], |u, v| u - v)
        }
        Primitive::Mul => {
            binary_shape_check(p, a, x[1])?;
            a.zip_map(x[1], |u, v| u * v)
        }
        Primitive::Div => {
            binary_shape_check(p, a, x[1])?;
            a.zip_map(x[1], |u, v| u / v)
        }
        Primitive::MatMul => kernels::matmul(a, x[1])?,
        Primitive::Transpose => kernels::transpose(a)?,
        Primitive::AddBias => {
            let b = x[1];
            if a.ndim() != 2 || b.ndim() != 1 || a.shape()[1] != b.len() {
                return Err(Error::shape(
                    p.name(),
                    format!("{:?} + {:?}", a.shape(), b.shape()),
                ));
            }
            let m = b.len();
            let mut out = a.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += b.data()[i % m];
            }
            out
        }
        Primitive::AddChannelBias => {
            let b = x[1];
            if a.ndim() != 4 || b.ndim() != 1 || a.shape()[1] != b.len() {
                return Err(Error::shape(
                    p.name(),
                    format!("{:?} + {:?}", a.shape(), b.shape()),
                ));
            }
            let (c, hw) = (a.shape()[1], a.shape()[2] * a.shape()[3]);
            let mut out = a.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += b.data()[(i / hw) % c];
            }
            out
        }
        Primitive::Conv2d { stride, padding } => kernels::conv2d(a, x[1], *stride, *padding)?,
        Primitive::Relu => a.map(|v| v.max(0.0)),
        Primitive::Abs => a.map(f64::abs),
        Primitive::MaxScalar(s) => a.map(|v| v.max(*s)),
        Primitive::Exp => a.map(f64::exp),
        Primitive::Log => a.map(f64::ln),
        Primitive::Sum => Tensor::scalar(a.sum()),
        Primitive::Mean => Tensor::scalar(a.sum() / a.len() as f64),
        Primitive::Clamp { lo, hi } => a.map(|v| v.clamp(*lo, *hi)),
        Primitive::Scale(k) => a.map(|v| v * k),
        Primitive::AddScalar(k) => a.map(|v| v + k),
        Primitive::Reshape(shape) => a.reshape(shape)?,
        Primitive::LogSumExp => {
            if a.ndim() != 2 {
                return Err(Error::shape(p.name(), format!("{:?}", a.shape())));
            }
            let out: Vec<f64> = (0..a.rows()).map(|i| logsumexp(a.row(i))).collect();
            Tensor::raw(vec![a.rows()], out)
        }
    })
}

/// Max-shifted log-sum-exp.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn backward_prim(p: &Primitive, x: &[&Tensor], out: &Tensor, g: &Tensor) -> Result<Vec<Tensor>> {
    let a = x[0];
    Ok(match p {
        Primitive::Add => vec![g.clone(), g.clone()],
        Primitive::Sub => vec![g.clone(), g.map(|v| -v)],
        Primitive::Mul => vec![g.zip_map(x[1], |u, v| u * v), g.zip_map(a, |u, v| u * v)],
        Primitive::Div => {
            let b = x[1];
            let ga = g.zip_map(b, |u, v| u / v);
            let mut gb = g.zip_map(out, |u, o| u * o);
            for (v, bv) in gb.data_mut().iter_mut().zip(b.data()) {
                *v = -*v / bv;
            }
            vec![ga, gb]
        }
        Primitive::MatMul => {
            let b = x[1];
            vec![
                kernels::matmul(g, &kernels::transpose(b)?)?,
                kernels::matmul(&kernels::transpose(a)?, g)?,
            ]
        }
        Primitive::Transpose => vec![kernels::transpose(g)?],
        Primitive::AddBias => {
            let m = x[1].len();
            let mut gb = vec![0.0; m];
            for (i, v) in g.data().iter().enumerate() {
                gb[i % m] += v;
            }
            vec![g.clone(), Tensor::raw(vec![m], gb)]
        }
        Primitive::AddChannelBias => {
            let (c, hw) = (a.shape()[1], a.shape()[2] * a.shape()[3]);
            let mut gb = vec![0.0; c];
            for (i, v) in g.data().iter().enumerate() {
                gb[(i / hw) % c] += v;
            }
            vec![g.clone(), Tensor::raw(vec![c], gb)]
        }
        Primitive::Conv2d { stride, padding } => {
            let (gx, gw) = kernels::conv2d_backward(a, x[1], g, *stride, *padding)?;
            vec![gx, gw]
        }
        Primitive::Relu => vec![g.zip_map(a, |u, v| if v > 0.0 { u } else { 0.0 })],
        Primitive::Abs => vec![g.zip_map(a, |u, v| {
            if v > 0.0 {
                u
            } else if v < 0.0 {
                -u
            } else {
                0.0
            }
        })],
        Primitive::MaxScalar(s) => vec![g.zip_map(a, |u, v| if v > *s { u } else { 0.0 })],
        Primitive::Exp => vec![g.zip_map(out, |u, o| u * o)],
        Primitive::Log => vec![g.zip_map(a, |u, v| u / v)],
        Primitive::Sum => vec![Tensor::full(a.shape(), g.item())],
        Primitive::Mean => vec![Tensor::full(a.shape(), g.item() / a.len() as f64)],
        Primitive::Clamp { lo, hi } => vec![g.zip_map(a, |u, v| {
            if v > *lo && v < *hi {
                u
            } else {
                0.0
            }
        })],
        Primitive::Scale(k) => vec![g.map(|u| u * k)],
        Primitive::AddScalar(_) => vec![g.clone()],
        Primitive::Reshape(_) => vec![g.reshape(a.shape())?],
        Primitive::LogSumExp => {
            let m = a.shape()[1];
            let mut ga = a.clone();
            for i in 0..a.rows() {
                let lse = out.data()[i];
                let gi = g.data()[i];
                for v in &mut ga.data_mut()[i * m..(i + 1) * m] {
                    *v = gi * (*v - lse).exp();
                }
            }
            vec![ga]
        }
    })
}

/// Geometry helper re-exported for layers that need output shapes.
pub fn conv_output_shape(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Vec<usize>> {
    Ok(ConvGeometry::new(input, weight, stride, padding)?.output_shape())
}
