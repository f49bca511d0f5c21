//! Exact worst-case logit differences for small ReLU networks by enumerating
//! activation patterns of the ReLUs that IBP cannot fix.

use super::lp::{self, LpOutcome};
use crate::error::{Error, Result};
use crate::interval::{box_from_ball, propagate_interval, BoxBounds};
use crate::net::{Layer, Network};
use crate::tensor::Tensor;

/// Default cap on IBP-unstable ReLUs.
pub const DEFAULT_BUDGET: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub enum OracleOutcome {
    Exact {
        /// `max o_t - o_y` over the box for each class `t`; 0 at the label.
        per_target: Vec<f64>,
        /// `max_{t != y}` of `per_target`.
        margin: f64,
        /// An input attaining `margin`.
        argmax: Vec<f64>,
        /// Activation patterns visited.
        patterns: usize,
    },
    /// More unstable ReLUs than the budget allows.
    Unknown { unstable: usize },
}

impl OracleOutcome {
    pub fn margin(&self) -> Option<f64> {
        match self {
            OracleOutcome::Exact { margin, .. } => Some(*margin),
            OracleOutcome::Unknown { .. } => None,
        }
    }
}

/// Affine map of the flattened input: `rows[k] . x + offset[k]`.
#[derive(Clone)]
struct Affine {
    rows: Vec<Vec<f64>>,
    offset: Vec<f64>,
}

impl Affine {
    fn identity(n: usize) -> Self {
        let rows = (0..n)
            .map(|i| {
                let mut r = vec![0.0; n];
                r[i] = 1.0;
                r
            })
            .collect();
        Self {
            rows,
            offset: vec![0.0; n],
        }
    }

    /// `self` followed by `next`.
    fn then(&self, next: &Affine) -> Affine {
        let n = self.rows.first().map_or(0, Vec::len);
        let mut rows = Vec::with_capacity(next.rows.len());
        let mut offset = Vec::with_capacity(next.rows.len());
        for (w, b) in next.rows.iter().zip(&next.offset) {
            let mut row = vec![0.0; n];
            let mut off = *b;
            for (k, &wk) in w.iter().enumerate() {
                if wk != 0.0 {
                    for (r, s) in row.iter_mut().zip(&self.rows[k]) {
                        *r += wk * s;
                    }
                    off += wk * self.offset[k];
                }
            }
            rows.push(row);
            offset.push(off);
        }
        Affine { rows, offset }
    }
}

/// Linear stage of the network, optionally followed by a ReLU.
struct Stage {
    map: Affine,
    relu: bool,
}

/// Matrix of a linear layer obtained by applying it to the zero input and
/// the standard basis.
fn layer_affine(layer: &Layer, in_shape: &[usize]) -> Result<Affine> {
    let d: usize = in_shape.iter().product();
    let mut data = vec![0.0; (d + 1) * d];
    for j in 0..d {
        data[(j + 1) * d + j] = 1.0;
    }
    let mut shape = vec![d + 1];
    shape.extend_from_slice(in_shape);
    let out = layer.apply(&Tensor::new(shape, data)?)?;
    let m = out.row_len();
    let offset = out.row(0).to_vec();
    let rows = (0..m)
        .map(|i| (0..d).map(|j| out.row(j + 1)[i] - offset[i]).collect())
        .collect();
    Ok(Affine { rows, offset })
}

fn linearize(net: &Network) -> Result<Vec<Stage>> {
    let shapes = net.layer_shapes()?;
    let mut stages = Vec::new();
    let mut pending: Option<Affine> = None;
    for (i, layer) in net.layers.iter().enumerate() {
        match layer {
            Layer::Flatten => {}
            Layer::Relu => {
                let n: usize = shapes[i].iter().product();
                let map = pending.take().unwrap_or_else(|| Affine::identity(n));
                stages.push(Stage { map, relu: true });
            }
            _ => {
                let a = layer_affine(layer, &shapes[i])?;
                pending = Some(match pending.take() {
                    Some(p) => p.then(&a),
                    None => a,
                });
            }
        }
    }
    let n: usize = shapes.last().unwrap().iter().product();
    let map = pending.unwrap_or_else(|| Affine::identity(n));
    stages.push(Stage { map, relu: false });
    Ok(stages)
}

/// IBP bounds at every ReLU input, flattened.
fn relu_input_bounds(net: &Network, input: &BoxBounds) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut out = Vec::new();
    let mut b = input.clone();
    for layer in &net.layers {
        if matches!(layer, Layer::Relu) {
            out.push((b.lo.data().to_vec(), b.hi.data().to_vec()));
        }
        b = propagate_interval(layer, &b)?;
    }
    Ok(out)
}

/// Number of ReLUs whose IBP input interval straddles zero.
pub fn unstable_relus(net: &Network, x: &Tensor, eps: f64, clip: Option<(f64, f64)>) -> Result<usize> {
    let input = box_from_ball(x, eps, clip)?;
    Ok(relu_input_bounds(net, &input)?
        .iter()
        .map(|(lo, hi)| lo.iter().zip(hi).filter(|&(&l, &h)| l < 0.0 && h > 0.0).count())
        .sum())
}

struct Search<'a> {
    stages: &'a [Stage],
    screen: &'a [(Vec<f64>, Vec<f64>)],
    lo: Vec<f64>,
    hi: Vec<f64>,
    center: Vec<f64>,
    radius: Vec<f64>,
    label: usize,
    cons: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    best: Vec<f64>,
    argmax: Vec<Option<Vec<f64>>>,
    patterns: usize,
}

impl Search<'_> {
    fn range(&self, row: &[f64], off: f64) -> (f64, f64) {
        let mid: f64 = row.iter().zip(&self.center).map(|(a, c)| a * c).sum::<f64>() + off;
        let spread: f64 = row.iter().zip(&self.radius).map(|(a, r)| a.abs() * r).sum();
        (mid - spread, mid + spread)
    }

    fn feasible(&self) -> bool {
        lp::solve(None, &self.cons, &self.rhs, &self.lo, &self.hi) != LpOutcome::Infeasible
    }

    fn visit(&mut self, s: usize, map: &Affine) {
        let stage = &self.stages[s];
        let pre = map.then(&stage.map);
        if !stage.relu {
            self.leaf(&pre);
            return;
        }
        let relu_idx = self.stages[..s].iter().filter(|st| st.relu).count();
        let (slo, shi) = &self.screen[relu_idx];
        let mut active = vec![false; pre.rows.len()];
        let mut open = Vec::new();
        for j in 0..pre.rows.len() {
            if slo[j] >= 0.0 {
                active[j] = true;
            } else if shi[j] > 0.0 {
                let (l, h) = self.range(&pre.rows[j], pre.offset[j]);
                if l >= 0.0 {
                    active[j] = true;
                } else if h > 0.0 {
                    open.push(j);
                }
            }
        }
        self.branch(s, &pre, &mut active, &open);
    }

    fn branch(&mut self, s: usize, pre: &Affine, active: &mut Vec<bool>, open: &[usize]) {
        let Some((&j, rest)) = open.split_first() else {
            let post = Affine {
                rows: pre
                    .rows
                    .iter()
                    .zip(active.iter())
                    .map(|(r, &a)| if a { r.clone() } else { vec![0.0; r.len()] })
                    .collect(),
                offset: pre.offset.iter().zip(active.iter()).map(|(&o, &a)| if a { o } else { 0.0 }).collect(),
            };
            self.visit(s + 1, &post);
            return;
        };
        for on in [true, false] {
            // active: pre_j >= 0, inactive: pre_j <= 0
            let sign = if on { -1.0 } else { 1.0 };
            self.cons.push(pre.rows[j].iter().map(|v| sign * v).collect());
            self.rhs.push(-sign * pre.offset[j]);
            if self.feasible() {
                active[j] = on;
                self.branch(s, pre, active, rest);
            }
            self.cons.pop();
            self.rhs.pop();
        }
        active[j] = false;
    }

    fn leaf(&mut self, logits: &Affine) {
        self.patterns += 1;
        let y = self.label;
        for t in (0..logits.rows.len()).filter(|&t| t != y) {
            let c: Vec<f64> = logits.rows[t].iter().zip(&logits.rows[y]).map(|(a, b)| a - b).collect();
            let d = logits.offset[t] - logits.offset[y];
            let (_, upper) = self.range(&c, d);
            if upper <= self.best[t] {
                continue;
            }
            let found = if self.cons.is_empty() {
                let x: Vec<f64> = c
                    .iter()
                    .zip(self.lo.iter().zip(&self.hi))
                    .zip(&self.center)
                    .map(|((&ci, (&l, &h)), &m)| match ci.partial_cmp(&0.0) {
                        Some(std::cmp::Ordering::Greater) => h,
                        Some(std::cmp::Ordering::Less) => l,
                        _ => m,
                    })
                    .collect();
                let v = c.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + d;
                Some((x, v))
            } else {
                match lp::solve(Some(&c), &self.cons, &self.rhs, &self.lo, &self.hi) {
                    LpOutcome::Optimal { x, value } => Some((x, value + d)),
                    LpOutcome::Infeasible => None,
                }
            };
            if let Some((x, v)) = found {
                if v > self.best[t] {
                    self.best[t] = v;
                    self.argmax[t] = Some(x);
                }
            }
        }
    }
}

/// Exact `max_{x' in B(x, eps)} o_t(x') - o_y(x')` for every class `t`, or
/// `Unknown` when more than `budget` ReLUs are IBP-unstable. `x` holds a
/// single sample.
pub fn exact_margin_oracle(
    net: &Network,
    x: &Tensor,
    label: usize,
    eps: f64,
    clip: Option<(f64, f64)>,
    budget: usize,
) -> Result<OracleOutcome> {
    if x.rows() != 1 {
        return Err(Error::InvalidArgument(format!("oracle takes one sample, got {}", x.rows())));
    }
    if label >= net.num_classes {
        return Err(Error::InvalidArgument(format!("label {label} out of range")));
    }
    let input = box_from_ball(x, eps, clip)?;
    let screen = relu_input_bounds(net, &input)?;
    let unstable: usize = screen
        .iter()
        .map(|(lo, hi)| lo.iter().zip(hi).filter(|&(&l, &h)| l < 0.0 && h > 0.0).count())
        .sum();
    if unstable > budget {
        return Ok(OracleOutcome::Unknown { unstable });
    }
    let stages = linearize(net)?;
    let lo = input.lo.data().to_vec();
    let hi = input.hi.data().to_vec();
    let k = net.num_classes;
    let mut search = Search {
        stages: &stages,
        screen: &screen,
        center: lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect(),
        radius: lo.iter().zip(&hi).map(|(l, h)| 0.5 * (h - l)).collect(),
        lo,
        hi,
        label,
        cons: Vec::new(),
        rhs: Vec::new(),
        best: vec![f64::NEG_INFINITY; k],
        argmax: vec![None; k],
        patterns: 0,
    };
    search.visit(0, &Affine::identity(x.row_len()));
    let mut per_target = search.best.clone();
    per_target[label] = 0.0;
    let (t, margin) = (0..k)
        .filter(|&t| t != label)
        .map(|t| (t, per_target[t]))
        .fold((label, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    let Some(argmax) = search.argmax.get(t).cloned().flatten() else {
        return Err(Error::Numeric("oracle found no feasible activation pattern".into()));
    };
    // The enumerated maximum must be realized by the network itself.
    let point = Tensor::new(x.shape().to_vec(), argmax.clone())?;
    let logits = net.forward(&point)?;
    let realized = logits.row(0)[t] - logits.row(0)[label];
    if (realized - margin).abs() > 1e-7 * (1.0 + margin.abs()) {
        return Err(Error::Numeric(format!(
            "oracle maximum {margin} not realized at its argmax ({realized})"
        )));
    }
    Ok(OracleOutcome::Exact {
        per_target,
        margin,
        argmax,
        patterns: search.patterns,
    })
}
