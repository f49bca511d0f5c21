//! PGD over input balls and latent boxes, and SABR region selection.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interval::{box_from_ball, BoxBounds};
use crate::net::Network;
use crate::tensor::{logsumexp, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSize {
    /// `2 * radius / steps` per coordinate.
    Auto,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    CrossEntropy,
    /// Maximize `o_i - o_y` for the given class `i`.
    LogitDiff(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Uniform in the feasible box for every restart.
    Random,
    /// First restart starts at the clean point (input) or the box center
    /// (latent); later restarts are uniform.
    Clean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub steps: usize,
    pub restarts: usize,
    pub step_size: StepSize,
    pub objective: Objective,
    pub init: Init,
    pub seed: u64,
}

impl AttackConfig {
    /// 8 steps, 1 restart.
    pub fn training() -> Self {
        Self {
            steps: 8,
            restarts: 1,
            step_size: StepSize::Auto,
            objective: Objective::CrossEntropy,
            init: Init::Random,
            seed: 0,
        }
    }

    /// 200 steps, 5 restarts.
    pub fn evaluation() -> Self {
        Self {
            steps: 200,
            restarts: 5,
            ..Self::training()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.restarts == 0 {
            return Err(Error::Config("attack needs steps >= 1 and restarts >= 1".into()));
        }
        if let StepSize::Fixed(eta) = self.step_size {
            if !(eta > 0.0) {
                return Err(Error::Config(format!("attack step size must be > 0, got {eta}")));
            }
        }
        Ok(())
    }
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self::training()
    }
}

/// Per-row objective: cross-entropy against `label`, or `o_t - o_label`.
#[derive(Clone, Copy, Debug)]
struct RowGoal {
    label: usize,
    target: Option<usize>,
}

fn objective_values(logits: &Tensor, goals: &[RowGoal]) -> Vec<f64> {
    goals
        .iter()
        .enumerate()
        .map(|(r, goal)| {
            let row = logits.row(r);
            let oy = row[goal.label];
            match goal.target {
                Some(t) => row[t] - oy,
                None => {
                    let diffs: Vec<f64> = row.iter().map(|o| o - oy).collect();
                    logsumexp(&diffs)
                }
            }
        })
        .collect()
}

fn objective_seed(logits: &Tensor, goals: &[RowGoal]) -> Tensor {
    let k = logits.row_len();
    let mut seed = vec![0.0; logits.len()];
    for (r, goal) in goals.iter().enumerate() {
        let out = &mut seed[r * k..(r + 1) * k];
        match goal.target {
            Some(t) => {
                out[t] += 1.0;
                out[goal.label] -= 1.0;
            }
            None => {
                let row = logits.row(r);
                let lse = logsumexp(row);
                for (o, &v) in out.iter_mut().zip(row) {
                    *o = (v - lse).exp();
                }
                out[goal.label] -= 1.0;
            }
        }
    }
    Tensor::raw(logits.shape().to_vec(), seed)
}

/// Logits and the gradient of the summed row objectives with respect to `z`.
fn objective_gradient(net: &Network, range: Range<usize>, z: &Tensor, goals: &[RowGoal]) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let params = net.bind(&mut g, false);
    let zv = g.leaf(z.clone(), true);
    let out = net.forward_on_tape(&mut g, &params, zv, range)?;
    let logits = g.value(out).clone();
    let seed = objective_seed(&logits, goals);
    let grads = g.backward_with(out, seed)?;
    Ok((logits, grads.get(zv)))
}

fn uniform_in(lo: &Tensor, hi: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let data = lo
        .data()
        .iter()
        .zip(hi.data())
        .map(|(&l, &h)| if h > l { rng.gen_range(l..=h) } else { l })
        .collect();
    Tensor::raw(lo.shape().to_vec(), data)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Best point per row and its objective value.
struct Search {
    points: Tensor,
    values: Vec<f64>,
}

/// Signed-gradient ascent on `goals` inside `[lo, hi]`, keeping the best
/// iterate per row across all steps and restarts.
fn pgd_box(
    net: &Network,
    range: Range<usize>,
    bounds: &BoxBounds,
    clean: &Tensor,
    eta: &Tensor,
    goals: &[RowGoal],
    cfg: &AttackConfig,
) -> Result<Search> {
    cfg.validate()?;
    let (lo, hi) = (&bounds.lo, &bounds.hi);
    let rows = lo.rows();
    let w = lo.row_len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let clean = clean.zip_map(lo, f64::max).zip_map(hi, f64::min);
    let mut best = clean.clone();
    let mut best_val = vec![f64::NEG_INFINITY; rows];
    let mut keep = |z: &Tensor, vals: &[f64], best: &mut Tensor| {
        for r in 0..rows {
            if vals[r] > best_val[r] {
                best_val[r] = vals[r];
                best.data_mut()[r * w..(r + 1) * w].copy_from_slice(z.row(r));
            }
        }
    };
    for restart in 0..cfg.restarts {
        let mut z = if restart == 0 && cfg.init == Init::Clean {
            clean.clone()
        } else {
            uniform_in(lo, hi, &mut rng)
        };
        for _ in 0..cfg.steps {
            debug_assert!(bounds.contains(&z, 0.0));
            let (logits, grad) = objective_gradient(net, range.clone(), &z, goals)?;
            keep(&z, &objective_values(&logits, goals), &mut best);
            for (i, v) in z.data_mut().iter_mut().enumerate() {
                let stepped = *v + eta.data()[i] * sign(grad.data()[i]);
                *v = stepped.max(lo.data()[i]).min(hi.data()[i]);
            }
        }
        debug_assert!(bounds.contains(&z, 0.0));
        let logits = net.forward_range(&z, range.clone())?;
        keep(&z, &objective_values(&logits, goals), &mut best);
    }
    Ok(Search {
        points: best,
        values: best_val,
    })
}

fn step_tensor(cfg: &AttackConfig, radius: impl Fn(usize) -> f64, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|i| match cfg.step_size {
            StepSize::Auto => 2.0 * radius(i) / cfg.steps as f64,
            StepSize::Fixed(eta) => eta,
        })
        .collect();
    Tensor::raw(shape.to_vec(), data)
}

fn check_labels(net: &Network, labels: &[usize], rows: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape("attack", format!("{} labels for batch of {rows}", labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= net.num_classes) {
        return Err(Error::InvalidArgument(format!("label {y} out of range")));
    }
    Ok(())
}

fn input_goals(cfg: &AttackConfig, labels: &[usize]) -> Vec<RowGoal> {
    labels
        .iter()
        .map(|&label| RowGoal {
            label,
            target: match cfg.objective {
                Objective::CrossEntropy => None,
                Objective::LogitDiff(t) => Some(t),
            },
        })
        .collect()
}

/// Strongest point found in `B(x, eps)` (intersected with `clip`).
pub fn pgd_input(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    eps: f64,
    clip: Option<(f64, f64)>,
    cfg: &AttackConfig,
) -> Result<Tensor> {
    check_labels(net, labels, x.rows())?;
    if let Objective::LogitDiff(t) = cfg.objective {
        if t >= net.num_classes {
            return Err(Error::InvalidArgument(format!("target {t} out of range")));
        }
    }
    let bounds = box_from_ball(x, eps, clip)?;
    if eps == 0.0 {
        return Ok(x.clone());
    }
    let eta = step_tensor(cfg, |_| eps, x.shape());
    let goals = input_goals(cfg, labels);
    Ok(pgd_box(net, 0..net.layers.len(), &bounds, x, &eta, &goals, cfg)?.points)
}

/// Largest logit difference `max_{i != y} o_i - o_y` found by one targeted
/// input attack per wrong class.
pub fn pgd_input_margin(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    eps: f64,
    clip: Option<(f64, f64)>,
    cfg: &AttackConfig,
) -> Result<Vec<f64>> {
    let per_target = pgd_input_targets(net, x, labels, eps, clip, cfg)?;
    Ok(per_target
        .iter()
        .zip(labels)
        .map(|(row, &y)| {
            row.iter()
                .enumerate()
                .filter(|&(i, _)| i != y)
                .fold(f64::NEG_INFINITY, |m, (_, &v)| m.max(v))
        })
        .collect())
}

/// Per-sample vectors of the best `o_t - o_y` found by a targeted input
/// attack on each wrong class `t`; the label entry is 0.
pub fn pgd_input_targets(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    eps: f64,
    clip: Option<(f64, f64)>,
    cfg: &AttackConfig,
) -> Result<Vec<Vec<f64>>> {
    check_labels(net, labels, x.rows())?;
    let k = net.num_classes;
    let (owners, goals) = target_rows(labels, k, None);
    let idx: Vec<usize> = owners.iter().map(|&(s, _)| s).collect();
    let xr = x.select_rows(&idx);
    let bounds = box_from_ball(&xr, eps, clip)?;
    let eta = step_tensor(cfg, |_| eps, xr.shape());
    let search = pgd_box(net, 0..net.layers.len(), &bounds, &xr, &eta, &goals, cfg)?;
    let mut out = vec![vec![0.0; k]; labels.len()];
    for (r, &(s, t)) in owners.iter().enumerate() {
        out[s][t] = search.values[r];
    }
    Ok(out)
}

/// Rows of a per-target attack: `(sample, target)` owners and their goals.
fn target_rows(labels: &[usize], k: usize, targets: Option<&[usize]>) -> (Vec<(usize, usize)>, Vec<RowGoal>) {
    let mut owners = Vec::new();
    let mut goals = Vec::new();
    for (s, &label) in labels.iter().enumerate() {
        let all: Vec<usize> = match targets {
            Some(t) => t.to_vec(),
            None => (0..k).collect(),
        };
        for t in all.into_iter().filter(|&t| t != label) {
            owners.push((s, t));
            goals.push(RowGoal { label, target: Some(t) });
        }
    }
    (owners, goals)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// One point per sample maximizing cross-entropy.
    Single,
    /// One point per sample and wrong class maximizing that logit difference.
    Multi,
}

/// Latent adversarial points. Row `r` belongs to `owners[r] = (sample,
/// target)`; for the single estimator the target is the sample's label.
#[derive(Clone, Debug)]
pub struct LatentAttack {
    pub points: Tensor,
    pub owners: Vec<(usize, usize)>,
    /// Objective value at each point (logit difference or cross-entropy).
    pub values: Vec<f64>,
}

/// PGD inside a latent box through `net.layers[classifier]`.
pub fn pgd_latent(
    net: &Network,
    classifier: Range<usize>,
    latent: &BoxBounds,
    labels: &[usize],
    targets: Option<&[usize]>,
    estimator: Estimator,
    cfg: &AttackConfig,
) -> Result<LatentAttack> {
    check_labels(net, labels, latent.lo.rows())?;
    let (owners, goals) = match estimator {
        Estimator::Single => (
            labels.iter().enumerate().map(|(s, &y)| (s, y)).collect::<Vec<_>>(),
            labels.iter().map(|&label| RowGoal { label, target: None }).collect::<Vec<_>>(),
        ),
        Estimator::Multi => target_rows(labels, net.num_classes, targets),
    };
    if let Some(t) = targets.and_then(|t| t.iter().find(|&&t| t >= net.num_classes)) {
        return Err(Error::InvalidArgument(format!("target {t} out of range")));
    }
    let idx: Vec<usize> = owners.iter().map(|&(s, _)| s).collect();
    let bounds = if estimator == Estimator::Single {
        latent.clone()
    } else {
        latent.select_rows(&idx)
    };
    if owners.is_empty() {
        return Ok(LatentAttack {
            points: bounds.lo,
            owners,
            values: Vec::new(),
        });
    }
    let width = bounds.hi.zip_map(&bounds.lo, |h, l| h - l);
    let eta = step_tensor(cfg, |i| 0.5 * width.data()[i], width.shape());
    let center = bounds.center();
    let search = pgd_box(net, classifier, &bounds, &center, &eta, &goals, cfg)?;
    Ok(LatentAttack {
        points: search.points,
        owners,
        values: search.values,
    })
}

/// SABR's propagation region: a `tau`-box around an adversarial center
/// found in `B(x, eps - tau)`, always inside `B(x, eps)`.
pub fn sabr_select_region(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    eps: f64,
    tau: f64,
    clip: Option<(f64, f64)>,
    cfg: &AttackConfig,
) -> Result<BoxBounds> {
    if !(tau > 0.0 && tau <= eps) {
        return Err(Error::InvalidArgument(format!(
            "SABR needs 0 < tau <= eps, got tau = {tau}, eps = {eps}"
        )));
    }
    if tau == eps {
        return box_from_ball(x, eps, clip);
    }
    let center = pgd_input(net, x, labels, eps - tau, clip, cfg)?;
    let outer = box_from_ball(x, eps, clip)?;
    let inner = box_from_ball(&center, tau, clip)?;
    Ok(BoxBounds {
        lo: inner.lo.zip_map(&outer.lo, f64::max),
        hi: inner.hi.zip_map(&outer.hi, f64::min),
    })
}

#[cfg(test)]
mod tests;
