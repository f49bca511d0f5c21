//! Certification, exact small-network oracles, adversarial evaluation and
//! the bound-tightness and gradient-variance experiments.

mod lp;
mod oracle;
mod variance;

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use lp::{solve as solve_lp, LpOutcome};
pub use oracle::{exact_margin_oracle, unstable_relus, OracleOutcome, DEFAULT_BUDGET};
pub use variance::{estimator_statistics, per_sample_terms, variance_theorem_check, PerSampleTerms, VarianceReport};

use crate::attack::{pgd_input_margin, pgd_input_targets, pgd_latent, sabr_select_region, AttackConfig, Estimator};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::interval::{box_from_ball, ibp_bounds, BoundTarget, BoxBounds};
use crate::net::Network;
use crate::tensor::Tensor;
use crate::train::{natural_accuracy, predicted};

/// `max_{i != y} v_i`.
pub fn margin_of(v: &[f64], y: usize) -> f64 {
    v.iter()
        .enumerate()
        .filter(|&(i, _)| i != y)
        .fold(f64::NEG_INFINITY, |m, (_, &x)| m.max(x))
}

fn ibp_upper(net: &Network, region: &BoxBounds, labels: &[usize]) -> Result<Vec<Vec<f64>>> {
    let hi = ibp_bounds(net, region, labels, BoundTarget::ElidedLogits)?.hi;
    Ok((0..labels.len()).map(|s| hi.row(s).to_vec()).collect())
}

/// Per-sample elided IBP upper bounds and whether all non-label entries are
/// negative.
pub fn certify_ibp(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    eps: f64,
    clip: Option<(f64, f64)>,
) -> Result<Vec<(bool, Vec<f64>)>> {
    let region = box_from_ball(x, eps, clip)?;
    Ok(ibp_upper(net, &region, labels)?
        .into_iter()
        .zip(labels)
        .map(|(u, &y)| (margin_of(&u, y) < 0.0, u))
        .collect())
}

const CHUNK: usize = 256;

fn chunked(data: &Dataset, mut f: impl FnMut(usize, &Tensor, &[usize]) -> Result<usize>) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for start in (0..data.len()).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(data.len())).collect();
        let (x, y) = data.batch(&idx);
        hits += f(start, &x, &y)?;
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Fraction of samples certified by IBP.
pub fn ibp_certified_accuracy(net: &Network, data: &Dataset, eps: f64, clip: Option<(f64, f64)>) -> Result<f64> {
    chunked(data, |_, x, y| Ok(certify_ibp(net, x, y, eps, clip)?.iter().filter(|c| c.0).count()))
}

/// Fraction of samples for which no targeted input attack finds a
/// non-negative logit difference. An upper bound on robust accuracy.
pub fn adversarial_accuracy(
    net: &Network,
    data: &Dataset,
    eps: f64,
    clip: Option<(f64, f64)>,
    cfg: &AttackConfig,
) -> Result<f64> {
    if eps == 0.0 {
        return natural_accuracy(net, data);
    }
    chunked(data, |start, x, y| {
        let c = cfg.with_seed(cfg.seed ^ start as u64);
        Ok(pgd_input_margin(net, x, y, eps, clip, &c)?.iter().filter(|&&m| m < 0.0).count())
    })
}

/// Ways of approximating the worst-case logit differences.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMethod {
    /// Sound box bound over the full ball.
    Ibp,
    /// IBP over SABR's adversarially placed box of radius `lambda * eps`.
    Sabr { lambda: f64 },
    /// Best targeted input attack (a feasible point, so a lower bound).
    Pgd,
    /// IBP to the split, then multi-target latent PGD.
    Taps,
}

impl BoundMethod {
    /// Method labels used in file names and reports.
    pub fn name(&self) -> &'static str {
        match self {
            BoundMethod::Ibp => "ibp",
            BoundMethod::Sabr { .. } => "sabr",
            BoundMethod::Pgd => "pgd",
            BoundMethod::Taps => "taps",
        }
    }
}

impl fmt::Display for BoundMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoundMethod::Sabr { lambda } => write!(f, "sabr:{lambda}"),
            m => f.write_str(m.name()),
        }
    }
}

impl FromStr for BoundMethod {
    type Err = Error;

    /// Accepts `ibp`, `pgd`, `taps`, `sabr` (lambda 0.4) and `sabr:LAMBDA`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ibp" => Ok(BoundMethod::Ibp),
            "pgd" => Ok(BoundMethod::Pgd),
            "taps" => Ok(BoundMethod::Taps),
            "sabr" => Ok(BoundMethod::Sabr { lambda: 0.4 }),
            _ => {
                let lambda = s
                    .strip_prefix("sabr:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .filter(|l| *l > 0.0 && *l <= 1.0)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown bound method '{s}'")))?;
                Ok(BoundMethod::Sabr { lambda })
            }
        }
    }
}

/// Attack settings for [`method_bound`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundConfig {
    pub pgd: AttackConfig,
    /// Places the SABR box.
    pub sabr_attack: AttackConfig,
    /// Latent attack for TAPS.
    pub taps_attack: AttackConfig,
    pub clip: Option<(f64, f64)>,
}

impl Default for BoundConfig {
    /// PGD with 50 steps and 3 restarts for every search.
    fn default() -> Self {
        let strong = AttackConfig {
            steps: 50,
            restarts: 3,
            ..AttackConfig::training()
        };
        Self {
            pgd: strong,
            sabr_attack: strong,
            taps_attack: strong,
            clip: Some((0.0, 1.0)),
        }
    }
}

impl BoundConfig {
    fn seeded(&self, seed: u64) -> Self {
        Self {
            pgd: self.pgd.with_seed(seed),
            sabr_attack: self.sabr_attack.with_seed(seed ^ 0x5ab5),
            taps_attack: self.taps_attack.with_seed(seed ^ 0x7a95),
            clip: self.clip,
        }
    }
}

/// Per-sample vectors approximating `max_{x' in B(x, eps)} o_i - o_y` for
/// every class `i`; the label entry is 0.
pub fn method_bound(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    eps: f64,
    method: BoundMethod,
    cfg: &BoundConfig,
) -> Result<Vec<Vec<f64>>> {
    let clip = cfg.clip;
    let zero_label = |mut rows: Vec<Vec<f64>>| {
        for (r, &y) in rows.iter_mut().zip(labels) {
            r[y] = 0.0;
        }
        rows
    };
    match method {
        BoundMethod::Ibp => Ok(zero_label(ibp_upper(net, &box_from_ball(x, eps, clip)?, labels)?)),
        BoundMethod::Sabr { lambda } => {
            let region = if eps > 0.0 {
                sabr_select_region(net, x, labels, eps, lambda * eps, clip, &cfg.sabr_attack)?
            } else {
                box_from_ball(x, 0.0, clip)?
            };
            Ok(zero_label(ibp_upper(net, &region, labels)?))
        }
        BoundMethod::Pgd => pgd_input_targets(net, x, labels, eps, clip, &cfg.pgd),
        BoundMethod::Taps => {
            if !net.has_classifier() {
                return method_bound(net, x, labels, eps, BoundMethod::Ibp, cfg);
            }
            let input = box_from_ball(x, eps, clip)?;
            let latent = ibp_bounds(net, &input, labels, BoundTarget::ExtractorOutput)?;
            let found = pgd_latent(net, net.classifier(), &latent, labels, None, Estimator::Multi, &cfg.taps_attack)?;
            let mut out = vec![vec![0.0; net.num_classes]; labels.len()];
            for (r, &(s, t)) in found.owners.iter().enumerate() {
                out[s][t] = found.values[r];
            }
            Ok(out)
        }
    }
}

/// Oracle result in a verdict.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleStatus {
    Exact,
    Unknown,
    Skipped,
}

/// Per-sample evaluation record, written as one JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleVerdict {
    pub id: usize,
    pub label: usize,
    pub natural_correct: bool,
    pub ibp_certified: bool,
    pub oracle: OracleStatus,
    pub exact_margin: Option<f64>,
    /// Largest logit difference found by the input attack.
    pub pgd_margin: f64,
    /// Per-method logit-difference vectors.
    pub bounds: BTreeMap<String, Vec<f64>>,
}

impl SampleVerdict {
    /// Certified by IBP or, where it resolved, by the exact oracle.
    pub fn certified(&self) -> bool {
        self.ibp_certified || self.exact_margin.is_some_and(|m| m < 0.0)
    }

    /// No attack point was found with a non-negative logit difference.
    pub fn adversarially_robust(&self) -> bool {
        self.pgd_margin < 0.0 && self.exact_margin.is_none_or(|m| m < 0.0)
    }
}

/// Settings for [`sample_verdicts`].
#[derive(Clone, Debug, PartialEq)]
pub struct VerdictConfig {
    pub methods: Vec<BoundMethod>,
    pub bounds: BoundConfig,
    /// Attack for `pgd_margin`.
    pub attack: AttackConfig,
    /// Unstable-ReLU budget; `None` skips the oracle.
    pub oracle_budget: Option<usize>,
    pub seed: u64,
    /// Worker threads; results do not depend on it.
    pub jobs: usize,
}

fn sample_seed(seed: u64, id: usize) -> u64 {
    seed ^ (id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn verdict_for(net: &Network, x: &Tensor, y: usize, id: usize, eps: f64, cfg: &VerdictConfig) -> Result<SampleVerdict> {
    let labels = [y];
    let seed = sample_seed(cfg.seed, id);
    let clip = cfg.bounds.clip;
    let logits = net.forward(x)?;
    let natural_correct = predicted(logits.row(0)) == y;
    let (ibp_certified, _) = certify_ibp(net, x, &labels, eps, clip)?.remove(0);
    let pgd_margin = pgd_input_margin(net, x, &labels, eps, clip, &cfg.attack.with_seed(seed))?[0];
    let bcfg = cfg.bounds.seeded(seed);
    let mut bounds = BTreeMap::new();
    for m in &cfg.methods {
        bounds.insert(m.to_string(), method_bound(net, x, &labels, eps, *m, &bcfg)?.remove(0));
    }
    let (oracle, exact_margin) = match cfg.oracle_budget {
        None => (OracleStatus::Skipped, None),
        Some(budget) => match exact_margin_oracle(net, x, y, eps, clip, budget)? {
            OracleOutcome::Exact { margin, .. } => (OracleStatus::Exact, Some(margin)),
            OracleOutcome::Unknown { .. } => (OracleStatus::Unknown, None),
        },
    };
    Ok(SampleVerdict {
        id,
        label: y,
        natural_correct,
        ibp_certified,
        oracle,
        exact_margin,
        pgd_margin,
        bounds,
    })
}

/// Verdicts for every sample, ordered by id. Each sample uses its own seed,
/// so the output is independent of `cfg.jobs`.
pub fn sample_verdicts(net: &Network, data: &Dataset, eps: f64, cfg: &VerdictConfig) -> Result<Vec<SampleVerdict>> {
    let n = data.len();
    let one = |id: usize| {
        let (x, y) = data.batch(&[id]);
        verdict_for(net, &x, y[0], id, eps, cfg)
    };
    let jobs = cfg.jobs.max(1).min(n.max(1));
    if jobs == 1 {
        return (0..n).map(one).collect();
    }
    let results: Vec<Result<Vec<SampleVerdict>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|w| {
                let one = &one;
                scope.spawn(move || (w..n).step_by(jobs).map(one).collect::<Result<Vec<_>>>())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("verdict worker panicked")).collect()
    });
    let mut all = Vec::with_capacity(n);
    for r in results {
        all.extend(r?);
    }
    all.sort_by_key(|v| v.id);
    Ok(all)
}

/// Verdicts as JSON lines.
pub fn verdicts_jsonl(verdicts: &[SampleVerdict]) -> Result<String> {
    let mut out = String::new();
    for v in verdicts {
        out.push_str(&serde_json::to_string(v)?);
        out.push('\n');
    }
    Ok(out)
}

/// Mean, mean absolute value and population variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub count: usize,
    pub mean: f64,
    pub mean_abs: f64,
    pub variance: f64,
    pub min: f64,
    pub max: f64,
}

impl ErrorStats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        Self {
            count: values.len(),
            mean,
            mean_abs: values.iter().map(|v| v.abs()).sum::<f64>() / n,
            variance: values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistBin {
    pub left: f64,
    pub right: f64,
    pub count: usize,
}

/// Equal-width histogram over `[lo, hi]`; values outside are clamped into
/// the end bins.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Vec<HistBin>> {
    if bins == 0 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!("bad histogram range [{lo}, {hi}] with {bins} bins")));
    }
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<HistBin> = (0..bins)
        .map(|b| HistBin {
            left: lo + b as f64 * width,
            right: if b + 1 == bins { hi } else { lo + (b + 1) as f64 * width },
            count: 0,
        })
        .collect();
    for &v in values {
        let b = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        out[b].count += 1;
    }
    Ok(out)
}

/// Histogram as CSV with columns `bin_left, bin_right, count`.
pub fn histogram_csv(bins: &[HistBin]) -> String {
    let mut out = String::from("bin_left,bin_right,count\n");
    for b in bins {
        let _ = writeln!(out, "{:?},{:?},{}", b.left, b.right, b.count);
    }
    out
}

/// Errors `method margin - exact margin` over the samples where the oracle
/// resolved, keyed by method name.
pub fn tightness_errors(verdicts: &[SampleVerdict]) -> BTreeMap<String, Vec<f64>> {
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for v in verdicts {
        let Some(exact) = v.exact_margin else { continue };
        for (name, vec) in &v.bounds {
            out.entry(name.clone()).or_default().push(margin_of(vec, v.label) - exact);
        }
    }
    out
}
