//! Training losses: natural and adversarial cross-entropy, IBP, TAPS, SABR,
//! STAPS, the gradient-scaled product objective and the annealing
//! regularizer.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::attack::{pgd_input, pgd_latent, sabr_select_region, AttackConfig, Estimator, LatentAttack};
use crate::connector::{connector_node, ConnectorParams};
use crate::error::{Error, Result};
use crate::interval::{box_from_ball, propagate_on_tape, propagate_range_on_tape, BoxBounds, BoxVars};
use crate::net::{flatten_on_tape, BoundParams, Layer, Network};
use crate::tensor::{logsumexp, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Natural,
    PgdAt,
    Ibp,
    Taps,
    Sabr,
    Staps,
}

impl LossKind {
    pub fn uses_taps(self) -> bool {
        matches!(self, LossKind::Taps | LossKind::Staps)
    }

    pub fn uses_region(self) -> bool {
        matches!(self, LossKind::Sabr | LossKind::Staps)
    }

    pub fn is_certified(self) -> bool {
        !matches!(self, LossKind::Natural | LossKind::PgdAt)
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "natural" => LossKind::Natural,
            "pgd-at" | "pgd" => LossKind::PgdAt,
            "ibp" => LossKind::Ibp,
            "taps" => LossKind::Taps,
            "sabr" => LossKind::Sabr,
            "staps" => LossKind::Staps,
            _ => return Err(Error::Config(format!("unknown loss '{s}'"))),
        })
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Natural => "natural",
            LossKind::PgdAt => "pgd-at",
            LossKind::Ibp => "ibp",
            LossKind::Taps => "taps",
            LossKind::Sabr => "sabr",
            LossKind::Staps => "staps",
        })
    }
}

/// Everything a loss evaluation needs besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    pub estimator: Estimator,
    /// `alpha / (1 - alpha)`; `f64::INFINITY` selects `alpha = 1`.
    pub w_taps: f64,
    pub connector: ConnectorParams,
    /// Latent attack for TAPS/STAPS and input attack for PGD-AT.
    pub attack: AttackConfig,
    /// Attack used to place the SABR/STAPS region.
    pub region_attack: AttackConfig,
    /// `tau / eps` for SABR and STAPS.
    pub tau_ratio: f64,
    pub clip: Option<(f64, f64)>,
    /// Weight of the `sum |theta|` penalty.
    pub l1: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Taps,
            estimator: Estimator::Multi,
            w_taps: 5.0,
            connector: ConnectorParams::default(),
            attack: AttackConfig::training(),
            region_attack: AttackConfig::training(),
            tau_ratio: 0.4,
            clip: Some((0.0, 1.0)),
            l1: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.connector.validate()?;
        self.attack.validate()?;
        self.region_attack.validate()?;
        alpha_from_w(self.w_taps)?;
        if self.kind.uses_region() && !(self.tau_ratio > 0.0 && self.tau_ratio <= 1.0) {
            return Err(Error::Config(format!("tau/eps must lie in (0, 1], got {}", self.tau_ratio)));
        }
        if !(self.l1 >= 0.0) {
            return Err(Error::Config("l1 weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// `alpha = w / (1 + w)`, with `w = inf` mapped to `alpha = 1`.
pub fn alpha_from_w(w: f64) -> Result<f64> {
    if w == f64::INFINITY {
        return Ok(1.0);
    }
    if !(w >= 0.0) || !w.is_finite() {
        return Err(Error::Config(format!("w_taps must be >= 0 or inf, got {w}")));
    }
    Ok(w / (1.0 + w))
}

thread_local! {
    static TAPS_CALLS: Cell<usize> = const { Cell::new(0) };
}

/// Number of TAPS pipeline evaluations on this thread.
pub fn taps_invocations() -> usize {
    TAPS_CALLS.with(Cell::get)
}

/// Cross-entropy from logits, via the logit-difference form.
pub fn ce_loss(logits: &Tensor, labels: &[usize]) -> Vec<f64> {
    labels
        .iter()
        .enumerate()
        .map(|(s, &y)| {
            let row = logits.row(s);
            let diffs: Vec<f64> = row.iter().map(|o| o - row[y]).collect();
            logsumexp(&diffs)
        })
        .collect()
}

/// `max_{i != y} diff_i` for rows of elided logits (column `y` is ignored).
pub fn margin_loss(diffs: &Tensor, labels: &[usize]) -> Vec<f64> {
    labels
        .iter()
        .enumerate()
        .map(|(s, &y)| {
            diffs
                .row(s)
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != y)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

fn one_hot(labels: &[usize], k: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), k]);
    for (s, &y) in labels.iter().enumerate() {
        t.data_mut()[s * k + y] = 1.0;
    }
    t
}

fn check_labels(net: &Network, labels: &[usize], rows: usize) -> Result<()> {
    if labels.len() != rows || rows == 0 {
        return Err(Error::shape("loss", format!("{} labels for batch of {rows}", labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= net.num_classes) {
        return Err(Error::InvalidArgument(format!("label {y} out of range")));
    }
    Ok(())
}

/// `o - o_y` per row, on the tape.
pub fn elided_diffs_on_tape(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let k = g.value(logits).row_len();
    let y = g.constant(one_hot(labels, k));
    let ones = g.constant(Tensor::full(&[k, k], 1.0));
    let picked = g.mul(logits, y)?;
    let oy = g.matmul(picked, ones)?;
    g.sub(logits, oy)
}

/// Row-wise cross-entropy of elided logits (column `y` holds 0).
pub fn ce_rows_on_tape(g: &mut Graph, diffs: Var) -> Result<Var> {
    g.logsumexp(diffs)
}

/// Upper bounds of `o - o_y` given a box on the input of the final affine
/// layer. Column `y` is exactly 0.
pub fn elided_upper_on_tape(
    g: &mut Graph,
    net: &Network,
    params: &BoundParams,
    pre: BoxVars,
    labels: &[usize],
) -> Result<Var> {
    let last = net.layers.len() - 1;
    if !matches!(net.layers[last], Layer::Affine { .. }) {
        return Err(Error::InvalidArgument("final layer is not affine".into()));
    }
    let k = net.num_classes;
    let c = flatten_on_tape(g, pre.center)?;
    let r = flatten_on_tape(g, pre.radius)?;
    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    let mut acc: Option<Var> = None;
    for &y in &present {
        let elided = params.elided(g, k, y)?;
        let (w, b) = elided.layer(last).expect("affine layer is bound");
        let wt = g.transpose(w)?;
        let cw = g.matmul(c, wt)?;
        let cw = g.add_bias(cw, b)?;
        let aw = g.abs(w)?;
        let awt = g.transpose(aw)?;
        let rw = g.matmul(r, awt)?;
        let mut up = g.add(cw, rw)?;
        if present.len() > 1 {
            let mut mask = Tensor::zeros(&[labels.len(), k]);
            for (s, &ys) in labels.iter().enumerate() {
                if ys == y {
                    mask.data_mut()[s * k..(s + 1) * k].fill(1.0);
                }
            }
            let m = g.constant(mask);
            up = g.mul(up, m)?;
        }
        acc = Some(match acc {
            None => up,
            Some(a) => g.add(a, up)?,
        });
    }
    Ok(acc.expect("nonempty batch"))
}

/// Per-sample natural cross-entropy on the tape.
pub fn natural_terms(g: &mut Graph, net: &Network, params: &BoundParams, x: &Tensor, labels: &[usize]) -> Result<Var> {
    check_labels(net, labels, x.rows())?;
    let xv = g.constant(x.clone());
    let logits = net.forward_on_tape(g, params, xv, 0..net.layers.len())?;
    let diffs = elided_diffs_on_tape(g, logits, labels)?;
    ce_rows_on_tape(g, diffs)
}

/// Per-sample `L_IBP` for an input box on the tape.
pub fn ibp_terms(g: &mut Graph, net: &Network, params: &BoundParams, input: BoxVars, labels: &[usize]) -> Result<Var> {
    check_labels(net, labels, g.value(input.center).rows())?;
    let last = net.layers.len() - 1;
    let pre = propagate_range_on_tape(g, net, params, input, 0..last)?;
    let upper = elided_upper_on_tape(g, net, params, pre, labels)?;
    ce_rows_on_tape(g, upper)
}

/// Per-sample TAPS and IBP terms sharing one tape.
#[derive(Clone, Copy, Debug)]
pub struct TapsTerms {
    pub taps: Var,
    pub ibp: Var,
}

/// The TAPS pipeline with pluggable attack and connector: IBP to the split,
/// `attack` on the latent box, `attach` to put each point on the tape, the
/// classifier forward and cross-entropy over the per-target logit
/// differences. With an empty classifier the TAPS term is the IBP term.
#[allow(clippy::too_many_arguments)]
pub fn taps_terms_with(
    g: &mut Graph,
    net: &Network,
    params: &BoundParams,
    input: BoxVars,
    labels: &[usize],
    estimator: Estimator,
    attack: &mut dyn FnMut(&BoxBounds) -> Result<LatentAttack>,
    attach: &mut dyn FnMut(&mut Graph, Var, Var, Tensor) -> Result<Var>,
) -> Result<TapsTerms> {
    let batch = labels.len();
    check_labels(net, labels, g.value(input.center).rows())?;
    if !net.has_classifier() {
        let ibp = ibp_terms(g, net, params, input, labels)?;
        return Ok(TapsTerms { taps: ibp, ibp });
    }
    TAPS_CALLS.with(|c| c.set(c.get() + 1));
    let last = net.layers.len() - 1;
    let latent = propagate_range_on_tape(g, net, params, input, net.extractor())?;
    let mut pre = latent;
    for i in net.split_index..last {
        pre = propagate_on_tape(g, &net.layers[i], params.layer(i), pre)?;
    }
    let upper = elided_upper_on_tape(g, net, params, pre, labels)?;
    let ibp = ce_rows_on_tape(g, upper)?;

    let lo = latent.lo(g)?;
    let hi = latent.hi(g)?;
    let latent_box = BoxBounds {
        lo: g.value(lo).clone(),
        hi: g.value(hi).clone(),
    };
    let found = attack(&latent_box)?;
    let k = net.num_classes;
    let diffs = match estimator {
        Estimator::Single => {
            let z = attach(g, lo, hi, found.points)?;
            let logits = net.forward_on_tape(g, params, z, net.classifier())?;
            elided_diffs_on_tape(g, logits, labels)?
        }
        Estimator::Multi => {
            if found.owners.len() != batch * (k - 1) {
                return Err(Error::shape("taps", "multi-estimator attack must cover every wrong class"));
            }
            let mut acc: Option<Var> = None;
            for t in 0..k - 1 {
                let rows: Vec<usize> = (0..batch).map(|s| s * (k - 1) + t).collect();
                let mut mask = Tensor::zeros(&[batch, k]);
                for (s, &r) in rows.iter().enumerate() {
                    let (owner, target) = found.owners[r];
                    debug_assert_eq!(owner, s);
                    mask.data_mut()[s * k + target] = 1.0;
                }
                let z = attach(g, lo, hi, found.points.select_rows(&rows))?;
                let logits = net.forward_on_tape(g, params, z, net.classifier())?;
                let d = elided_diffs_on_tape(g, logits, labels)?;
                let m = g.constant(mask);
                let d = g.mul(d, m)?;
                acc = Some(match acc {
                    None => d,
                    Some(a) => g.add(a, d)?,
                });
            }
            acc.expect("at least two classes")
        }
    };
    let taps = ce_rows_on_tape(g, diffs)?;
    check_taps_below_ibp(g.value(taps), g.value(ibp))?;
    Ok(TapsTerms { taps, ibp })
}

fn check_taps_below_ibp(taps: &Tensor, ibp: &Tensor) -> Result<()> {
    for (s, (&t, &i)) in taps.data().iter().zip(ibp.data()).enumerate() {
        if t > i + 1e-9 * (1.0 + i.abs()) {
            return Err(Error::Numeric(format!(
                "TAPS loss {t} exceeds IBP loss {i} for sample {s}"
            )));
        }
    }
    Ok(())
}

/// TAPS terms with PGD from `cfg.attack` and the connector from `cfg`.
pub fn taps_terms(
    g: &mut Graph,
    net: &Network,
    params: &BoundParams,
    input: BoxVars,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<TapsTerms> {
    let concrete = net.clone();
    let attack_cfg = cfg.attack;
    let connector = cfg.connector;
    let estimator = cfg.estimator;
    let mut attack = |b: &BoxBounds| pgd_latent(&concrete, concrete.classifier(), b, labels, None, estimator, &attack_cfg);
    let mut attach = |g: &mut Graph, lo: Var, hi: Var, z: Tensor| connector_node(g, lo, hi, z, &connector);
    taps_terms_with(g, net, params, input, labels, estimator, &mut attack, &mut attach)
}

struct FrozenPoint {
    z: Tensor,
    dlo: Tensor,
    dhi: Tensor,
    lo0: Tensor,
    hi0: Tensor,
}

/// Connector with the latent points and partials frozen at first use.
///
/// The first pass through a pipeline records `ẑ`, the bounds and the
/// connector partials. Every pass then records
/// `ẑ + dlo * (lo - lo0) + dhi * (hi - hi0)`, an ordinary function of the
/// bounds whose gradient at the recording point equals the connector's.
/// Used to check connector gradients against finite differences.
pub struct FrozenConnector {
    params: ConnectorParams,
    points: Vec<FrozenPoint>,
    cursor: usize,
}

impl FrozenConnector {
    pub fn new(params: ConnectorParams) -> Self {
        Self {
            params,
            points: Vec::new(),
            cursor: 0,
        }
    }

    /// Starts the next pass through the pipeline.
    pub fn rewind(&mut self) {
        self.cursor = 0;
    }

    pub fn attach(&mut self, g: &mut Graph, lo: Var, hi: Var, z: Tensor) -> Result<Var> {
        if self.cursor == self.points.len() {
            let (dlo, dhi) = crate::connector::connector_partials_tensor(g.value(lo), g.value(hi), &z, &self.params)?;
            self.points.push(FrozenPoint {
                z,
                dlo,
                dhi,
                lo0: g.value(lo).clone(),
                hi0: g.value(hi).clone(),
            });
        }
        let p = &self.points[self.cursor];
        self.cursor += 1;
        let lo0 = g.constant(p.lo0.clone());
        let hi0 = g.constant(p.hi0.clone());
        let dlo = g.constant(p.dlo.clone());
        let dhi = g.constant(p.dhi.clone());
        let z = g.constant(p.z.clone());
        let a = g.sub(lo, lo0)?;
        let a = g.mul(a, dlo)?;
        let b = g.sub(hi, hi0)?;
        let b = g.mul(b, dhi)?;
        let s = g.add(a, b)?;
        g.add(z, s)
    }
}

/// Input box for the certified losses: the eps-ball, or the SABR region.
pub fn loss_region(net: &Network, x: &Tensor, labels: &[usize], eps: f64, cfg: &LossConfig) -> Result<BoxBounds> {
    if cfg.kind.uses_region() && eps > 0.0 {
        sabr_select_region(net, x, labels, eps, cfg.tau_ratio * eps, cfg.clip, &cfg.region_attack)
    } else {
        box_from_ball(x, eps, cfg.clip)
    }
}

/// Batch means of one loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValues {
    /// The objective that was differentiated (before the L1 penalty).
    pub combined: f64,
    pub natural: Option<f64>,
    pub ibp: Option<f64>,
    pub taps: Option<f64>,
    pub per_sample_ibp: Vec<f64>,
    pub per_sample_taps: Vec<f64>,
}

/// Parameter gradients (declaration order) plus diagnostics.
#[derive(Clone, Debug)]
pub struct LossGradient {
    pub grads: Vec<Tensor>,
    pub values: LossValues,
}

/// Records `2 alpha * L_T * const(L_I) + (2 - 2 alpha) * L_I * const(L_T)`.
/// Its value is `L_T * L_I` for any `alpha`, its gradient the scaled
/// product rule.
pub fn combined_from_terms(g: &mut Graph, taps_mean: Var, ibp_mean: Var, alpha: f64) -> Result<Var> {
    let lt = g.value(taps_mean).item();
    let li = g.value(ibp_mean).item();
    let a = g.scale(taps_mean, 2.0 * alpha * li)?;
    let b = g.scale(ibp_mean, (2.0 - 2.0 * alpha) * lt)?;
    let s = g.add(a, b)?;
    // The sum is worth 2 L_T L_I; shift the value without touching the gradient.
    g.add_scalar(s, -lt * li)
}

/// `l1 * sum |theta|` over all parameters.
pub fn l1_penalty(g: &mut Graph, params: &BoundParams, l1: f64) -> Result<Option<Var>> {
    if l1 == 0.0 {
        return Ok(None);
    }
    let mut acc: Option<Var> = None;
    for v in params.vars() {
        let a = g.abs(v)?;
        let s = g.sum(a)?;
        acc = Some(match acc {
            None => s,
            Some(p) => g.add(p, s)?,
        });
    }
    acc.map(|a| g.scale(a, l1)).transpose()
}

/// Training phase of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Phase {
    /// `L_box + eps / eps_target * L_fast` with the fast regularizer weight.
    Annealing { eps_target: f64, fast_lambda: f64 },
    /// The method's full objective.
    Full,
}

/// Builds the step objective for `cfg.kind` on a fresh tape and returns the
/// parameter gradients.
pub fn combined_gradient(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    eps: f64,
    phase: Phase,
    cfg: &LossConfig,
) -> Result<LossGradient> {
    cfg.validate()?;
    check_labels(net, labels, x.rows())?;
    let mut g = Graph::new();
    let params = net.bind(&mut g, true);
    let mean_of = |g: &Graph, v: Var| g.value(v).data().to_vec();
    let mut values = LossValues {
        combined: 0.0,
        natural: None,
        ibp: None,
        taps: None,
        per_sample_ibp: Vec::new(),
        per_sample_taps: Vec::new(),
    };
    // With an empty classifier TAPS reduces to IBP and STAPS to SABR.
    let kind = match cfg.kind {
        LossKind::Taps if !net.has_classifier() => LossKind::Ibp,
        LossKind::Staps if !net.has_classifier() => LossKind::Sabr,
        k => k,
    };
    let objective = match (kind, phase) {
        (LossKind::Natural, _) => {
            let t = natural_terms(&mut g, net, &params, x, labels)?;
            let m = g.mean(t)?;
            values.natural = Some(g.value(m).item());
            m
        }
        (LossKind::PgdAt, _) => {
            let adv = if eps > 0.0 {
                pgd_input(net, x, labels, eps, cfg.clip, &cfg.attack)?
            } else {
                x.clone()
            };
            let t = natural_terms(&mut g, net, &params, &adv, labels)?;
            let m = g.mean(t)?;
            values.natural = Some(g.value(m).item());
            m
        }
        (_, Phase::Annealing { eps_target, fast_lambda }) => {
            let region = loss_region(net, x, labels, eps, cfg)?;
            let bv = BoxVars::constant(&mut g, &region);
            let t = ibp_terms(&mut g, net, &params, bv, labels)?;
            values.per_sample_ibp = mean_of(&g, t);
            let m = g.mean(t)?;
            values.ibp = Some(g.value(m).item());
            if fast_lambda > 0.0 && eps > 0.0 && eps_target > 0.0 {
                let reg = fast_regularizer(&mut g, net, &params, bv, fast_lambda)?;
                let reg = g.scale(reg, eps / eps_target)?;
                g.add(m, reg)?
            } else {
                m
            }
        }
        (LossKind::Ibp | LossKind::Sabr, Phase::Full) => {
            let region = loss_region(net, x, labels, eps, cfg)?;
            let bv = BoxVars::constant(&mut g, &region);
            let t = ibp_terms(&mut g, net, &params, bv, labels)?;
            values.per_sample_ibp = mean_of(&g, t);
            let m = g.mean(t)?;
            values.ibp = Some(g.value(m).item());
            m
        }
        (LossKind::Taps | LossKind::Staps, Phase::Full) => {
            let region = loss_region(net, x, labels, eps, cfg)?;
            let bv = BoxVars::constant(&mut g, &region);
            let terms = taps_terms(&mut g, net, &params, bv, labels, cfg)?;
            values.per_sample_ibp = mean_of(&g, terms.ibp);
            values.per_sample_taps = mean_of(&g, terms.taps);
            let mt = g.mean(terms.taps)?;
            let mi = g.mean(terms.ibp)?;
            values.taps = Some(g.value(mt).item());
            values.ibp = Some(g.value(mi).item());
            combined_from_terms(&mut g, mt, mi, alpha_from_w(cfg.w_taps)?)?
        }
    };
    values.combined = g.value(objective).item();
    if !values.combined.is_finite() {
        return Err(Error::NonFinite(format!("{} loss is {}", cfg.kind, values.combined)));
    }
    let root = match l1_penalty(&mut g, &params, cfg.l1)? {
        Some(p) => g.add(objective, p)?,
        None => objective,
    };
    let grads = g.backward(root)?;
    let grads: Vec<Tensor> = params.vars().iter().map(|&v| grads.get(v)).collect();
    if grads.iter().any(|t| !t.all_finite()) {
        return Err(Error::NonFinite(format!("{} gradient is not finite", cfg.kind)));
    }
    Ok(LossGradient { grads, values })
}

/// Box-size and ReLU-balance penalty used during annealing:
/// `lambda * (tightness + balance)`.
///
/// `tightness` is the mean over linear layers of `max(0, r_l / r_0 - 1)`
/// with `r_l` the mean output radius and `r_0` the mean input radius.
/// `balance` is the mean over ReLU layers of `mean(s)^2`, where
/// `s = clamp(center / radius, -1, 1)` is +1 for certainly active and -1 for
/// certainly dead units.
pub fn fast_regularizer(g: &mut Graph, net: &Network, params: &BoundParams, input: BoxVars, lambda: f64) -> Result<Var> {
    let r0 = g.value(input.radius).sum() / g.value(input.radius).len() as f64;
    if lambda == 0.0 || r0 == 0.0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let mut tight: Vec<Var> = Vec::new();
    let mut balance: Vec<Var> = Vec::new();
    let mut b = input;
    for (i, layer) in net.layers.iter().enumerate() {
        if matches!(layer, Layer::Relu) {
            let eps = g.add_scalar(b.radius, 1e-12)?;
            let ratio = g.div(b.center, eps)?;
            let s = g.clamp(ratio, -1.0, 1.0)?;
            let m = g.mean(s)?;
            balance.push(g.mul(m, m)?);
        }
        b = propagate_on_tape(g, layer, params.layer(i), b)?;
        if layer.is_linear() {
            let m = g.mean(b.radius)?;
            let excess = g.add_scalar(m, -r0)?;
            let excess = g.scale(excess, 1.0 / r0)?;
            tight.push(g.max_scalar(excess, 0.0)?);
        }
    }
    let mut total = g.constant(Tensor::scalar(0.0));
    for group in [tight, balance] {
        if group.is_empty() {
            continue;
        }
        let n = group.len() as f64;
        let mut acc = group[0];
        for &v in &group[1..] {
            acc = g.add(acc, v)?;
        }
        let avg = g.scale(acc, 1.0 / n)?;
        total = g.add(total, avg)?;
    }
    g.scale(total, lambda)
}
