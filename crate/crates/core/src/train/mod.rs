//! Training loop: epsilon annealing, learning-rate decay, gradient clipping,
//! optimizer updates and TAPS-accuracy early stopping.

mod checkpoint;
mod optim;
mod schedule;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub use checkpoint::{from_bytes, load, save, to_bytes, CheckpointHeader};
pub use optim::{clip_gradients, global_norm, Optimizer, OptimizerKind};
pub use schedule::{epsilon_schedule, learning_rate, Ramp, Schedule};

use crate::attack::{pgd_latent, AttackConfig, Estimator};
use crate::data::{batch_indices, Dataset};
use crate::error::{Error, Result};
use crate::interval::{box_from_ball, ibp_bounds, BoundTarget};
use crate::loss::{ce_loss, combined_gradient, LossConfig, Phase};
use crate::net::Network;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub loss: LossConfig,
    pub optimizer: OptimizerKind,
    /// Weight of the annealing regularizer.
    pub fast_lambda: f64,
    pub seed: u64,
    /// Trailing fraction of the training data held out for validation.
    pub validation_fraction: f64,
    /// Latent attack used for validation TAPS accuracy.
    pub eval_attack: AttackConfig,
    /// Write wall-clock milliseconds into the metrics CSV. Off by default so
    /// reruns produce identical files.
    pub record_time: bool,
}

impl TrainConfig {
    pub fn new(schedule: Schedule, loss: LossConfig) -> Self {
        Self {
            schedule,
            loss,
            optimizer: OptimizerKind::default(),
            fast_lambda: 0.5,
            seed: 0,
            validation_fraction: 0.1,
            eval_attack: AttackConfig::training(),
            record_time: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.loss.validate()?;
        self.eval_attack.validate()?;
        if !(self.fast_lambda >= 0.0) {
            return Err(Error::Config("fast_lambda must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Mutable state of one run.
#[derive(Clone, Debug)]
pub struct RunState {
    pub epoch: usize,
    pub step: usize,
    pub eps: f64,
    pub lr: f64,
    pub best_taps_acc: f64,
    pub optimizer: Optimizer,
}

impl RunState {
    pub fn new(net: &Network, cfg: &TrainConfig) -> Self {
        Self {
            epoch: 0,
            step: 0,
            eps: 0.0,
            lr: cfg.schedule.lr0,
            best_taps_acc: f64::NEG_INFINITY,
            optimizer: Optimizer::new(cfg.optimizer, &net.params()),
        }
    }
}

/// Per-step diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub eps: f64,
    pub lr: f64,
    pub nat_loss: f64,
    pub ibp_loss: Option<f64>,
    pub taps_loss: Option<f64>,
    pub combined_loss: f64,
    /// Norm before clipping.
    pub grad_norm: f64,
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One optimizer step on a batch at `state.eps` and `state.lr`.
pub fn train_step(net: &mut Network, state: &mut RunState, x: &Tensor, labels: &[usize], cfg: &TrainConfig) -> Result<StepMetrics> {
    let target = cfg.schedule.eps_target;
    let phase = if state.eps < target {
        Phase::Annealing {
            eps_target: target,
            fast_lambda: cfg.fast_lambda,
        }
    } else {
        Phase::Full
    };
    let mut loss_cfg = cfg.loss.clone();
    loss_cfg.attack.seed = mix_seed(cfg.seed, state.step as u64, 1);
    loss_cfg.region_attack.seed = mix_seed(cfg.seed, state.step as u64, 2);
    let nat_loss = mean(&ce_loss(&net.forward(x)?, labels));
    let mut out = combined_gradient(net, x, labels, state.eps, phase, &loss_cfg)?;
    let grad_norm = clip_gradients(&mut out.grads, cfg.schedule.grad_clip);
    state.optimizer.step(net.params_mut(), &out.grads, state.lr);
    if net.params().iter().any(|p| !p.all_finite()) {
        return Err(Error::NonFinite(format!("parameters became non-finite at step {}", state.step)));
    }
    state.step += 1;
    Ok(StepMetrics {
        eps: state.eps,
        lr: state.lr,
        nat_loss,
        ibp_loss: out.values.ibp,
        taps_loss: out.values.taps,
        combined_loss: out.values.combined,
        grad_norm,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

const EVAL_CHUNK: usize = 256;

/// Fraction of samples whose prediction is correct.
pub fn natural_accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(data.len())).collect();
        let (x, y) = data.batch(&idx);
        let logits = net.forward(&x)?;
        correct += y
            .iter()
            .enumerate()
            .filter(|&(s, &label)| predicted(logits.row(s)) == label)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Index of the largest logit (first one on ties).
pub fn predicted(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-sample TAPS verdicts: a sample passes when every per-target latent
/// adversarial point has a negative logit difference. Without a classifier
/// this is IBP certification.
pub fn taps_verdicts(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    eps: f64,
    clip: Option<(f64, f64)>,
    attack: &AttackConfig,
) -> Result<Vec<bool>> {
    let input = box_from_ball(x, eps, clip)?;
    if !net.has_classifier() {
        let upper = ibp_bounds(net, &input, labels, BoundTarget::ElidedLogits)?.hi;
        return Ok(labels
            .iter()
            .enumerate()
            .map(|(s, &y)| upper.row(s).iter().enumerate().all(|(i, &v)| i == y || v < 0.0))
            .collect());
    }
    let latent = ibp_bounds(net, &input, labels, BoundTarget::ExtractorOutput)?;
    let found = pgd_latent(net, net.classifier(), &latent, labels, None, Estimator::Multi, attack)?;
    let mut ok = vec![true; labels.len()];
    for (r, &(s, _)) in found.owners.iter().enumerate() {
        if found.values[r] >= 0.0 {
            ok[s] = false;
        }
    }
    Ok(ok)
}

/// Fraction of samples passing [`taps_verdicts`].
pub fn taps_accuracy(net: &Network, data: &Dataset, eps: f64, clip: Option<(f64, f64)>, attack: &AttackConfig) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut passed = 0;
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(data.len())).collect();
        let (x, y) = data.batch(&idx);
        let cfg = attack.with_seed(mix_seed(attack.seed, start as u64, 3));
        passed += taps_verdicts(net, &x, &y, eps, clip, &cfg)?.into_iter().filter(|&b| b).count();
    }
    Ok(passed as f64 / data.len() as f64)
}

/// One metrics CSV row (one per epoch).
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub epsilon: f64,
    pub lr: f64,
    pub nat_loss: f64,
    pub ibp_loss: Option<f64>,
    pub taps_loss: Option<f64>,
    pub combined_loss: f64,
    pub grad_norm: f64,
    pub nat_acc: f64,
    pub taps_acc: f64,
    pub time_ms: u128,
}

pub const METRICS_HEADER: &str =
    "epoch,step,epsilon,lr,nat_loss,ibp_loss,taps_loss,combined_loss,grad_norm,nat_acc,taps_acc,time_ms";

/// Metrics as CSV text with a header row. Missing values are empty cells.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:?},{:?},{:?},{},{},{:?},{:?},{:?},{:?},{}",
            r.epoch,
            r.step,
            r.epsilon,
            r.lr,
            r.nat_loss,
            opt(r.ibp_loss),
            opt(r.taps_loss),
            r.combined_loss,
            r.grad_norm,
            r.nat_acc,
            r.taps_acc,
            r.time_ms
        );
    }
    out
}

/// Result of [`train_run`].
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub final_net: Network,
    pub best_net: Network,
    pub best_epoch: usize,
    pub best_taps_acc: f64,
    pub rows: Vec<MetricsRow>,
    pub wall_ms: u128,
    /// Files written, when an output directory was given.
    pub artifacts: Vec<PathBuf>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Trains `net` on `data`. With `out_dir`, writes `metrics.csv`,
/// `final.ckpt` and `best.ckpt` there.
pub fn train_run(cfg: &TrainConfig, mut net: Network, data: &Dataset, out_dir: Option<&Path>, architecture: &str) -> Result<RunOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let (train, val) = data.split_tail(cfg.validation_fraction);
    let sched = &cfg.schedule;
    let spe = train.len().div_ceil(sched.batch_size);
    let mut state = RunState::new(&net, cfg);
    let mut rows = Vec::new();
    let mut best_net = net.clone();
    let mut best_epoch = 0;
    let start = Instant::now();
    for epoch in 0..sched.total_epochs {
        state.epoch = epoch;
        state.lr = learning_rate(epoch, sched);
        let mut sums = [0.0; 5];
        let (mut ibp_sum, mut taps_sum) = (None::<f64>, None::<f64>);
        let batches = batch_indices(train.len(), sched.batch_size, cfg.seed, epoch)?;
        let nb = batches.len() as f64;
        for idx in &batches {
            state.eps = epsilon_schedule(state.step, spe, sched);
            let (x, y) = train.batch(idx);
            let m = train_step(&mut net, &mut state, &x, &y, cfg)?;
            sums[0] += m.nat_loss;
            sums[1] += m.combined_loss;
            sums[2] += m.grad_norm;
            sums[3] = m.eps;
            if let Some(v) = m.ibp_loss {
                *ibp_sum.get_or_insert(0.0) += v;
            }
            if let Some(v) = m.taps_loss {
                *taps_sum.get_or_insert(0.0) += v;
            }
        }
        let eval_set = if val.is_empty() { &train } else { &val };
        let nat_acc = natural_accuracy(&net, eval_set)?;
        let taps_acc = taps_accuracy(&net, eval_set, sched.eps_target, cfg.loss.clip, &cfg.eval_attack.with_seed(cfg.seed))?;
        if taps_acc >= state.best_taps_acc {
            state.best_taps_acc = taps_acc;
            best_net = net.clone();
            best_epoch = epoch;
        }
        rows.push(MetricsRow {
            epoch,
            step: state.step,
            epsilon: sums[3],
            lr: state.lr,
            nat_loss: sums[0] / nb,
            ibp_loss: ibp_sum.map(|s| s / nb),
            taps_loss: taps_sum.map(|s| s / nb),
            combined_loss: sums[1] / nb,
            grad_norm: sums[2] / nb,
            nat_acc,
            taps_acc,
            time_ms: if cfg.record_time { start.elapsed().as_millis() } else { 0 },
        });
        if let Some(dir) = out_dir {
            write_file(&dir.join("metrics.csv"), metrics_csv(&rows).as_bytes())?;
        }
    }
    let mut artifacts = Vec::new();
    if let Some(dir) = out_dir {
        let last = sched.total_epochs - 1;
        let f = dir.join("final.ckpt");
        save(&f, &net, architecture, cfg.seed, last)?;
        let b = dir.join("best.ckpt");
        save(&b, &best_net, architecture, cfg.seed, best_epoch)?;
        artifacts = vec![dir.join("metrics.csv"), f, b];
    }
    Ok(RunOutcome {
        final_net: net,
        best_net,
        best_epoch,
        best_taps_acc: state.best_taps_acc,
        rows,
        wall_ms: start.elapsed().as_millis(),
        artifacts,
    })
}
