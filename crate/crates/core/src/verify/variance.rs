//! Monte Carlo comparison of the two batch estimators of a product loss:
//! `(mean f)(mean g)` against `mean(f g)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::interval::{box_from_ball, BoxVars};
use crate::loss::{taps_terms, LossConfig};
use crate::net::Network;
use crate::tensor::{Graph, Tensor};

/// Per-sample values and flattened parameter gradients of `f` (TAPS term)
/// and `g` (IBP term).
#[derive(Clone, Debug, PartialEq)]
pub struct PerSampleTerms {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub df: Vec<Vec<f64>>,
    pub dg: Vec<Vec<f64>>,
}

impl PerSampleTerms {
    pub fn len(&self) -> usize {
        self.f.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f.is_empty()
    }
}

fn flat_grads(g: &Graph, root: crate::tensor::Var, vars: &[crate::tensor::Var]) -> Result<Vec<f64>> {
    let grads = g.backward(root)?;
    Ok(vars.iter().flat_map(|&v| grads.get(v).into_data()).collect())
}

/// TAPS and IBP terms per sample. The latent attack runs once per sample
/// with a sample-specific seed, so the adversarial points stay fixed.
pub fn per_sample_terms(net: &Network, x: &Tensor, labels: &[usize], eps: f64, cfg: &LossConfig) -> Result<PerSampleTerms> {
    let mut out = PerSampleTerms {
        f: Vec::with_capacity(labels.len()),
        g: Vec::with_capacity(labels.len()),
        df: Vec::with_capacity(labels.len()),
        dg: Vec::with_capacity(labels.len()),
    };
    for (s, &y) in labels.iter().enumerate() {
        let xs = x.select_rows(&[s]);
        let mut c = cfg.clone();
        c.attack.seed = cfg.attack.seed ^ (s as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut g = Graph::new();
        let params = net.bind(&mut g, true);
        let bv = BoxVars::constant(&mut g, &box_from_ball(&xs, eps, c.clip)?);
        let terms = taps_terms(&mut g, net, &params, bv, &[y], &c)?;
        let ft = g.sum(terms.taps)?;
        let it = g.sum(terms.ibp)?;
        let vars = params.vars();
        out.f.push(g.value(ft).item());
        out.g.push(g.value(it).item());
        out.df.push(flat_grads(&g, ft, &vars)?);
        out.dg.push(flat_grads(&g, it, &vars)?);
    }
    Ok(out)
}

/// Per-coordinate moments of both gradient estimators across trials.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VarianceReport {
    pub n: usize,
    pub trials: usize,
    /// Gradient of `(mean f)(mean g)`.
    pub mean_avg_then_mul: Vec<f64>,
    pub var_avg_then_mul: Vec<f64>,
    /// Gradient of `mean(f g)`.
    pub mean_mul_then_avg: Vec<f64>,
    pub var_mul_then_avg: Vec<f64>,
    /// Standard error of the difference of the two means.
    pub standard_error: Vec<f64>,
    /// Fraction of coordinates whose means differ by at most 3 standard errors.
    pub frac_means_agree: f64,
    /// Fraction of coordinates with `var_avg_then_mul <= var_mul_then_avg`.
    pub frac_variance_le: f64,
    /// `sum var_avg_then_mul / sum var_mul_then_avg`.
    pub variance_ratio: f64,
}

/// Resamples `trials` batches of size `n` (with replacement) from the pool
/// and compares the two gradient estimators.
pub fn estimator_statistics(terms: &PerSampleTerms, n: usize, trials: usize, seed: u64) -> Result<VarianceReport> {
    if n == 0 || trials < 2 || terms.is_empty() {
        return Err(Error::InvalidArgument("need n >= 1, trials >= 2 and a non-empty pool".into()));
    }
    let d = terms.df[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = [vec![0.0; d], vec![0.0; d]];
    let mut sq = [vec![0.0; d], vec![0.0; d]];
    let inv = 1.0 / n as f64;
    let mut e1 = vec![0.0; d];
    let mut e2 = vec![0.0; d];
    let mut df_bar = vec![0.0; d];
    let mut dg_bar = vec![0.0; d];
    for _ in 0..trials {
        let batch: Vec<usize> = (0..n).map(|_| rng.gen_range(0..terms.len())).collect();
        let f_bar = batch.iter().map(|&i| terms.f[i]).sum::<f64>() * inv;
        let g_bar = batch.iter().map(|&i| terms.g[i]).sum::<f64>() * inv;
        df_bar.iter_mut().for_each(|v| *v = 0.0);
        dg_bar.iter_mut().for_each(|v| *v = 0.0);
        e2.iter_mut().for_each(|v| *v = 0.0);
        for &i in &batch {
            let (fi, gi) = (terms.f[i], terms.g[i]);
            for k in 0..d {
                df_bar[k] += terms.df[i][k];
                dg_bar[k] += terms.dg[i][k];
                e2[k] += gi * terms.df[i][k] + fi * terms.dg[i][k];
            }
        }
        for k in 0..d {
            e1[k] = g_bar * (df_bar[k] * inv) + f_bar * (dg_bar[k] * inv);
            e2[k] *= inv;
        }
        for (j, e) in [&e1, &e2].into_iter().enumerate() {
            for k in 0..d {
                sum[j][k] += e[k];
                sq[j][k] += e[k] * e[k];
            }
        }
    }
    let t = trials as f64;
    let moments = |j: usize| -> (Vec<f64>, Vec<f64>) {
        let mean: Vec<f64> = sum[j].iter().map(|s| s / t).collect();
        let var = sq[j]
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q - t * m * m) / (t - 1.0)).max(0.0))
            .collect();
        (mean, var)
    };
    let (m1, v1) = moments(0);
    let (m2, v2) = moments(1);
    let se: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| ((a + b) / t).sqrt()).collect();
    let agree = (0..d).filter(|&k| (m1[k] - m2[k]).abs() <= 3.0 * se[k]).count();
    let le = (0..d).filter(|&k| v1[k] <= v2[k]).count();
    let total2: f64 = v2.iter().sum();
    Ok(VarianceReport {
        n,
        trials,
        frac_means_agree: agree as f64 / d as f64,
        frac_variance_le: le as f64 / d as f64,
        variance_ratio: if total2 > 0.0 { v1.iter().sum::<f64>() / total2 } else { 1.0 },
        mean_avg_then_mul: m1,
        var_avg_then_mul: v1,
        mean_mul_then_avg: m2,
        var_mul_then_avg: v2,
        standard_error: se,
    })
}

/// Builds the per-sample pool and runs [`estimator_statistics`]. The pool
/// must hold at least `10 n` samples.
#[allow(clippy::too_many_arguments)]
pub fn variance_theorem_check(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    eps: f64,
    n: usize,
    trials: usize,
    seed: u64,
    cfg: &LossConfig,
) -> Result<VarianceReport> {
    if labels.len() < 10 * n {
        return Err(Error::InvalidArgument(format!(
            "pool of {} samples is smaller than 10 n = {}",
            labels.len(),
            10 * n
        )));
    }
    let terms = per_sample_terms(net, x, labels, eps, cfg)?;
    estimator_statistics(&terms, n, trials, seed)
}
