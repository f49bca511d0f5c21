//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use certitrain::data::{data_root, load_mnist, synthetic_moons, Dataset};
use certitrain::net::{build_architecture, Architecture, Network};
use certitrain::train::{self, load, taps_accuracy, train_run, RunOutcome};
use certitrain::verify::{
    adversarial_accuracy, histogram, histogram_csv, ibp_certified_accuracy, sample_verdicts, tightness_errors,
    verdicts_jsonl, BoundConfig, BoundMethod, ErrorStats, OracleStatus, SampleVerdict, VerdictConfig,
};
use certitrain::{Error, Result};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{DatasetKind, RunConfig};

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Git-style content hash: SHA-256 of `blob <len>\0` followed by the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Content hash of the little-endian parameter bytes.
pub fn parameter_hash(net: &Network) -> String {
    let bytes: Vec<u8> = net.flat_params().iter().flat_map(|v| v.to_le_bytes()).collect();
    content_hash(&bytes)
}

/// Training and test data for a configuration.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = match cfg.dataset {
        DatasetKind::Moons => (
            synthetic_moons(cfg.moons_samples, cfg.moons_noise, cfg.seed)?,
            synthetic_moons(cfg.moons_samples, cfg.moons_noise, cfg.seed.wrapping_add(1_000_003))?,
        ),
        DatasetKind::Mnist => {
            let root = data_root(cfg.data_dir.as_deref()).ok_or_else(|| {
                Error::Config("MNIST needs --data DIR or the CERTITRAIN_DATA environment variable".into())
            })?;
            (load_mnist(&root, true)?, load_mnist(&root, false)?)
        }
    };
    let train = match cfg.subset {
        Some(k) => train.subset(k, cfg.seed),
        None => train,
    };
    let test = match cfg.test_subset {
        Some(k) => test.subset(k, cfg.seed),
        None => test,
    };
    Ok((train, test))
}

pub fn build_network(cfg: &RunConfig, data: &Dataset) -> Result<Network> {
    let arch: Architecture = cfg.architecture.parse()?;
    let mut net = build_architecture(&arch, data.sample_shape(), data.num_classes, cfg.classifier_relus)?;
    net.init_params(cfg.seed, cfg.init);
    if data.mean.iter().any(|&m| m != 0.0) || data.std.iter().any(|&s| s != 1.0) {
        net = net.with_normalization(data.mean.clone(), data.std.clone())?;
    }
    Ok(net)
}

fn file_entry(path: &Path) -> Result<Value> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(json!({"path": path.display().to_string(), "sha256": content_hash(&bytes)}))
}

/// Trains one configuration and writes its artifacts and manifest.
pub fn train(cfg: &RunConfig, command: &str) -> Result<RunOutcome> {
    let (data, _) = load_data(cfg)?;
    let net = build_network(cfg, &data)?;
    create_dir(&cfg.out)?;
    let outcome = train_run(&cfg.train_config()?, net, &data, Some(&cfg.out), &cfg.architecture)?;
    let artifacts = outcome.artifacts.iter().map(|p| file_entry(p)).collect::<Result<Vec<_>>>()?;
    let manifest = json!({
        "command": command,
        "config": serde_json::to_value(cfg)?,
        "seed": cfg.seed,
        "train_samples": data.len(),
        "best_epoch": outcome.best_epoch,
        "best_taps_acc": outcome.best_taps_acc,
        "final_parameter_hash": parameter_hash(&outcome.final_net),
        "best_parameter_hash": parameter_hash(&outcome.best_net),
        "artifacts": artifacts,
        "wall_ms": outcome.wall_ms as u64,
    });
    write(&cfg.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(outcome)
}

/// Options shared by `certify` and `tightness`.
pub struct EvalOptions {
    pub checkpoint: PathBuf,
    pub eps: f64,
    pub methods: Vec<BoundMethod>,
    pub oracle_budget: Option<usize>,
    pub jobs: usize,
    pub out: PathBuf,
}

fn load_checked(path: &Path, data: &Dataset) -> Result<Network> {
    let (net, _) = load(path)?;
    if net.input_shape != data.sample_shape() || net.num_classes != data.num_classes {
        return Err(Error::Config(format!(
            "checkpoint {} expects input {:?} with {} classes, data has {:?} with {}",
            path.display(),
            net.input_shape,
            net.num_classes,
            data.sample_shape(),
            data.num_classes
        )));
    }
    Ok(net)
}

fn verdict_config(cfg: &RunConfig, opts: &EvalOptions) -> VerdictConfig {
    VerdictConfig {
        methods: opts.methods.clone(),
        bounds: BoundConfig::default(),
        attack: cfg.eval_attack(),
        oracle_budget: opts.oracle_budget,
        seed: cfg.seed,
        jobs: opts.jobs,
    }
}

#[derive(Debug, serde::Serialize)]
pub struct CertifySummary {
    pub samples: usize,
    pub epsilon: f64,
    pub natural: f64,
    pub adversarial: f64,
    pub ibp_certified: f64,
    /// IBP(+oracle)-certified.
    pub certified: f64,
    pub oracle_coverage: Option<f64>,
}

fn fraction(v: &[SampleVerdict], f: impl Fn(&SampleVerdict) -> bool) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().filter(|s| f(s)).count() as f64 / v.len() as f64
    }
}

pub fn certify(cfg: &RunConfig, opts: &EvalOptions) -> Result<CertifySummary> {
    let (_, test) = load_data(cfg)?;
    let net = load_checked(&opts.checkpoint, &test)?;
    let verdicts = sample_verdicts(&net, &test, opts.eps, &verdict_config(cfg, opts))?;
    create_dir(&opts.out)?;
    write(&opts.out.join("verdicts.jsonl"), verdicts_jsonl(&verdicts)?.as_bytes())?;
    let summary = CertifySummary {
        samples: verdicts.len(),
        epsilon: opts.eps,
        natural: fraction(&verdicts, |v| v.natural_correct),
        adversarial: fraction(&verdicts, |v| v.natural_correct && v.adversarially_robust()),
        ibp_certified: fraction(&verdicts, |v| v.natural_correct && v.ibp_certified),
        certified: fraction(&verdicts, |v| v.natural_correct && v.certified()),
        oracle_coverage: opts
            .oracle_budget
            .map(|_| fraction(&verdicts, |v| v.oracle == OracleStatus::Exact)),
    };
    write(&opts.out.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(summary)
}

pub fn tightness(cfg: &RunConfig, opts: &EvalOptions, bins: usize) -> Result<BTreeMap<String, ErrorStats>> {
    let (_, test) = load_data(cfg)?;
    let net = load_checked(&opts.checkpoint, &test)?;
    let vc = verdict_config(cfg, opts);
    let verdicts = sample_verdicts(&net, &test, opts.eps, &vc)?;
    let unknown = verdicts.iter().filter(|v| v.oracle != OracleStatus::Exact).count();
    if unknown > 0 {
        return Err(Error::Config(format!(
            "the exact oracle exceeded its budget of {} unstable ReLUs on {unknown} of {} samples; \
             use a smaller network, a smaller epsilon or a larger --oracle-budget",
            opts.oracle_budget.unwrap_or(0),
            verdicts.len()
        )));
    }
    let errors = tightness_errors(&verdicts);
    let all: Vec<f64> = errors.values().flatten().copied().collect();
    let (mut lo, mut hi) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        lo -= 0.5;
        hi += 0.5;
    }
    create_dir(&opts.out)?;
    write(&opts.out.join("verdicts.jsonl"), verdicts_jsonl(&verdicts)?.as_bytes())?;
    let mut stats = BTreeMap::new();
    let mut table = String::from("method,count,mean,mean_abs,variance,min,max\n");
    for (name, errs) in &errors {
        let h = histogram(errs, bins, lo, hi)?;
        write(&opts.out.join(format!("hist_{}.csv", name.replace(':', "_"))), histogram_csv(&h).as_bytes())?;
        let s = ErrorStats::of(errs);
        let _ = writeln!(table, "{name},{},{:?},{:?},{:?},{:?},{:?}", s.count, s.mean, s.mean_abs, s.variance, s.min, s.max);
        stats.insert(name.clone(), s);
    }
    write(&opts.out.join("tightness_summary.csv"), table.as_bytes())?;
    Ok(stats)
}

/// Configuration keys that `ablate` can sweep.
pub fn sweep_key(sweep: &str) -> Result<&'static str> {
    Ok(match sweep {
        "split" => "classifier_relus",
        "connector_c" => "connector_c",
        "w_taps" => "w_taps",
        "attack_steps" => "attack_steps",
        "estimator" => "estimator",
        _ => {
            return Err(Error::Config(format!(
                "unknown sweep '{sweep}'; use split, connector_c, w_taps, attack_steps or estimator"
            )))
        }
    })
}

pub const ABLATION_HEADER: &str = "sweep,value,seed,nat_acc,taps_acc,adv_acc,cert_acc,best_epoch,final_parameter_hash";

/// Trains every sweep point for every seed and appends evaluation rows.
pub fn ablate(base: &Value, sweep: &str, values: &[String], seeds: &[u64], out: &Path) -> Result<String> {
    let key = sweep_key(sweep)?;
    let mut configs = Vec::new();
    for value in values {
        for &seed in seeds {
            let mut v = base.clone();
            crate::config::set_key(&mut v, key, value)?;
            v["seed"] = json!(seed);
            v["out"] = json!(out.join(format!("{sweep}={value}")).join(format!("seed{seed}")));
            configs.push((value.clone(), RunConfig::from_value(v)?));
        }
    }
    create_dir(out)?;
    let mut csv = format!("{ABLATION_HEADER}\n");
    let path = out.join("ablation.csv");
    for (value, cfg) in &configs {
        let started = Instant::now();
        let outcome = train(cfg, &format!("ablate {sweep}={value}"))?;
        let (_, test) = load_data(cfg)?;
        let eps = cfg.schedule.eps_target;
        let clip = Some((0.0, 1.0));
        let net = &outcome.best_net;
        let row = format!(
            "{sweep},{value},{},{:?},{:?},{:?},{:?},{},{}",
            cfg.seed,
            train::natural_accuracy(net, &test)?,
            taps_accuracy(net, &test, eps, clip, &cfg.eval_attack())?,
            adversarial_accuracy(net, &test, eps, clip, &cfg.eval_attack())?,
            ibp_certified_accuracy(net, &test, eps, clip)?,
            outcome.best_epoch,
            parameter_hash(&outcome.final_net),
        );
        eprintln!("{row} ({} ms)", started.elapsed().as_millis());
        csv.push_str(&row);
        csv.push('\n');
        write(&path, csv.as_bytes())?;
    }
    Ok(csv)
}
