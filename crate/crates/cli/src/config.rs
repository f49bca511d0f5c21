//! Run configuration: presets, JSON files and flag overrides, all merged as
//! JSON and validated before any compute.

use std::path::{Path, PathBuf};

use certitrain::attack::AttackConfig;
use certitrain::connector::ConnectorParams;
use certitrain::loss::{LossConfig, LossKind};
use certitrain::net::InitMode;
use certitrain::train::{OptimizerKind, Schedule, TrainConfig};
use certitrain::{Error, Result};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Value};

use certitrain::attack::Estimator;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    /// Two interleaved arcs in `[0, 1]^2`.
    Moons,
}

/// `w_taps` as a number or the token `inf` (also `∞`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WTaps(pub f64);

impl Serialize for WTaps {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for WTaps {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(WTaps(v)),
            Raw::Text(t) => parse_w_taps(&t).map_err(serde::de::Error::custom),
        }
    }
}

pub fn parse_w_taps(t: &str) -> std::result::Result<WTaps, String> {
    match t.trim() {
        "inf" | "infinity" | "∞" => Ok(WTaps(f64::INFINITY)),
        other => other
            .parse::<f64>()
            .map(WTaps)
            .map_err(|_| format!("w_taps must be a number or 'inf', got '{other}'")),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// `mlp`, `mlp:W1,W2,...`, `cnn3` or `cnn7`.
    pub architecture: String,
    pub dataset: DatasetKind,
    /// MNIST directory; falls back to `CERTITRAIN_DATA`.
    pub data_dir: Option<PathBuf>,
    /// Train on the first `subset` samples after a seeded shuffle.
    pub subset: Option<usize>,
    pub test_subset: Option<usize>,
    pub moons_samples: usize,
    pub moons_noise: f64,
    pub seed: u64,
    pub out: PathBuf,
    pub loss: LossKind,
    pub estimator: Estimator,
    pub w_taps: WTaps,
    pub connector_c: f64,
    pub classifier_relus: usize,
    /// Only meaningful for SABR and STAPS.
    pub tau_ratio: Option<f64>,
    pub l1: f64,
    pub attack_steps: usize,
    pub attack_restarts: usize,
    /// Input attack for adversarial accuracy.
    pub eval_attack_steps: usize,
    pub eval_attack_restarts: usize,
    pub init: InitMode,
    pub optimizer: OptimizerKind,
    pub fast_lambda: f64,
    pub validation_fraction: f64,
    pub record_time: bool,
    pub schedule: Schedule,
}

pub const PRESETS: [&str; 10] = [
    "mnist-eps0.1-ibp",
    "mnist-eps0.1-taps",
    "mnist-eps0.1-staps",
    "mnist-eps0.1-sabr",
    "mnist-eps0.1-pgd-at",
    "mnist-eps0.3-ibp",
    "mnist-eps0.3-taps",
    "mnist-eps0.3-staps",
    "mnist-eps0.3-sabr",
    "mnist-eps0.3-pgd-at",
];

/// Defaults shared by every configuration, as JSON.
pub fn base_config() -> Value {
    serde_json::to_value(RunConfig {
        architecture: "mlp".into(),
        dataset: DatasetKind::Moons,
        data_dir: None,
        subset: None,
        test_subset: None,
        moons_samples: 1000,
        moons_noise: 0.05,
        seed: 0,
        out: PathBuf::from("runs/default"),
        loss: LossKind::Taps,
        estimator: Estimator::Multi,
        w_taps: WTaps(5.0),
        connector_c: 0.5,
        classifier_relus: 1,
        tau_ratio: None,
        l1: 0.0,
        attack_steps: 8,
        attack_restarts: 1,
        eval_attack_steps: 200,
        eval_attack_restarts: 5,
        init: InitMode::IbpStable,
        optimizer: OptimizerKind::adam(),
        fast_lambda: 0.5,
        validation_fraction: 0.1,
        record_time: false,
        schedule: Schedule::mnist(0.1),
    })
    .expect("defaults serialize")
}

/// MNIST settings per method and epsilon.
pub fn preset(name: &str) -> Result<Value> {
    let rest = name
        .strip_prefix("mnist-eps")
        .ok_or_else(|| Error::Config(format!("unknown preset '{name}'; known: {}", PRESETS.join(", "))))?;
    let (eps, method) = rest
        .split_once('-')
        .ok_or_else(|| Error::Config(format!("unknown preset '{name}'")))?;
    let hi = match eps {
        "0.1" => false,
        "0.3" => true,
        _ => return Err(Error::Config(format!("unknown preset '{name}'"))),
    };
    let mut v = base_config();
    v["dataset"] = json!("mnist");
    v["architecture"] = json!("cnn7");
    v["out"] = json!(format!("runs/{name}"));
    v["schedule"] = serde_json::to_value(Schedule::mnist(if hi { 0.3 } else { 0.1 }))?;
    let patch = match method {
        "ibp" => json!({"loss": "ibp", "classifier_relus": 0}),
        "taps" if hi => json!({"loss": "taps", "classifier_relus": 1, "l1": 0.0, "w_taps": 5.0}),
        "taps" => json!({"loss": "taps", "classifier_relus": 3, "l1": 1e-6, "w_taps": 5.0}),
        "staps" if hi => json!({"loss": "staps", "classifier_relus": 1, "l1": 2e-6, "w_taps": 5.0, "tau_ratio": 0.6}),
        "staps" => json!({"loss": "staps", "classifier_relus": 1, "l1": 2e-5, "w_taps": 5.0, "tau_ratio": 0.4}),
        "sabr" if hi => json!({"loss": "sabr", "classifier_relus": 0, "tau_ratio": 0.6}),
        "sabr" => json!({"loss": "sabr", "classifier_relus": 0, "tau_ratio": 0.4}),
        "pgd-at" => json!({"loss": "pgd-at", "classifier_relus": 0}),
        _ => return Err(Error::Config(format!("unknown preset '{name}'"))),
    };
    merge(&mut v, &patch);
    Ok(v)
}

/// Recursively overlays `patch` onto `base`.
pub fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

/// Sets a dotted key such as `schedule.lr0`. The value is parsed as JSON
/// and falls back to a plain string.
pub fn set_key(config: &mut Value, key: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = config;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = slot
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("'{key}': '{}' is not a section", parts[..i].join("."))))?;
        if !obj.contains_key(*part) {
            return Err(Error::Config(format!("unknown configuration key '{key}'")));
        }
        slot = obj.get_mut(*part).expect("checked");
    }
    *slot = value;
    Ok(())
}

pub fn read_config_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

impl RunConfig {
    pub fn from_value(v: Value) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture
            .parse::<certitrain::net::Architecture>()
            .map_err(|e| Error::Config(format!("architecture: {e}")))?;
        if self.tau_ratio.is_some() && !self.loss.uses_region() {
            return Err(Error::Config(format!(
                "tau_ratio is only valid with sabr or staps, not {}",
                self.loss
            )));
        }
        if self.loss.uses_region() && self.tau_ratio.is_none() {
            return Err(Error::Config(format!("{} needs tau_ratio", self.loss)));
        }
        if self.dataset == DatasetKind::Moons && self.moons_samples < 2 {
            return Err(Error::Config("moons_samples must be >= 2".into()));
        }
        if !(self.moons_noise >= 0.0) {
            return Err(Error::Config("moons_noise must be >= 0".into()));
        }
        if self.eval_attack_steps == 0 || self.eval_attack_restarts == 0 {
            return Err(Error::Config("eval attack needs >= 1 step and restart".into()));
        }
        if self.subset == Some(0) {
            return Err(Error::Config("subset must be >= 1".into()));
        }
        self.train_config()?.validate()
    }

    pub fn attack(&self) -> AttackConfig {
        AttackConfig {
            steps: self.attack_steps,
            restarts: self.attack_restarts,
            ..AttackConfig::training()
        }
        .with_seed(self.seed)
    }

    pub fn eval_attack(&self) -> AttackConfig {
        AttackConfig {
            steps: self.eval_attack_steps,
            restarts: self.eval_attack_restarts,
            ..AttackConfig::evaluation()
        }
        .with_seed(self.seed)
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        Ok(LossConfig {
            kind: self.loss,
            estimator: self.estimator,
            w_taps: self.w_taps.0,
            connector: ConnectorParams::new(self.connector_c)?,
            attack: self.attack(),
            region_attack: self.attack(),
            tau_ratio: self.tau_ratio.unwrap_or(LossConfig::default().tau_ratio),
            clip: Some((0.0, 1.0)),
            l1: self.l1,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut t = TrainConfig::new(self.schedule.clone(), self.loss_config()?);
        t.optimizer = self.optimizer;
        t.fast_lambda = self.fast_lambda;
        t.seed = self.seed;
        t.validation_fraction = self.validation_fraction;
        t.eval_attack = self.attack();
        t.record_time = self.record_time;
        Ok(t)
    }
}
