//! Command-line entry points for training, certification, bound-tightness
//! studies and ablations.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use certitrain::verify::{BoundMethod, DEFAULT_BUDGET};
use certitrain::Error;
use serde_json::Value;

use config::{base_config, merge, preset, read_config_file, set_key, RunConfig};

#[derive(Parser)]
#[command(name = "certitrain", version, about = "Certified training with IBP, TAPS, SABR and STAPS")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write checkpoints, metrics and a manifest.
    Train(Common),
    /// Evaluate natural, adversarial and certified accuracy of a checkpoint.
    Certify {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated bound methods (ibp, pgd, taps, sabr, sabr:L) plus `oracle`.
        #[arg(long, default_value = "ibp,pgd")]
        methods: String,
        /// Most IBP-unstable ReLUs the exact oracle will enumerate.
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        oracle_budget: usize,
    },
    /// Histogram each method's error against the exact worst-case margin.
    Tightness {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated bound methods.
        #[arg(long, default_value = "ibp,pgd,sabr,taps")]
        methods: String,
        /// Histogram bins per method.
        #[arg(long, default_value_t = 50)]
        bins: usize,
        /// Most IBP-unstable ReLUs the exact oracle will enumerate.
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        oracle_budget: usize,
    },
    /// Train one run per sweep value and seed and collect the results.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// split, connector_c, w_taps, attack_steps or estimator.
        #[arg(long)]
        sweep: String,
        /// Comma-separated sweep values; `inf` is accepted for w_taps.
        #[arg(long)]
        values: String,
        /// Comma-separated seeds; defaults to the configured seed.
        #[arg(long)]
        seeds: Option<String>,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named MNIST setting, e.g. `mnist-eps0.1-taps`.
    #[arg(long)]
    preset: Option<String>,
    /// Seeds initialization, batching, attacks and moons data.
    #[arg(long)]
    seed: Option<u64>,
    /// Train on this many samples after a seeded shuffle.
    #[arg(long)]
    subset: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// MNIST directory (default: $CERTITRAIN_DATA).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Worker threads for per-sample evaluation.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// natural, pgd-at, ibp, taps, sabr or staps.
    #[arg(long)]
    loss: Option<String>,
    /// Target L-inf radius.
    #[arg(long)]
    epsilon: Option<f64>,
    /// TAPS gradient weight; a number or `inf`.
    #[arg(long)]
    w_taps: Option<String>,
    /// Gradient connector parameter in [0, 1].
    #[arg(long)]
    connector_c: Option<f64>,
    /// ReLU layers in the classifier part; 0 gives plain IBP.
    #[arg(long)]
    classifier_relus: Option<usize>,
    /// SABR/STAPS box radius as a fraction of epsilon.
    #[arg(long)]
    tau_ratio: Option<f64>,
    /// PGD steps of the training attacks.
    #[arg(long)]
    attack_steps: Option<usize>,
    /// PGD restarts of the training attacks.
    #[arg(long)]
    attack_restarts: Option<usize>,
    /// Any configuration key, e.g. `--set schedule.lr0=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long)]
    print_config: bool,
}

impl Common {
    /// Preset, then config file, then flags.
    fn resolve(&self) -> Result<Value, Error> {
        let mut v = match &self.preset {
            Some(p) => preset(p)?,
            None => base_config(),
        };
        if let Some(path) = &self.config {
            merge(&mut v, &read_config_file(path)?);
        }
        let mut set = |k: &str, raw: String| set_key(&mut v, k, &raw);
        if let Some(s) = self.seed {
            set("seed", s.to_string())?;
        }
        if let Some(s) = self.subset {
            set("subset", s.to_string())?;
        }
        if let Some(p) = &self.out {
            set("out", Value::String(p.display().to_string()).to_string())?;
        }
        if let Some(p) = &self.data {
            set("data_dir", Value::String(p.display().to_string()).to_string())?;
            set("dataset", "\"mnist\"".into())?;
        }
        if let Some(l) = &self.loss {
            let kind: certitrain::loss::LossKind = l.parse()?;
            set("loss", serde_json::to_string(&kind)?)?;
        }
        if let Some(e) = self.epsilon {
            set("schedule.eps_target", e.to_string())?;
        }
        if let Some(w) = &self.w_taps {
            config::parse_w_taps(w).map_err(Error::Config)?;
            set("w_taps", Value::String(w.clone()).to_string())?;
        }
        if let Some(c) = self.connector_c {
            set("connector_c", c.to_string())?;
        }
        if let Some(c) = self.classifier_relus {
            set("classifier_relus", c.to_string())?;
        }
        if let Some(t) = self.tau_ratio {
            set("tau_ratio", t.to_string())?;
        }
        if let Some(s) = self.attack_steps {
            set("attack_steps", s.to_string())?;
        }
        if let Some(r) = self.attack_restarts {
            set("attack_restarts", r.to_string())?;
        }
        for kv in &self.set {
            let (k, raw) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            set(k, raw.to_string())?;
        }
        Ok(v)
    }

    fn config(&self) -> Result<RunConfig, Error> {
        RunConfig::from_value(self.resolve()?)
    }
}

fn parse_methods(list: &str) -> Result<(Vec<BoundMethod>, bool), Error> {
    let mut methods = Vec::new();
    let mut oracle = false;
    for m in list.split(',').map(str::trim).filter(|m| !m.is_empty()) {
        if m == "oracle" {
            oracle = true;
        } else {
            methods.push(m.parse()?);
        }
    }
    Ok((methods, oracle))
}

fn eval_options(
    common: &Common,
    cfg: &RunConfig,
    checkpoint: &std::path::Path,
    methods: Vec<BoundMethod>,
    oracle_budget: Option<usize>,
) -> commands::EvalOptions {
    commands::EvalOptions {
        checkpoint: checkpoint.to_path_buf(),
        eps: cfg.schedule.eps_target,
        methods,
        oracle_budget,
        jobs: common.jobs,
        out: cfg.out.clone(),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.config()?;
            if common.print_config {
                println!("{}", serde_json::to_string_pretty(&cfg)?);
                return Ok(());
            }
            let outcome = commands::train(&cfg, "train")?;
            let last = outcome.rows.last().expect("at least one epoch");
            println!(
                "trained {} epochs: nat_acc {:.4}, taps_acc {:.4}, best epoch {} ({:.4}); artifacts in {}",
                outcome.rows.len(),
                last.nat_acc,
                last.taps_acc,
                outcome.best_epoch,
                outcome.best_taps_acc,
                cfg.out.display()
            );
        }
        Command::Certify {
            common,
            checkpoint,
            methods,
            oracle_budget,
        } => {
            let cfg = common.config()?;
            let (methods, oracle) = parse_methods(&methods)?;
            let opts = eval_options(&common, &cfg, &checkpoint, methods, oracle.then_some(oracle_budget));
            let s = commands::certify(&cfg, &opts)?;
            println!("samples      {}", s.samples);
            println!("epsilon      {}", s.epsilon);
            println!("natural      {:.4}", s.natural);
            println!("adversarial  {:.4}", s.adversarial);
            println!("certified    {:.4}  (IBP {:.4})", s.certified, s.ibp_certified);
            if let Some(c) = s.oracle_coverage {
                println!("oracle coverage {:.1}%", 100.0 * c);
            }
        }
        Command::Tightness {
            common,
            checkpoint,
            methods,
            bins,
            oracle_budget,
        } => {
            let cfg = common.config()?;
            let (methods, _) = parse_methods(&methods)?;
            let opts = eval_options(&common, &cfg, &checkpoint, methods, Some(oracle_budget));
            let stats = commands::tightness(&cfg, &opts, bins)?;
            println!("{:<8} {:>10} {:>10} {:>10}", "method", "mean", "mean|.|", "variance");
            for (name, s) in stats {
                println!("{name:<8} {:>10.5} {:>10.5} {:>10.5}", s.mean, s.mean_abs, s.variance);
            }
        }
        Command::Ablate {
            common,
            sweep,
            values,
            seeds,
        } => {
            let base = common.resolve()?;
            let cfg = RunConfig::from_value(base.clone())?;
            let seeds: Vec<u64> = match seeds {
                Some(s) => s
                    .split(',')
                    .map(|v| v.trim().parse().map_err(|_| Error::Config(format!("bad seed '{v}'"))))
                    .collect::<Result<_, _>>()?,
                None => vec![cfg.seed],
            };
            let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
            let csv = commands::ablate(&base, &sweep, &values, &seeds, &cfg.out)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Json(_) | Error::Shape { .. } => 2,
        Error::NonFinite(_) | Error::Numeric(_) => 3,
        Error::Io { .. } | Error::Format { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
