//! Command-line front end: `gen-data`, `train`, `eval`, `levelsets`, `sample`.
//!
//! Exit status is 0 on success, 1 for usage or configuration errors and 2 for
//! runtime or numeric failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowstate::harness::{self, Checkpoint, EvalSettings, ExperimentConfig, Report};
use flowstate::metrics::Extents;
use flowstate::par::Execution;

#[derive(Parser, Debug)]
#[command(name = "flowstate", version, about = "Conditional normalizing flows for state estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate driving rollouts and write the dataset CSV.
    GenData(GenData),
    /// Train a flow or MDN and write a checkpoint plus loss log.
    Train(Train),
    /// Report KL divergence / held-out log-likelihood of a checkpoint or the UKF.
    Eval(Eval),
    /// Export a density grid with 1/2/3-sigma highest-density thresholds.
    Levelsets(Levelsets),
    /// Draw samples from a checkpoint as `x,y` CSV.
    Sample(Sample),
}

#[derive(Args, Debug)]
struct Common {
    /// key = value config file; flags given on the command line take precedence.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Extra `key=value` settings, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run on the calling thread only.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args, Debug)]
struct GenData {
    #[command(flatten)]
    common: Common,
    /// unimodal or bimodal
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    rollouts: Option<usize>,
}

#[derive(Args, Debug)]
struct Train {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// temporal or history
    #[arg(long)]
    task: Option<String>,
    /// flow or mdn
    #[arg(long)]
    model: Option<String>,
    /// identity, mlp, rnn, gru, lstm or transformer
    #[arg(long)]
    conditioner: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    variable_length: bool,
    /// Loss log path (default: `<out>.loss.csv`).
    #[arg(long, value_name = "PATH")]
    loss_log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalFlags {
    #[arg(long)]
    t_slice: Option<f64>,
    #[arg(long)]
    kl_samples: Option<usize>,
    #[arg(long)]
    kl_k: Option<usize>,
}

#[derive(Args, Debug)]
struct Eval {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "PATH", conflicts_with = "model")]
    checkpoint: Option<PathBuf>,
    /// `ukf` evaluates the filter baseline instead of a checkpoint.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[command(flatten)]
    eval: EvalFlags,
}

#[derive(Args, Debug)]
struct Query {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Time stamp context (temporal checkpoints).
    #[arg(long, conflicts_with = "observations")]
    time: Option<f64>,
    /// `obs_x,obs_y,time` history file (history checkpoints).
    #[arg(long, value_name = "PATH")]
    observations: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Levelsets {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    query: Query,
    #[arg(long, default_value_t = 100)]
    resolution: usize,
    /// Grid bounds `xmin,xmax,ymin,ymax`; default: model samples plus a margin.
    #[arg(long, value_name = "XMIN,XMAX,YMIN,YMAX", allow_hyphen_values = true)]
    extent: Option<String>,
}

#[derive(Args, Debug)]
struct Sample {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    query: Query,
    #[arg(short, long, default_value_t = 1000)]
    n: usize,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<flowstate::Error> for Failure {
    fn from(e: flowstate::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn usage(e: impl ToString) -> Failure {
    Failure::Usage(e.to_string())
}

fn exec(common: &Common) -> Execution {
    if common.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

/// Defaults, then the config file, then `--set`, then dedicated flags.
fn load_config(common: &Common, flags: &[(&str, Option<String>)]) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p).map_err(usage)?,
        None => ExperimentConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k, v).map_err(usage)?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v).map_err(usage)?;
        }
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(T::to_string)
}

fn emit(report: &Report, out: Option<&Path>) -> Result<(), Failure> {
    print!("{report}");
    if let Some(p) = out {
        std::fs::write(p, report.to_string()).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

fn gen_data(a: &GenData) -> Result<(), Failure> {
    let cfg = load_config(&a.common, &[("mode", a.mode.clone()), ("rollouts", opt(&a.rollouts))])?;
    cfg.validate().map_err(usage)?;
    if cfg.rollouts == 0 {
        return Err(usage("--rollouts must be at least 1"));
    }
    let out = a.common.out.clone().unwrap_or_else(|| cfg.dataset.clone());
    let r = harness::gen_data(&cfg, &out, exec(&a.common))?;
    emit(&r, None)
}

fn train(a: &Train) -> Result<(), Failure> {
    let mut flags = vec![
        ("dataset", a.dataset.as_ref().map(|p| p.display().to_string())),
        ("task", a.task.clone()),
        ("model", a.model.clone()),
        ("conditioner", a.conditioner.clone()),
        ("iterations", opt(&a.iterations)),
        ("batch_size", opt(&a.batch_size)),
        ("learning_rate", opt(&a.learning_rate)),
        ("window", opt(&a.window)),
    ];
    if a.variable_length {
        flags.push(("variable_length", Some("true".into())));
    }
    let cfg = load_config(&a.common, &flags)?;
    cfg.validate().map_err(usage)?;
    let out = a.common.out.clone().unwrap_or_else(|| PathBuf::from("checkpoint.json"));
    let (_, r) = harness::train_command(&cfg, &out, a.loss_log.as_deref(), exec(&a.common))?;
    emit(&r, None)
}

fn eval(a: &Eval) -> Result<(), Failure> {
    let flags = [
        ("t_slice", opt(&a.eval.t_slice)),
        ("kl_samples", opt(&a.eval.kl_samples)),
        ("kl_k", opt(&a.eval.kl_k)),
        ("dataset", a.dataset.as_ref().map(|p| p.display().to_string())),
    ];
    let x = exec(&a.common);
    let report = match (&a.checkpoint, a.model.as_deref()) {
        (Some(path), None) => {
            let ck = Checkpoint::load(path)?;
            let mut settings = EvalSettings::from_config(&ck.config);
            if let Some(t) = a.eval.t_slice {
                settings.t_slice = t;
            }
            if let Some(n) = a.eval.kl_samples {
                settings.kl_samples = n;
            }
            if let Some(k) = a.eval.kl_k {
                settings.kl_k = k;
            }
            if let Some(s) = a.common.seed {
                settings.seed = s;
            }
            harness::evaluate(&ck, a.dataset.as_deref(), &settings, x)?
        }
        (None, Some("ukf")) => {
            let cfg = load_config(&a.common, &flags)?;
            cfg.validate().map_err(usage)?;
            harness::evaluate_ukf(&cfg, &EvalSettings::from_config(&cfg), x)?
        }
        (None, Some(other)) => return Err(usage(format!("eval --model supports only 'ukf', got '{other}'"))),
        _ => return Err(usage("eval needs --checkpoint PATH or --model ukf")),
    };
    emit(&report, a.common.out.as_deref())
}

fn parse_extent(s: &str) -> Result<Extents, Failure> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("--extent expects four numbers, got '{s}'")))?;
    if v.len() != 4 {
        return Err(usage(format!("--extent expects four numbers, got '{s}'")));
    }
    Extents::new(v[0], v[1], v[2], v[3]).map_err(usage)
}

fn query(q: &Query) -> Result<(Checkpoint, flowstate::conditioners::Context), Failure> {
    let ck = Checkpoint::load(&q.checkpoint)?;
    let ctx = match harness::query_context(&ck, q.time, q.observations.as_deref()) {
        Ok(c) => c,
        Err(e @ flowstate::Error::InvalidConfig(_)) => return Err(usage(e)),
        Err(e) => return Err(e.into()),
    };
    Ok((ck, ctx))
}

fn levelsets(a: &Levelsets) -> Result<(), Failure> {
    let extents = a.extent.as_deref().map(parse_extent).transpose()?;
    if a.resolution < flowstate::metrics::MIN_RESOLUTION {
        return Err(usage(format!(
            "--resolution must be at least {}",
            flowstate::metrics::MIN_RESOLUTION
        )));
    }
    let (ck, ctx) = query(&a.query)?;
    let seed = a.common.seed.unwrap_or(ck.config.seed);
    let grid = harness::levelsets(&ck, &ctx, extents, a.resolution, seed, exec(&a.common))?;
    let out = a.common.out.clone().unwrap_or_else(|| PathBuf::from("levelsets.csv"));
    let meta = grid.write(&out)?;
    let mut r = Report::default();
    r.push("grid", out.display());
    r.push("metadata", meta.display());
    r.push("resolution", grid.resolution);
    for (name, t) in ["threshold_1sigma", "threshold_2sigma", "threshold_3sigma"].iter().zip(grid.thresholds) {
        r.push(name, t);
    }
    emit(&r, None)
}

fn sample(a: &Sample) -> Result<(), Failure> {
    if a.n == 0 {
        return Err(usage("-n must be at least 1"));
    }
    let (ck, ctx) = query(&a.query)?;
    let seed = a.common.seed.unwrap_or(ck.config.seed);
    let out = a.common.out.clone().unwrap_or_else(|| PathBuf::from("samples.csv"));
    harness::sample_to_csv(&ck, &ctx, a.n, seed, &out)?;
    let mut r = Report::default();
    r.push("samples", out.display());
    r.push("n", a.n);
    r.push("seed", seed);
    emit(&r, None)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Levelsets(a) => levelsets(a),
        Command::Sample(a) => sample(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
