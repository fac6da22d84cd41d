//! The gen-data / train / eval / levelsets / sample workflows.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::baselines::DrivingUkf;
use crate::conditioners::{Context, ObservationSequence};
use crate::density::ConditionalDensity;
use crate::dynamics::{generate_dataset, read_csv, RolloutRecord};
use crate::error::{Error, Result};
use crate::metrics::{knn_kl_estimate, level_set_grid, Extents, KlEstimate, LevelSetGrid};
use crate::par::Execution;

use super::config::{ExperimentConfig, Task};
use super::data::{slice_points, TaskData};
use super::model::Checkpoint;
use super::train::{train_with_log_file, TrainRun};

/// Ordered `key=value` lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report(pub Vec<(String, String)>);

impl Report {
    pub fn push(&mut self, key: &str, value: impl fmt::Display) {
        self.0.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key)?.parse().ok()
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.0 {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

pub fn gen_data(cfg: &ExperimentConfig, out: &Path, exec: Execution) -> Result<Report> {
    cfg.validate()?;
    if cfg.rollouts == 0 {
        return Err(Error::InvalidConfig("rollouts must be at least 1".into()));
    }
    let recs = generate_dataset(&cfg.rollout_config(), cfg.rollouts, out, exec)?;
    let mut r = Report::default();
    r.push("dataset", out.display());
    r.push("mode", cfg.mode);
    r.push("rollouts", cfg.rollouts);
    r.push("rows", recs.len());
    r.push("seed", cfg.seed);
    Ok(r)
}

/// Loads the dataset, trains, and writes the checkpoint to `out` and the loss
/// log next to it (or to `loss_log`).
pub fn train_command(
    cfg: &ExperimentConfig,
    out: &Path,
    loss_log: Option<&Path>,
    exec: Execution,
) -> Result<(TrainRun, Report)> {
    cfg.validate()?;
    let recs = read_csv(&cfg.dataset)?;
    let data = TaskData::build(&recs, cfg)?;
    let log_path = loss_log.map(Path::to_path_buf).unwrap_or_else(|| with_suffix(out, ".loss.csv"));
    let run = train_with_log_file(cfg, &data, exec, &log_path)?;
    run.checkpoint.save(out)?;
    let mut r = Report::default();
    r.push("task", cfg.task);
    r.push("model", cfg.model);
    r.push("conditioner", cfg.conditioner);
    r.push("iterations", cfg.iterations);
    r.push("train_rows", data.train.len());
    r.push("heldout_rows", data.heldout.len());
    r.push("initial_nll", run.initial_loss());
    r.push("final_nll", run.checkpoint.final_loss);
    r.push("checkpoint", out.display());
    r.push("loss_log", log_path.display());
    Ok((run, r))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

/// Noise-free dataset positions at the configured time slice.
pub fn slice_targets(records: &[RolloutRecord], cfg: &ExperimentConfig) -> Result<Tensor> {
    let step = cfg.slice_step()?;
    let pts = slice_points(records, step);
    if pts.is_empty() {
        return Err(Error::InvalidArgument {
            op: "eval",
            msg: format!("dataset has no records at t = {} (step {step})", cfg.t_slice),
        });
    }
    Tensor::from_rows(&pts)
}

/// Evaluation-time settings; [`EvalSettings::from_config`] takes them from
/// the run configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSettings {
    pub t_slice: f64,
    pub kl_samples: usize,
    pub kl_k: usize,
    /// Seeds the model samples used by the KL estimate.
    pub seed: u64,
}

impl EvalSettings {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        EvalSettings {
            t_slice: cfg.t_slice,
            kl_samples: cfg.kl_samples,
            kl_k: cfg.kl_k,
            seed: cfg.seed,
        }
    }

    fn apply(&self, cfg: &ExperimentConfig) -> Result<ExperimentConfig> {
        let out = ExperimentConfig {
            t_slice: self.t_slice,
            kl_samples: self.kl_samples,
            kl_k: self.kl_k,
            ..cfg.clone()
        };
        out.validate()?;
        out.slice_step()?;
        Ok(out)
    }
}

/// k-NN KL divergence of `model` samples at the time slice against the data.
pub fn temporal_kl<M: ConditionalDensity>(
    model: &M,
    records: &[RolloutRecord],
    cfg: &ExperimentConfig,
    eval: &EvalSettings,
    exec: Execution,
) -> Result<KlEstimate> {
    let cfg = eval.apply(cfg)?;
    let target = slice_targets(records, &cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(eval.seed);
    let samples = model.sample(cfg.kl_samples, &Context::time(cfg.t_slice), &mut rng)?;
    knn_kl_estimate(&samples, &target, cfg.kl_k, exec)
}

/// KL divergence of the UKF position belief at the time slice.
pub fn ukf_kl(records: &[RolloutRecord], cfg: &ExperimentConfig, eval: &EvalSettings, exec: Execution) -> Result<KlEstimate> {
    let cfg = eval.apply(cfg)?;
    let target = slice_targets(records, &cfg)?;
    let ukf = DrivingUkf::new(cfg.rollout_config());
    let mut rng = ChaCha8Rng::seed_from_u64(eval.seed);
    let samples = ukf.sample_positions(cfg.slice_step()?, cfg.kl_samples, &mut rng)?;
    knn_kl_estimate(&Tensor::from_rows(&samples)?, &target, cfg.kl_k, exec)
}

fn push_kl(r: &mut Report, kl: &KlEstimate) {
    r.push("kl", kl.value);
    r.push("kl_n", kl.n);
    r.push("kl_m", kl.m);
    r.push("kl_k", kl.k);
}

/// Evaluates a checkpoint on its (or an overriding) dataset. The held-out
/// split is the one the checkpoint was trained with.
pub fn evaluate(ck: &Checkpoint, dataset: Option<&Path>, eval: &EvalSettings, exec: Execution) -> Result<Report> {
    let cfg = &ck.config;
    let path = dataset.unwrap_or(&cfg.dataset);
    let recs = read_csv(path)?;
    let data = TaskData::build(&recs, cfg)?;
    let mut r = Report::default();
    r.push("task", cfg.task);
    r.push("model", cfg.model);
    r.push("conditioner", cfg.conditioner);
    r.push("dataset", path.display());
    r.push("iteration", ck.iteration);
    r.push("final_train_nll", ck.final_loss);
    if !data.heldout.is_empty() {
        r.push("heldout_rows", data.heldout.len());
        r.push(
            "heldout_mean_log_likelihood",
            data.mean_log_likelihood(&ck.model, &data.heldout, exec)?,
        );
    }
    if cfg.task == Task::Temporal {
        r.push("t_slice", eval.t_slice);
        push_kl(&mut r, &temporal_kl(&ck.model, &recs, cfg, eval, exec)?);
    }
    Ok(r)
}

/// The UKF baseline needs no training: it filters the nominal trajectory.
pub fn evaluate_ukf(cfg: &ExperimentConfig, eval: &EvalSettings, exec: Execution) -> Result<Report> {
    let recs = read_csv(&cfg.dataset)?;
    let mut r = Report::default();
    r.push("task", Task::Temporal);
    r.push("model", "ukf");
    r.push("dataset", cfg.dataset.display());
    r.push("t_slice", eval.t_slice);
    push_kl(&mut r, &ukf_kl(&recs, cfg, eval, exec)?);
    Ok(r)
}

/// Reads an observation history: one `obs_x,obs_y,time` row per line, an
/// optional header, `#` comments allowed.
pub fn read_observations(path: &Path) -> Result<ObservationSequence> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut obs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() || (obs.is_empty() && line.starts_with("obs_x")) {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(err(format!("expected obs_x,obs_y,time, found {} fields", fields.len())));
        }
        let mut row = [0.0f64; 3];
        for (v, f) in row.iter_mut().zip(&fields) {
            *v = f.parse().map_err(|_| err(format!("'{f}' is not a number")))?;
            if !v.is_finite() {
                return Err(err(format!("'{f}' is not finite")));
            }
        }
        if let Some(prev) = obs.last().map(|o: &[f64; 3]| o[2]) {
            if row[2] <= prev {
                return Err(err(format!("time {} does not increase", row[2])));
            }
        }
        obs.push(row);
    }
    if obs.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: "no observations".into(),
        });
    }
    ObservationSequence::new(obs)
}

/// Context for the levelsets and sample commands: a time for temporal models,
/// an observation file for history models.
pub fn query_context(ck: &Checkpoint, time: Option<f64>, observations: Option<&Path>) -> Result<Context> {
    match (ck.config.task, time, observations) {
        (Task::Temporal, Some(t), None) => {
            if !t.is_finite() {
                return Err(Error::InvalidConfig(format!("time {t} is not finite")));
            }
            Ok(Context::time(t))
        }
        (Task::History, None, Some(p)) => Ok(Context::Sequence(read_observations(p)?)),
        (Task::Temporal, _, _) => Err(Error::InvalidConfig("temporal models need --time and no --observations".into())),
        (Task::History, _, _) => Err(Error::InvalidConfig("history models need --observations and no --time".into())),
    }
}

/// Density grid with its HDR thresholds. Without `extents` the grid covers
/// the model's own samples plus a 25% margin.
pub fn levelsets(
    ck: &Checkpoint,
    ctx: &Context,
    extents: Option<Extents>,
    resolution: usize,
    seed: u64,
    exec: Execution,
) -> Result<LevelSetGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extents = match extents {
        Some(e) => e,
        None => Extents::around(&ck.model.sample(2000, ctx, &mut rng)?, 0.25)?,
    };
    level_set_grid(&ck.model, ctx, extents, resolution, &mut rng, exec)
}

/// Writes `n` samples as `x,y` CSV.
pub fn sample_to_csv(ck: &Checkpoint, ctx: &Context, n: usize, seed: u64, out: &Path) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = ck.model.sample(n, ctx, &mut rng)?;
    let write = || -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(out)?);
        writeln!(w, "x,y")?;
        for r in s.rows() {
            writeln!(w, "{},{}", r[0], r[1])?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(out, e))?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{generate, RolloutConfig};

    #[test]
    fn report_lines() {
        let mut r = Report::default();
        r.push("kl", 0.25);
        r.push("n", 3);
        assert_eq!(r.to_string(), "kl=0.25\nn=3\n");
        assert_eq!(r.get_f64("kl"), Some(0.25));
        assert_eq!(r.get("missing"), None);
    }

    #[test]
    fn observation_file_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("obs.csv");
        std::fs::write(&p, "obs_x,obs_y,time\n0,0,0\n1,2\n").unwrap();
        let e = read_observations(&p).unwrap_err().to_string();
        assert!(e.contains("line 3"), "{e}");
        std::fs::write(&p, "0,0,0\n1,x,1\n").unwrap();
        assert!(read_observations(&p).unwrap_err().to_string().contains("line 2"));
        std::fs::write(&p, "0,0,1\n1,1,1\n").unwrap();
        assert!(read_observations(&p).unwrap_err().to_string().contains("increase"));
        std::fs::write(&p, "# only a comment\n").unwrap();
        assert!(read_observations(&p).is_err());
        std::fs::write(&p, "obs_x,obs_y,time\n0.1,0.2,0\n0.3,0.4,0.125\n").unwrap();
        assert_eq!(read_observations(&p).unwrap().len(), 2);
    }

    #[test]
    fn empty_slice_is_named() {
        let rc = RolloutConfig {
            horizon: 50,
            ..RolloutConfig::unimodal(1)
        };
        let recs = generate(&rc, 4, Execution::Sequential).unwrap();
        let cfg = ExperimentConfig {
            horizon: 50,
            ..ExperimentConfig::default()
        };
        let e = slice_targets(&recs, &cfg).unwrap_err().to_string();
        assert!(e.contains("t = 13"), "{e}");
        let cfg = ExperimentConfig {
            t_slice: 2.0,
            ..cfg
        };
        assert_eq!(slice_targets(&recs, &cfg).unwrap().shape(), &[4, 2]);
    }
}
