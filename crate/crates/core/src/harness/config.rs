use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conditioners::Variant;
use crate::dynamics::{PsiMode, RolloutConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Condition on the time stamp only.
    Temporal,
    /// Condition on the preceding window of noisy observations.
    History,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Flow,
    Mdn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetMode {
    Unimodal,
    Bimodal,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $name:literal),* $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($name => Ok($ty::$variant),)*
                    other => Err(Error::InvalidConfig(format!(
                        "unknown {} '{other}' (expected one of: {})",
                        stringify!($ty).to_ascii_lowercase(),
                        [$($name),*].join(", ")
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $name,)* })
            }
        }
    };
}

keyword_enum!(Task { Temporal => "temporal", History => "history" });
keyword_enum!(ModelKind { Flow => "flow", Mdn => "mdn" });
keyword_enum!(DatasetMode { Unimodal => "unimodal", Bimodal => "bimodal" });

/// Every setting of a gen-data / train / eval run.
///
/// Config files hold one `key = value` pair per line; `#` starts a comment.
/// Keys are the long CLI flag names with `_` in place of `-`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: Task,
    pub model: ModelKind,
    pub conditioner: Variant,
    pub dataset: PathBuf,
    pub seed: u64,

    // dataset generation
    pub mode: DatasetMode,
    pub rollouts: usize,
    pub dt: f64,
    pub horizon: usize,
    pub v_nominal: f64,
    pub c1: f64,
    pub c2: f64,
    pub sigma_v: f64,
    pub sigma_phi: f64,
    pub obs_sigma: f64,
    pub switch_step: usize,

    // model
    pub blocks: usize,
    pub affine_hidden: usize,
    pub base_hidden: Vec<usize>,
    pub cond_hidden: usize,
    pub cond_output: usize,
    pub mdn_components: usize,
    pub mdn_hidden: Vec<usize>,

    // training
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Rows per gradient tape; chunks are reduced in order.
    pub grad_chunk: usize,
    /// Every `holdout_every`-th rollout (after a seeded shuffle) is held out.
    pub holdout_fraction: f64,
    /// Temporal task: records before this step are skipped (the first steps
    /// are exactly degenerate in at least one coordinate).
    pub min_step: usize,

    // evaluation
    pub t_slice: f64,
    pub window: usize,
    pub variable_length: bool,
    pub kl_samples: usize,
    pub kl_k: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let r = RolloutConfig::default();
        ExperimentConfig {
            task: Task::Temporal,
            model: ModelKind::Flow,
            conditioner: Variant::Identity,
            dataset: PathBuf::from("dataset.csv"),
            seed: 0,
            mode: DatasetMode::Unimodal,
            rollouts: 313,
            dt: r.dt,
            horizon: r.horizon,
            v_nominal: r.v_nominal,
            c1: r.c1,
            c2: r.c2,
            sigma_v: r.sigma_v,
            sigma_phi: r.sigma_phi,
            obs_sigma: r.obs_sigma,
            switch_step: 40,
            blocks: 5,
            affine_hidden: 32,
            base_hidden: vec![32, 32],
            cond_hidden: 16,
            cond_output: 4,
            mdn_components: 5,
            mdn_hidden: vec![8, 8],
            iterations: 2000,
            batch_size: 512,
            learning_rate: 1e-3,
            grad_chunk: 128,
            holdout_fraction: 0.1,
            min_step: 3,
            t_slice: 13.0,
            window: 15,
            variable_length: false,
            kl_samples: 1000,
            kl_k: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("invalid value '{value}' for {key}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("invalid value '{value}' for {key}"))),
    }
}

impl ExperimentConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let k = key.as_str();
        match k {
            "task" => self.task = value.parse()?,
            "model" => self.model = value.parse()?,
            "conditioner" => self.conditioner = value.trim().parse()?,
            "dataset" => self.dataset = PathBuf::from(value.trim()),
            "seed" => self.seed = parse(k, value)?,
            "mode" => self.mode = value.parse()?,
            "rollouts" => self.rollouts = parse(k, value)?,
            "dt" => self.dt = parse(k, value)?,
            "horizon" => self.horizon = parse(k, value)?,
            "v_nominal" => self.v_nominal = parse(k, value)?,
            "c1" => self.c1 = parse(k, value)?,
            "c2" => self.c2 = parse(k, value)?,
            "sigma_v" => self.sigma_v = parse(k, value)?,
            "sigma_phi" => self.sigma_phi = parse(k, value)?,
            "obs_sigma" => self.obs_sigma = parse(k, value)?,
            "switch_step" => self.switch_step = parse(k, value)?,
            "blocks" => self.blocks = parse(k, value)?,
            "affine_hidden" => self.affine_hidden = parse(k, value)?,
            "base_hidden" => self.base_hidden = parse_list(k, value)?,
            "cond_hidden" => self.cond_hidden = parse(k, value)?,
            "cond_output" => self.cond_output = parse(k, value)?,
            "mdn_components" => self.mdn_components = parse(k, value)?,
            "mdn_hidden" => self.mdn_hidden = parse_list(k, value)?,
            "iterations" => self.iterations = parse(k, value)?,
            "batch_size" => self.batch_size = parse(k, value)?,
            "learning_rate" | "lr" => self.learning_rate = parse(k, value)?,
            "grad_chunk" => self.grad_chunk = parse(k, value)?,
            "holdout_fraction" => self.holdout_fraction = parse(k, value)?,
            "min_step" => self.min_step = parse(k, value)?,
            "t_slice" => self.t_slice = parse(k, value)?,
            "window" => self.window = parse(k, value)?,
            "variable_length" => self.variable_length = parse_bool(k, value)?,
            "kl_samples" => self.kl_samples = parse(k, value)?,
            "kl_k" => self.kl_k = parse(k, value)?,
            _ => return Err(Error::InvalidConfig(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults.
    pub fn parse_str(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_str(text, origin)?;
        Ok(cfg)
    }

    pub fn apply_str(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got '{line}'")))?;
            self.set(k, v).map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::parse_str(&text, path)
    }

    /// `key = value` text that [`ExperimentConfig::parse_str`] reads back.
    pub fn to_config_string(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        [
            format!("task = {}", self.task),
            format!("model = {}", self.model),
            format!("conditioner = {}", self.conditioner),
            format!("dataset = {}", self.dataset.display()),
            format!("seed = {}", self.seed),
            format!("mode = {}", self.mode),
            format!("rollouts = {}", self.rollouts),
            format!("dt = {}", self.dt),
            format!("horizon = {}", self.horizon),
            format!("v_nominal = {}", self.v_nominal),
            format!("c1 = {}", self.c1),
            format!("c2 = {}", self.c2),
            format!("sigma_v = {}", self.sigma_v),
            format!("sigma_phi = {}", self.sigma_phi),
            format!("obs_sigma = {}", self.obs_sigma),
            format!("switch_step = {}", self.switch_step),
            format!("blocks = {}", self.blocks),
            format!("affine_hidden = {}", self.affine_hidden),
            format!("base_hidden = {}", list(&self.base_hidden)),
            format!("cond_hidden = {}", self.cond_hidden),
            format!("cond_output = {}", self.cond_output),
            format!("mdn_components = {}", self.mdn_components),
            format!("mdn_hidden = {}", list(&self.mdn_hidden)),
            format!("iterations = {}", self.iterations),
            format!("batch_size = {}", self.batch_size),
            format!("learning_rate = {}", self.learning_rate),
            format!("grad_chunk = {}", self.grad_chunk),
            format!("holdout_fraction = {}", self.holdout_fraction),
            format!("min_step = {}", self.min_step),
            format!("t_slice = {}", self.t_slice),
            format!("window = {}", self.window),
            format!("variable_length = {}", self.variable_length),
            format!("kl_samples = {}", self.kl_samples),
            format!("kl_k = {}", self.kl_k),
        ]
        .join("\n")
            + "\n"
    }

    pub fn rollout_config(&self) -> RolloutConfig {
        RolloutConfig {
            dt: self.dt,
            horizon: self.horizon,
            v_nominal: self.v_nominal,
            c1: self.c1,
            c2: self.c2,
            sigma_v: self.sigma_v,
            sigma_phi: self.sigma_phi,
            obs_sigma: self.obs_sigma,
            psi_mode: match self.mode {
                DatasetMode::Unimodal => PsiMode::Fixed,
                DatasetMode::Bimodal => PsiMode::Switching {
                    switch_step: self.switch_step,
                },
            },
            seed: self.seed,
        }
    }

    /// Step index of the evaluation time slice.
    pub fn slice_step(&self) -> Result<usize> {
        let s = self.t_slice / self.dt;
        if !(s.is_finite() && s >= 0.0) || (s - s.round()).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "t_slice {} is not a multiple of dt {}",
                self.t_slice, self.dt
            )));
        }
        Ok(s.round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad(format!("holdout_fraction {} outside [0, 1)", self.holdout_fraction));
        }
        if self.grad_chunk == 0 || self.window == 0 || self.kl_k == 0 {
            return bad("grad_chunk, window and kl_k must be positive".into());
        }
        if self.kl_samples < self.kl_k + 1 {
            return bad(format!("kl_samples must exceed kl_k ({})", self.kl_k));
        }
        match (self.task, self.model, self.conditioner.is_sequential()) {
            (Task::Temporal, ModelKind::Flow, true) => {
                return bad(format!(
                    "temporal task needs an identity or mlp conditioner, got {}",
                    self.conditioner
                ))
            }
            (Task::History, ModelKind::Flow, false) => {
                return bad(format!(
                    "history task needs a sequence conditioner (rnn, gru, lstm, transformer), got {}",
                    self.conditioner
                ))
            }
            (Task::History, ModelKind::Mdn, _) => return bad("the mdn baseline supports the temporal task only".into()),
            _ => {}
        }
        self.rollout_config().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_file_text() {
        let text = "# comment\ntask = history\nconditioner=gru\nbase_hidden = 16, 16\nlr = 0.01  # inline\n\n";
        let cfg = ExperimentConfig::parse_str(text, Path::new("x.cfg")).unwrap();
        assert_eq!(cfg.task, Task::History);
        assert_eq!(cfg.conditioner, Variant::Gru);
        assert_eq!(cfg.base_hidden, vec![16, 16]);
        assert_eq!(cfg.learning_rate, 0.01);
        cfg.validate().unwrap();
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = ExperimentConfig::parse_str("seed = 1\nbatch_size = many\n", Path::new("a.cfg")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("a.cfg") && msg.contains('2'), "{msg}");
        assert!(ExperimentConfig::parse_str("nonsense\n", Path::new("a.cfg")).is_err());
        assert!(ExperimentConfig::parse_str("colour = red\n", Path::new("a.cfg")).is_err());
    }

    #[test]
    fn config_text_roundtrips() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("task", "history").unwrap();
        cfg.set("conditioner", "transformer").unwrap();
        cfg.set("mode", "bimodal").unwrap();
        cfg.set("variable-length", "true").unwrap();
        let back = ExperimentConfig::parse_str(&cfg.to_config_string(), Path::new("-")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn task_forces_conditioner_kind() {
        let mut cfg = ExperimentConfig::default();
        cfg.conditioner = Variant::Lstm;
        assert!(cfg.validate().is_err());
        cfg.task = Task::History;
        assert!(cfg.validate().is_ok());
        cfg.conditioner = Variant::Mlp;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        cfg.batch_size = 1;
        cfg.iterations = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn slice_step_from_time() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.slice_step().unwrap(), 104);
        let cfg = ExperimentConfig {
            t_slice: 13.01,
            ..ExperimentConfig::default()
        };
        assert!(cfg.slice_step().is_err());
    }
}
