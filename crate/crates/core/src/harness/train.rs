use std::io::Write;
use std::path::Path;

use crate::autodiff::{AdamConfig, AdamState};
use crate::density::ConditionalDensity;
use crate::error::{Error, Result};
use crate::par::Execution;

use super::config::ExperimentConfig;
use super::data::TaskData;
use super::model::{Checkpoint, Model, CHECKPOINT_VERSION};

/// Per-iteration training losses plus the final checkpoint.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub losses: Vec<f64>,
    pub checkpoint: Checkpoint,
}

impl TrainRun {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }
}

/// Mean NLL of `model` on the batch drawn for `iteration`.
pub fn batch_loss<M: ConditionalDensity>(
    model: &M,
    data: &TaskData,
    cfg: &ExperimentConfig,
    iteration: usize,
) -> Result<f64> {
    let rows = data.sample_batch(cfg.seed, iteration, cfg.batch_size)?;
    let (x, c) = data.batch(&rows)?;
    model.nll_loss(&x, &c)
}

/// Adam on minibatch NLL for `cfg.iterations` steps. `log` receives
/// `iteration,nll` lines as training proceeds.
pub fn train(
    cfg: &ExperimentConfig,
    data: &TaskData,
    exec: Execution,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainRun> {
    cfg.validate()?;
    let mut model = Model::build(cfg, data)?;
    let mut adam = AdamState::new(
        model.params(),
        AdamConfig {
            lr: cfg.learning_rate,
            ..AdamConfig::default()
        },
    );
    let log_err = |e: std::io::Error| Error::io("loss log", e);
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "iteration,nll").map_err(log_err)?;
    }
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let rows = data.sample_batch(cfg.seed, it, cfg.batch_size)?;
        let (x, c) = data.batch(&rows)?;
        let (loss, grads) = model.nll_and_grad(&x, &c, cfg.grad_chunk, exec)?;
        if let Some(w) = log.as_deref_mut() {
            writeln!(w, "{it},{loss}").map_err(log_err)?;
        }
        if !loss.is_finite() || !grads.is_finite() {
            if let Some(w) = log.as_deref_mut() {
                w.flush().map_err(log_err)?;
            }
            return Err(Error::NonFiniteLoss { iteration: it });
        }
        losses.push(loss);
        adam.step(model.params_mut(), &grads)?;
    }
    if let Some(w) = log {
        w.flush().map_err(log_err)?;
    }
    let final_loss = batch_loss(&model, data, cfg, cfg.iterations)?;
    if !final_loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration: cfg.iterations,
        });
    }
    Ok(TrainRun {
        losses,
        checkpoint: Checkpoint {
            version: CHECKPOINT_VERSION,
            config: cfg.clone(),
            model,
            optimizer: adam,
            iteration: cfg.iterations,
            final_loss,
        },
    })
}

/// [`train`] with the loss log written to `path`.
pub fn train_with_log_file(cfg: &ExperimentConfig, data: &TaskData, exec: Execution, path: &Path) -> Result<TrainRun> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    train(cfg, data, exec, Some(&mut w)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioners::Variant;
    use crate::dynamics::generate;
    use crate::harness::config::Task;

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig {
            horizon: 30,
            blocks: 2,
            affine_hidden: 8,
            base_hidden: vec![8],
            iterations: 5,
            batch_size: 32,
            learning_rate: 1e-2,
            ..ExperimentConfig::default()
        }
    }

    fn data(cfg: &ExperimentConfig) -> TaskData {
        let recs = generate(&cfg.rollout_config(), 12, Execution::Sequential).unwrap();
        TaskData::build(&recs, cfg).unwrap()
    }

    #[test]
    fn training_is_deterministic_across_execution_modes() {
        let cfg = small_cfg();
        let d = data(&cfg);
        let a = train(&cfg, &d, Execution::Sequential, None).unwrap();
        let b = train(&cfg, &d, Execution::Parallel, None).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.checkpoint.final_loss, b.checkpoint.final_loss);
        assert_eq!(a.losses.len(), 5);
    }

    #[test]
    fn log_has_one_row_per_iteration() {
        let cfg = small_cfg();
        let d = data(&cfg);
        let mut buf = Vec::new();
        let run = train(&cfg, &d, Execution::Sequential, Some(&mut buf)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "iteration,nll");
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[3], format!("2,{}", run.losses[2]));
    }

    #[test]
    fn checkpoint_reload_reproduces_final_loss() {
        let cfg = ExperimentConfig {
            task: Task::History,
            conditioner: Variant::Lstm,
            window: 5,
            ..small_cfg()
        };
        let d = data(&cfg);
        let run = train(&cfg, &d, Execution::Parallel, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        run.checkpoint.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        let again = batch_loss(&back.model, &d, &back.config, back.iteration).unwrap();
        assert!((again - run.checkpoint.final_loss).abs() <= 1e-10);
        assert_eq!(back.optimizer, run.checkpoint.optimizer);
    }

    #[test]
    fn checkpoint_version_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        std::fs::write(&path, r#"{"version": 99}"#).unwrap();
        let err = Checkpoint::load(&path).unwrap_err().to_string();
        assert!(err.contains("version 99"), "{err}");
        std::fs::write(&path, "{").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn divergence_names_the_iteration() {
        let cfg = ExperimentConfig {
            learning_rate: 1e6,
            iterations: 200,
            ..small_cfg()
        };
        let d = data(&cfg);
        match train(&cfg, &d, Execution::Sequential, None) {
            Err(Error::NonFiniteLoss { iteration }) => assert!(iteration < 200),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.losses)),
        }
    }

    #[test]
    fn mdn_trains_on_temporal_rows() {
        let cfg = ExperimentConfig {
            model: crate::harness::config::ModelKind::Mdn,
            iterations: 30,
            ..small_cfg()
        };
        let d = data(&cfg);
        let run = train(&cfg, &d, Execution::Sequential, None).unwrap();
        assert!(run.losses.iter().all(|l| l.is_finite()));
    }
}
