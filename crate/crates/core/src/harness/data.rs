//! Training rows for the two tasks, built from simulated rollouts.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::conditioners::{Context, ContextBatch, ObservationSequence};
use crate::density::ConditionalDensity;
use crate::dynamics::{by_rollout, RolloutRecord};
use crate::error::{Error, Result};
use crate::nn::Standardizer;
use crate::par::{self, Execution};

use super::config::{ExperimentConfig, Task};

/// ChaCha stream used for the rollout split; batch draws use `iteration + 1`.
const SPLIT_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug)]
enum Contexts {
    Times(Vec<f64>),
    /// Row `r` conditions on `obs[start[r]..start[r] + len[r]]`.
    Windows {
        obs: Vec<[f64; 3]>,
        start: Vec<usize>,
        len: Vec<usize>,
    },
}

/// Targets, contexts and the rollout-level train/held-out split.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub task: Task,
    pub points: Vec<[f64; 2]>,
    pub rollout: Vec<usize>,
    pub step: Vec<usize>,
    contexts: Contexts,
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
    heldout_rollouts: Vec<usize>,
}

impl TaskData {
    /// Builds the rows for `cfg.task` and splits them by rollout id.
    pub fn build(records: &[RolloutRecord], cfg: &ExperimentConfig) -> Result<Self> {
        let rollouts = by_rollout(records);
        if rollouts.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        for r in &rollouts {
            if r.iter().enumerate().any(|(k, rec)| rec.step != k) {
                return Err(Error::InvalidConfig(format!(
                    "rollout {} is not stored as consecutive steps from 0",
                    r[0].rollout_id
                )));
            }
        }
        let mut data = TaskData {
            task: cfg.task,
            points: Vec::new(),
            rollout: Vec::new(),
            step: Vec::new(),
            contexts: match cfg.task {
                Task::Temporal => Contexts::Times(Vec::new()),
                Task::History => Contexts::Windows {
                    obs: Vec::new(),
                    start: Vec::new(),
                    len: Vec::new(),
                },
            },
            train: Vec::new(),
            heldout: Vec::new(),
            heldout_rollouts: Vec::new(),
        };
        for r in &rollouts {
            match &mut data.contexts {
                Contexts::Times(times) => {
                    for rec in r.iter().skip(cfg.min_step) {
                        times.push(rec.time);
                        data.points.push([rec.px, rec.py]);
                        data.rollout.push(rec.rollout_id);
                        data.step.push(rec.step);
                    }
                }
                Contexts::Windows { obs, start, len } => {
                    let base = obs.len();
                    obs.extend(r.iter().map(|rec| [rec.obs_x, rec.obs_y, rec.time]));
                    let first = if cfg.variable_length { 1 } else { cfg.window };
                    for t in first..r.len() {
                        let l = if cfg.variable_length { t } else { cfg.window };
                        start.push(base + t - l);
                        len.push(l);
                        data.points.push([r[t].px, r[t].py]);
                        data.rollout.push(r[t].rollout_id);
                        data.step.push(t);
                    }
                }
            }
        }
        if data.points.is_empty() {
            return Err(Error::InvalidConfig(
                "no training rows: rollouts are shorter than the context window".into(),
            ));
        }
        data.split(&rollouts, cfg);
        Ok(data)
    }

    fn split(&mut self, rollouts: &[&[RolloutRecord]], cfg: &ExperimentConfig) {
        let mut ids: Vec<usize> = rollouts.iter().map(|r| r[0].rollout_id).collect();
        ids.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SPLIT_STREAM);
        ids.shuffle(&mut rng);
        let n_hold = if cfg.holdout_fraction > 0.0 && ids.len() > 1 {
            ((cfg.holdout_fraction * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1)
        } else {
            0
        };
        let mut held: Vec<usize> = ids[..n_hold].to_vec();
        held.sort_unstable();
        for (i, id) in self.rollout.iter().enumerate() {
            if held.binary_search(id).is_ok() {
                self.heldout.push(i);
            } else {
                self.train.push(i);
            }
        }
        self.heldout_rollouts = held;
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn heldout_rollouts(&self) -> &[usize] {
        &self.heldout_rollouts
    }

    /// Context of row `r` in its raw form.
    pub fn context(&self, r: usize) -> Context {
        match &self.contexts {
            Contexts::Times(t) => Context::time(t[r]),
            Contexts::Windows { obs, start, len } => Context::Sequence(
                ObservationSequence::new(obs[start[r]..start[r] + len[r]].to_vec())
                    .expect("windows are non-empty"),
            ),
        }
    }

    fn context_len(&self, r: usize) -> usize {
        match &self.contexts {
            Contexts::Times(_) => 1,
            Contexts::Windows { len, .. } => len[r],
        }
    }

    /// Targets and contexts of `rows`, which must share a context length.
    pub fn batch(&self, rows: &[usize]) -> Result<(Tensor, ContextBatch)> {
        if rows.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let x = Tensor::new(
            vec![rows.len(), 2],
            rows.iter().flat_map(|&r| self.points[r]).collect(),
        )?;
        let ctx = match &self.contexts {
            Contexts::Times(t) => {
                ContextBatch::Vectors(Tensor::new(vec![rows.len(), 1], rows.iter().map(|&r| t[r]).collect())?)
            }
            Contexts::Windows { obs, start, len } => {
                let l = len[rows[0]];
                let mut data = Vec::with_capacity(rows.len() * l * 3);
                for &r in rows {
                    if len[r] != l {
                        return Err(Error::Context("batch mixes window lengths".into()));
                    }
                    data.extend(obs[start[r]..start[r] + l].iter().flatten());
                }
                ContextBatch::Sequences(Tensor::new(vec![rows.len(), l, 3], data)?)
            }
        };
        Ok((x, ctx))
    }

    /// `rows` grouped by context length, in increasing length order.
    pub fn groups(&self, rows: &[usize]) -> Vec<Vec<usize>> {
        let mut g: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &r in rows {
            g.entry(self.context_len(r)).or_default().push(r);
        }
        g.into_values().collect()
    }

    /// Training rows for `iteration`, drawn with replacement. The draw depends
    /// only on `(seed, iteration)`. Variable-length windows draw one anchor
    /// row and fill the batch from rows of the same length.
    pub fn sample_batch(&self, seed: u64, iteration: usize, size: usize) -> Result<Vec<usize>> {
        if self.train.is_empty() {
            return Err(Error::Empty("training split"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(iteration as u64 + 1);
        let pool: Vec<usize> = match &self.contexts {
            Contexts::Windows { len, .. } if len.iter().any(|&l| l != len[0]) => {
                let anchor = self.train[rng.gen_range(0..self.train.len())];
                self.train.iter().copied().filter(|&r| len[r] == len[anchor]).collect()
            }
            _ => self.train.clone(),
        };
        Ok((0..size).map(|_| pool[rng.gen_range(0..pool.len())]).collect())
    }

    /// Standardizer for the targets, fitted on the training split.
    pub fn fit_data_normalizer(&self) -> Option<Standardizer> {
        Standardizer::fit(self.train.iter().map(|&r| &self.points[r][..]))
    }

    /// Per-feature standardizer for the raw contexts of the training split.
    pub fn fit_context_normalizer(&self) -> Option<Standardizer> {
        match &self.contexts {
            Contexts::Times(t) => Standardizer::fit(self.train.iter().map(|&r| std::slice::from_ref(&t[r]))),
            Contexts::Windows { obs, start, len } => {
                // every observation of a training rollout, each counted once
                let mut seen = vec![false; obs.len()];
                for &r in &self.train {
                    for s in seen.iter_mut().skip(start[r]).take(len[r]) {
                        *s = true;
                    }
                }
                Standardizer::fit(obs.iter().zip(&seen).filter(|(_, &s)| s).map(|(o, _)| &o[..]))
            }
        }
    }

    /// Mean `log p(x | c)` over `rows`, evaluated in fixed chunks.
    pub fn mean_log_likelihood<M: ConditionalDensity>(&self, model: &M, rows: &[usize], exec: Execution) -> Result<f64> {
        if rows.is_empty() {
            return Err(Error::Empty("log-likelihood rows"));
        }
        let mut total = 0.0;
        for group in self.groups(rows) {
            let parts = par::map_chunks(group.len(), 512, exec, |range| -> Result<f64> {
                let (x, c) = self.batch(&group[range])?;
                Ok(model.log_prob_batch(&x, &c)?.iter().sum())
            });
            for p in parts {
                total += p?;
            }
        }
        Ok(total / rows.len() as f64)
    }
}

/// Noise-free positions of every rollout at `step`.
pub fn slice_points(records: &[RolloutRecord], step: usize) -> Vec<Vec<f64>> {
    records
        .iter()
        .filter(|r| r.step == step)
        .map(|r| vec![r.px, r.py])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{generate, RolloutConfig};

    fn records(n: usize) -> Vec<RolloutRecord> {
        let rc = RolloutConfig {
            horizon: 40,
            ..RolloutConfig::bimodal(4)
        };
        let rc = RolloutConfig {
            psi_mode: crate::dynamics::PsiMode::Switching { switch_step: 10 },
            ..rc
        };
        generate(&rc, n, Execution::Sequential).unwrap()
    }

    fn history_cfg() -> ExperimentConfig {
        ExperimentConfig {
            task: Task::History,
            conditioner: crate::conditioners::Variant::Gru,
            horizon: 40,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn temporal_rows_skip_degenerate_steps() {
        let recs = records(10);
        let cfg = ExperimentConfig {
            horizon: 40,
            ..ExperimentConfig::default()
        };
        let d = TaskData::build(&recs, &cfg).unwrap();
        assert_eq!(d.len(), 10 * (40 - cfg.min_step));
        assert!(d.step.iter().all(|&s| s >= cfg.min_step));
        let r = 7;
        let rec = recs.iter().find(|x| x.rollout_id == d.rollout[r] && x.step == d.step[r]).unwrap();
        assert_eq!(d.points[r], [rec.px, rec.py]);
        assert_eq!(d.context(r), Context::time(rec.time));
    }

    #[test]
    fn history_windows_never_include_the_target_step() {
        let recs = records(6);
        let cfg = history_cfg();
        let d = TaskData::build(&recs, &cfg).unwrap();
        assert_eq!(d.len(), 6 * (40 - cfg.window));
        for r in 0..d.len() {
            let Context::Sequence(seq) = d.context(r) else { panic!() };
            assert_eq!(seq.len(), cfg.window);
            let t_target = d.step[r] as f64 * cfg.dt;
            // strictly earlier observations, ending at step t - 1
            assert!(seq.as_slice().iter().all(|o| o[2] < t_target - 1e-12));
            let last = seq.as_slice()[cfg.window - 1];
            let prev = recs
                .iter()
                .find(|x| x.rollout_id == d.rollout[r] && x.step == d.step[r] - 1)
                .unwrap();
            assert_eq!(last, [prev.obs_x, prev.obs_y, prev.time]);
        }
    }

    #[test]
    fn variable_length_prefixes_grow_with_step() {
        let recs = records(3);
        let cfg = ExperimentConfig {
            variable_length: true,
            ..history_cfg()
        };
        let d = TaskData::build(&recs, &cfg).unwrap();
        for r in 0..d.len() {
            let Context::Sequence(seq) = d.context(r) else { panic!() };
            assert_eq!(seq.len(), d.step[r]);
        }
        let batch = d.sample_batch(1, 0, 32).unwrap();
        let l0 = d.step[batch[0]];
        assert!(batch.iter().all(|&r| d.step[r] == l0));
        assert!(d.batch(&batch).is_ok());
        let mixed = [d.train[0], *d.train.iter().find(|&&r| d.step[r] != d.step[d.train[0]]).unwrap()];
        assert!(d.batch(&mixed).is_err());
    }

    #[test]
    fn split_is_by_rollout_and_seeded() {
        let recs = records(50);
        let cfg = history_cfg();
        let d = TaskData::build(&recs, &cfg).unwrap();
        assert_eq!(d.heldout_rollouts().len(), 5);
        for &r in &d.train {
            assert!(!d.heldout_rollouts().contains(&d.rollout[r]));
        }
        for &r in &d.heldout {
            assert!(d.heldout_rollouts().contains(&d.rollout[r]));
        }
        assert_eq!(d.train.len() + d.heldout.len(), d.len());
        let again = TaskData::build(&recs, &cfg).unwrap();
        assert_eq!(again.heldout_rollouts(), d.heldout_rollouts());
        let other = TaskData::build(&recs, &ExperimentConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(other.heldout_rollouts(), d.heldout_rollouts());
    }

    #[test]
    fn batches_depend_on_seed_and_iteration_only() {
        let d = TaskData::build(&records(8), &history_cfg()).unwrap();
        assert_eq!(d.sample_batch(3, 10, 64).unwrap(), d.sample_batch(3, 10, 64).unwrap());
        assert_ne!(d.sample_batch(3, 10, 64).unwrap(), d.sample_batch(3, 11, 64).unwrap());
        assert_ne!(d.sample_batch(3, 10, 64).unwrap(), d.sample_batch(4, 10, 64).unwrap());
        assert!(d.sample_batch(3, 10, 64).unwrap().iter().all(|r| d.train.contains(r)));
    }

    #[test]
    fn too_short_rollouts_rejected() {
        let recs = records(2);
        let cfg = ExperimentConfig {
            window: 40,
            ..history_cfg()
        };
        assert!(TaskData::build(&recs, &cfg).is_err());
    }

    #[test]
    fn context_normalizer_counts_each_observation_once() {
        let recs = records(4);
        let cfg = ExperimentConfig {
            holdout_fraction: 0.0,
            ..history_cfg()
        };
        let d = TaskData::build(&recs, &cfg).unwrap();
        let n = d.fit_context_normalizer().unwrap();
        // windows cover steps 0..=38 of each rollout
        let rows: Vec<[f64; 3]> = recs.iter().filter(|r| r.step < 39).map(|r| [r.obs_x, r.obs_y, r.time]).collect();
        let direct = Standardizer::fit(rows.iter().map(|r| &r[..])).unwrap();
        for j in 0..3 {
            assert!((n.mean[j] - direct.mean[j]).abs() < 1e-12);
            assert!((n.scale[j] - direct.scale[j]).abs() < 1e-12);
        }
    }
}
