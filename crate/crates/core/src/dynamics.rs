//! Nonholonomic driving simulator producing the unimodal and bimodal datasets.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub px: f64,
    pub py: f64,
    pub theta: f64,
    /// Angular-acceleration state.
    pub phi: f64,
}

/// One Euler step of the equations of motion.
///
/// Position and heading use the pre-step heading and `phi`; `phi` then
/// advances by `dt * psi * c1 * cos(c2 * t)`.
pub fn step(s: RobotState, v: f64, dt: f64, psi: f64, c1: f64, c2: f64, t: f64) -> RobotState {
    RobotState {
        px: s.px + dt * v * s.theta.cos(),
        py: s.py + dt * v * s.theta.sin(),
        theta: s.theta + dt * v * s.phi,
        phi: s.phi + dt * psi * c1 * (c2 * t).cos(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum PsiMode {
    /// `psi = 1` for the whole rollout.
    Fixed,
    /// `psi = 1` until `switch_step`, then one draw from `U[-1, 1]` held to the end.
    Switching { switch_step: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub dt: f64,
    pub horizon: usize,
    pub v_nominal: f64,
    pub c1: f64,
    pub c2: f64,
    pub sigma_v: f64,
    pub sigma_phi: f64,
    pub obs_sigma: f64,
    pub psi_mode: PsiMode,
    pub seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            dt: 0.125,
            horizon: 160,
            v_nominal: 1.0,
            c1: 0.5,
            c2: 0.3,
            sigma_v: 0.05,
            sigma_phi: 0.02,
            obs_sigma: 0.05,
            psi_mode: PsiMode::Fixed,
            seed: 0,
        }
    }
}

impl RolloutConfig {
    pub fn unimodal(seed: u64) -> Self {
        RolloutConfig {
            seed,
            ..Default::default()
        }
    }

    pub fn bimodal(seed: u64) -> Self {
        RolloutConfig {
            seed,
            psi_mode: PsiMode::Switching { switch_step: 40 },
            ..Default::default()
        }
    }

    /// Same dynamics with every noise source switched off.
    pub fn noise_free(&self) -> Self {
        RolloutConfig {
            sigma_v: 0.0,
            sigma_phi: 0.0,
            obs_sigma: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        for (name, s) in [
            ("sigma_v", self.sigma_v),
            ("sigma_phi", self.sigma_phi),
            ("obs_sigma", self.obs_sigma),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(format!("{name} must be non-negative, got {s}"));
            }
        }
        if let PsiMode::Switching { switch_step } = self.psi_mode {
            if switch_step >= self.horizon {
                return bad(format!(
                    "switch step {switch_step} must be below horizon {}",
                    self.horizon
                ));
            }
        }
        Ok(())
    }

    pub fn time_of(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub rollout_id: usize,
    pub step: usize,
    pub time: f64,
    pub px: f64,
    pub py: f64,
    pub obs_x: f64,
    pub obs_y: f64,
    pub psi: f64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// RNG stream for one rollout, derived from `(seed, rollout_id)` only.
pub fn rollout_rng(seed: u64, rollout_id: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(rollout_id as u64)))
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("sigma validated non-negative")
}

/// Simulates one rollout of `config.horizon` records starting at rest at the origin.
pub fn rollout(config: &RolloutConfig, rollout_id: usize) -> Result<Vec<RolloutRecord>> {
    config.validate()?;
    let mut rng = rollout_rng(config.seed, rollout_id);
    let (nv, nphi, nobs) = (
        normal(config.sigma_v),
        normal(config.sigma_phi),
        normal(config.obs_sigma),
    );

    let mut state = RobotState::default();
    let mut psi = 1.0;
    let mut records = Vec::with_capacity(config.horizon);
    for k in 0..config.horizon {
        if let PsiMode::Switching { switch_step } = config.psi_mode {
            if k == switch_step {
                psi = rng.gen_range(-1.0..=1.0);
            }
        }
        let t = config.time_of(k);
        let ox = nobs.sample(&mut rng);
        let oy = nobs.sample(&mut rng);
        records.push(RolloutRecord {
            rollout_id,
            step: k,
            time: t,
            px: state.px,
            py: state.py,
            obs_x: state.px + ox,
            obs_y: state.py + oy,
            psi,
        });
        let v = config.v_nominal + nv.sample(&mut rng);
        state = step(state, v, config.dt, psi, config.c1, config.c2, t);
        // input noise on the commanded angular acceleration, integrated over dt
        state.phi += config.dt * nphi.sample(&mut rng);
    }
    Ok(records)
}

/// Runs rollouts `0..n_rollouts`, ordered by `(rollout_id, step)`.
pub fn generate(config: &RolloutConfig, n_rollouts: usize, exec: Execution) -> Result<Vec<RolloutRecord>> {
    if n_rollouts == 0 {
        return Err(Error::InvalidConfig("n_rollouts must be at least 1".into()));
    }
    config.validate()?;
    let per: Vec<Result<Vec<RolloutRecord>>> =
        par::map_indexed(n_rollouts, exec, |id| rollout(config, id));
    let mut out = Vec::with_capacity(n_rollouts * config.horizon);
    for r in per {
        out.extend(r?);
    }
    Ok(out)
}

pub const CSV_HEADER: &str = "rollout_id,step,time,px,py,obs_x,obs_y,psi";

/// Formats a float with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_csv(path: &Path, records: &[RolloutRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for r in records {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.rollout_id,
                r.step,
                fmt_f64(r.time),
                fmt_f64(r.px),
                fmt_f64(r.py),
                fmt_f64(r.obs_x),
                fmt_f64(r.obs_y),
                fmt_f64(r.psi)
            )?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Simulates and writes a dataset in one call.
pub fn generate_dataset(
    config: &RolloutConfig,
    n_rollouts: usize,
    path: &Path,
    exec: Execution,
) -> Result<Vec<RolloutRecord>> {
    let records = generate(config, n_rollouts, exec)?;
    write_csv(path, &records)?;
    Ok(records)
}

pub fn read_csv(path: &Path) -> Result<Vec<RolloutRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 1;
        if i == 0 {
            if line.trim() != CSV_HEADER {
                return Err(parse_err(lineno, format!("expected header `{CSV_HEADER}`")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(parse_err(lineno, format!("expected 8 fields, found {}", fields.len())));
        }
        let int = |s: &str| s.trim().parse::<usize>().map_err(|e| parse_err(lineno, e.to_string()));
        let float = |s: &str| s.trim().parse::<f64>().map_err(|e| parse_err(lineno, e.to_string()));
        records.push(RolloutRecord {
            rollout_id: int(fields[0])?,
            step: int(fields[1])?,
            time: float(fields[2])?,
            px: float(fields[3])?,
            py: float(fields[4])?,
            obs_x: float(fields[5])?,
            obs_y: float(fields[6])?,
            psi: float(fields[7])?,
        });
    }
    if records.is_empty() {
        return Err(parse_err(1, "dataset has no rows".into()));
    }
    Ok(records)
}

/// Groups `(rollout_id, step)`-ordered records into per-rollout slices.
pub fn by_rollout(records: &[RolloutRecord]) -> Vec<&[RolloutRecord]> {
    records
        .chunk_by(|a, b| a.rollout_id == b.rollout_id)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn straight_line_step() {
        let s = step(RobotState::default(), 1.0, 0.1, 1.0, 0.5, 0.3, 0.0);
        assert!((s.px - 0.1).abs() < 1e-15);
        assert_eq!(s.py, 0.0);
        assert_eq!(s.theta, 0.0);
    }

    #[test]
    fn zero_speed_only_moves_phi() {
        let s0 = RobotState {
            px: 1.0,
            py: -2.0,
            theta: 0.3,
            phi: 0.1,
        };
        let s = step(s0, 0.0, 0.1, 1.0, 0.5, 0.3, 2.0);
        assert_eq!((s.px, s.py, s.theta), (s0.px, s0.py, s0.theta));
        assert!((s.phi - (0.1 + 0.1 * 0.5 * (0.6f64).cos())).abs() < 1e-15);
    }

    #[test]
    fn hand_evaluated_step() {
        let s0 = RobotState {
            px: 0.0,
            py: 0.0,
            theta: FRAC_PI_2,
            phi: 0.5,
        };
        let s = step(s0, 2.0, 0.1, 1.0, 1.0, 0.0, 0.0);
        assert!(s.px.abs() < 1e-15);
        assert!((s.py - 0.2).abs() < 1e-15);
        assert!((s.theta - (FRAC_PI_2 + 0.1)).abs() < 1e-15);
        assert!((s.phi - 0.6).abs() < 1e-15);
    }

    #[test]
    fn noise_free_rollout_is_nominal_and_seed_invariant() {
        let cfg = RolloutConfig::unimodal(3).noise_free();
        let a = rollout(&cfg, 0).unwrap();
        let b = rollout(&RolloutConfig { seed: 99, ..cfg.clone() }, 5).unwrap();
        let mut s = RobotState::default();
        for (k, r) in a.iter().enumerate() {
            assert_eq!((r.px, r.py), (s.px, s.py));
            assert_eq!((r.obs_x, r.obs_y), (s.px, s.py));
            assert_eq!(r.psi, 1.0);
            assert_eq!(r.time, k as f64 * cfg.dt);
            s = step(s, cfg.v_nominal, cfg.dt, 1.0, cfg.c1, cfg.c2, cfg.time_of(k));
        }
        for (x, y) in a.iter().zip(&b) {
            assert_eq!((x.px, x.py, x.step), (y.px, y.py, y.step));
        }
    }

    #[test]
    fn rollout_is_reproducible() {
        let cfg = RolloutConfig::bimodal(11);
        assert_eq!(rollout(&cfg, 4).unwrap(), rollout(&cfg, 4).unwrap());
        assert_ne!(rollout(&cfg, 4).unwrap(), rollout(&cfg, 5).unwrap());
    }

    #[test]
    fn switching_psi_is_uniform() {
        let cfg = RolloutConfig::bimodal(1);
        let psis: Vec<f64> = (0..1000)
            .map(|id| {
                let r = rollout(&cfg, id).unwrap();
                assert!(r[..40].iter().all(|x| x.psi == 1.0));
                assert!(r[40..].iter().all(|x| x.psi == r[40].psi));
                r[40].psi
            })
            .collect();
        let mean = psis.iter().sum::<f64>() / psis.len() as f64;
        assert!(mean.abs() <= 0.1, "mean psi {mean}");
        let lo = psis.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = psis.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo < -0.95 && hi > 0.95);
        // every tenth of [-1, 1] is hit
        for b in 0..20 {
            let (a, z) = (-1.0 + 0.1 * b as f64, -0.9 + 0.1 * b as f64);
            assert!(psis.iter().any(|&p| p >= a && p < z));
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = RolloutConfig::default();
        for cfg in [
            RolloutConfig { dt: 0.0, ..base.clone() },
            RolloutConfig { horizon: 0, ..base.clone() },
            RolloutConfig { sigma_v: -1.0, ..base.clone() },
            RolloutConfig {
                psi_mode: PsiMode::Switching { switch_step: 160 },
                ..base.clone()
            },
        ] {
            assert!(matches!(rollout(&cfg, 0), Err(Error::InvalidConfig(_))));
        }
        assert!(generate(&base, 0, Execution::Sequential).is_err());
    }

    #[test]
    fn csv_rows_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let cfg = RolloutConfig {
            horizon: 3,
            ..RolloutConfig::unimodal(2)
        };
        generate_dataset(&cfg, 2, &path, Execution::Parallel).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.split('\n').filter(|l| !l.is_empty()).collect();
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[0], CSV_HEADER);
        assert!(!text.contains('\r'));
        let back = read_csv(&path).unwrap();
        assert_eq!(back, generate(&cfg, 2, Execution::Sequential).unwrap());
        assert!(back.iter().all(|r| r.psi == 1.0));
    }

    #[test]
    fn unwritable_path_reports_path() {
        let err = write_csv(Path::new("/nonexistent-dir/x.csv"), &[]).unwrap_err();
        assert!(err.to_string().contains("/nonexistent-dir/x.csv"));
    }
}
