//! Unscented Kalman filter.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, RobotState, RolloutConfig};
use crate::error::{Error, Result};

/// Mean and covariance of a Gaussian state estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::Shape {
                op: "belief",
                lhs: vec![mean.len()],
                rhs: vec![cov.nrows(), cov.ncols()],
            });
        }
        Ok(GaussianBelief { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Draws `n` samples of the sub-vector `indices`.
    pub fn sample_marginal<R: Rng + ?Sized>(&self, indices: &[usize], n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        let k = indices.len();
        let mean = DVector::from_iterator(k, indices.iter().map(|&i| self.mean[i]));
        let cov = DMatrix::from_fn(k, k, |a, b| self.cov[(indices[a], indices[b])]);
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("marginal belief covariance".into()))?;
        let l = chol.l();
        Ok((0..n)
            .map(|_| {
                let e = DVector::from_iterator(k, (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)));
                (&mean + &l * e).iter().copied().collect()
            })
            .collect())
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m = (&*m + t) * 0.5;
}

/// Sigma-point spread and the additive noise covariances.
#[derive(Clone, Debug, PartialEq)]
pub struct UkfParams {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
    /// Process noise `Q`.
    pub process_noise: DMatrix<f64>,
    /// Observation noise `R`.
    pub observation_noise: DMatrix<f64>,
}

impl UkfParams {
    pub fn new(process_noise: DMatrix<f64>, observation_noise: DMatrix<f64>) -> Self {
        UkfParams {
            alpha: 0.1,
            beta: 2.0,
            kappa: 0.0,
            process_noise,
            observation_noise,
        }
    }

    pub fn lambda(&self, n: usize) -> f64 {
        let n = n as f64;
        self.alpha * self.alpha * (n + self.kappa) - n
    }
}

/// Unscented point set with its mean and covariance weights.
#[derive(Clone, Debug)]
pub struct SigmaPoints {
    pub points: Vec<DVector<f64>>,
    pub mean_weights: Vec<f64>,
    pub cov_weights: Vec<f64>,
}

impl SigmaPoints {
    fn mean_of(&self, pts: &[DVector<f64>]) -> DVector<f64> {
        let mut m = DVector::zeros(pts[0].len());
        for (p, w) in pts.iter().zip(&self.mean_weights) {
            m += p * *w;
        }
        m
    }

    fn cross_cov(&self, a: &[DVector<f64>], ma: &DVector<f64>, b: &[DVector<f64>], mb: &DVector<f64>) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(ma.len(), mb.len());
        for ((pa, pb), w) in a.iter().zip(b).zip(&self.cov_weights) {
            c += (pa - ma) * (pb - mb).transpose() * *w;
        }
        c
    }

    /// Weighted mean and covariance of the points themselves.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let m = self.mean_of(&self.points);
        let c = self.cross_cov(&self.points, &m, &self.points, &m);
        (m, c)
    }
}

/// `2n + 1` points: the mean and `mean ± column_i(chol((n + lambda) cov))`.
pub fn sigma_points(belief: &GaussianBelief, params: &UkfParams) -> Result<SigmaPoints> {
    let n = belief.dim();
    let lambda = params.lambda(n);
    let c = n as f64 + lambda;
    if c <= 0.0 {
        return Err(Error::InvalidConfig(format!("n + lambda = {c} must be positive")));
    }
    let chol = (&belief.cov * c)
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("belief covariance".into()))?;
    let l = chol.l();
    let mut points = Vec::with_capacity(2 * n + 1);
    points.push(belief.mean.clone());
    for i in 0..n {
        points.push(&belief.mean + l.column(i));
    }
    for i in 0..n {
        points.push(&belief.mean - l.column(i));
    }
    let w = 1.0 / (2.0 * c);
    let mut mean_weights = vec![w; 2 * n + 1];
    let mut cov_weights = vec![w; 2 * n + 1];
    mean_weights[0] = lambda / c;
    cov_weights[0] = lambda / c + (1.0 - params.alpha * params.alpha + params.beta);
    Ok(SigmaPoints {
        points,
        mean_weights,
        cov_weights,
    })
}

/// Unscented predict through `dynamics`, without a measurement.
pub fn ukf_predict<F>(belief: &GaussianBelief, params: &UkfParams, dynamics: F) -> Result<GaussianBelief>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let sp = sigma_points(belief, params)?;
    let prop: Vec<DVector<f64>> = sp.points.iter().map(&dynamics).collect();
    let mean = sp.mean_of(&prop);
    let mut cov = sp.cross_cov(&prop, &mean, &prop, &mean) + &params.process_noise;
    symmetrize(&mut cov);
    Ok(GaussianBelief { mean, cov })
}

/// Unscented measurement update of a predicted belief.
pub fn ukf_update<H>(
    predicted: &GaussianBelief,
    params: &UkfParams,
    observation: H,
    measurement: &DVector<f64>,
) -> Result<GaussianBelief>
where
    H: Fn(&DVector<f64>) -> DVector<f64>,
{
    let sp = sigma_points(predicted, params)?;
    let obs: Vec<DVector<f64>> = sp.points.iter().map(&observation).collect();
    if obs[0].len() != measurement.len() {
        return Err(Error::Shape {
            op: "ukf_update",
            lhs: vec![obs[0].len()],
            rhs: vec![measurement.len()],
        });
    }
    let y_mean = sp.mean_of(&obs);
    let mut s = sp.cross_cov(&obs, &y_mean, &obs, &y_mean) + &params.observation_noise;
    symmetrize(&mut s);
    let pxy = sp.cross_cov(&sp.points, &predicted.mean, &obs, &y_mean);
    let s_inv = s
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("innovation covariance".into()))?
        .inverse();
    let gain = &pxy * s_inv;
    let mean = &predicted.mean + &gain * (measurement - &y_mean);
    let mut cov = &predicted.cov - &gain * &s * gain.transpose();
    symmetrize(&mut cov);
    Ok(GaussianBelief { mean, cov })
}

/// One predict/update cycle.
pub fn ukf_step<F, H>(
    belief: &GaussianBelief,
    params: &UkfParams,
    dynamics: F,
    observation: H,
    measurement: &DVector<f64>,
) -> Result<GaussianBelief>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
    H: Fn(&DVector<f64>) -> DVector<f64>,
{
    let predicted = ukf_predict(belief, params, dynamics)?;
    ukf_update(&predicted, params, observation, measurement)
}

/// UKF over `(px, py, theta, phi)` for the driving simulator, observing position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DrivingUkf {
    pub rollout: RolloutConfig,
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
    /// Multiplier on the process noise derived from the input noise.
    pub noise_inflation: f64,
    /// Standard deviation of the position measurements fed to the filter.
    pub observation_sigma: f64,
    /// Standard deviation of the (known) initial state.
    pub initial_sigma: f64,
}

impl DrivingUkf {
    pub fn new(rollout: RolloutConfig) -> Self {
        DrivingUkf {
            observation_sigma: rollout.obs_sigma,
            rollout,
            alpha: 0.1,
            beta: 2.0,
            kappa: 0.0,
            noise_inflation: 2.0,
            initial_sigma: 1e-3,
        }
    }

    pub fn params(&self) -> UkfParams {
        let r = &self.rollout;
        let dt = r.dt;
        let pos = (dt * r.sigma_v).powi(2);
        let accel = (dt * r.sigma_phi).powi(2);
        let heading = (dt * r.v_nominal).powi(2) * accel;
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![pos, pos, heading + 1e-12, accel + 1e-12]))
            * self.noise_inflation;
        let obs = self.observation_sigma.max(1e-9).powi(2);
        UkfParams {
            alpha: self.alpha,
            beta: self.beta,
            kappa: self.kappa,
            process_noise: q,
            observation_noise: DMatrix::identity(2, 2) * obs,
        }
    }

    /// Transition from step `k` to `k + 1` with nominal speed and `psi = 1`.
    pub fn transition(&self, k: usize) -> impl Fn(&DVector<f64>) -> DVector<f64> + '_ {
        let r = &self.rollout;
        let t = r.time_of(k);
        move |x: &DVector<f64>| {
            let s = dynamics::step(
                RobotState {
                    px: x[0],
                    py: x[1],
                    theta: x[2],
                    phi: x[3],
                },
                r.v_nominal,
                r.dt,
                1.0,
                r.c1,
                r.c2,
                t,
            );
            DVector::from_vec(vec![s.px, s.py, s.theta, s.phi])
        }
    }

    pub fn observation(x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![x[0], x[1]])
    }

    /// Filters `measurements[k]` (positions at steps `1..=len`) from the origin.
    pub fn filter(&self, measurements: &[[f64; 2]]) -> Result<GaussianBelief> {
        let params = self.params();
        let mut belief = GaussianBelief {
            mean: DVector::zeros(4),
            cov: DMatrix::identity(4, 4) * self.initial_sigma.powi(2),
        };
        for (k, m) in measurements.iter().enumerate() {
            let y = DVector::from_vec(m.to_vec());
            belief = ukf_step(&belief, &params, self.transition(k), DrivingUkf::observation, &y)?;
        }
        Ok(belief)
    }

    /// Belief at `step` after filtering the noise-free nominal positions.
    pub fn nominal_belief(&self, step: usize) -> Result<GaussianBelief> {
        let nominal = dynamics::rollout(&self.rollout.noise_free(), 0)?;
        if step == 0 || step >= nominal.len() {
            return Err(Error::InvalidArgument {
                op: "ukf",
                msg: format!("step {step} outside 1..{}", nominal.len()),
            });
        }
        let obs: Vec<[f64; 2]> = nominal[1..=step].iter().map(|r| [r.px, r.py]).collect();
        self.filter(&obs)
    }

    /// `n` position samples from the belief at `step`.
    pub fn sample_positions<R: Rng + ?Sized>(&self, step: usize, n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        if n == 0 {
            return Err(Error::invalid("ukf sample", "n must be at least 1"));
        }
        self.nominal_belief(step)?.sample_marginal(&[0, 1], n, rng)
    }
}
