//! Mixture density network: a tanh MLP emitting a diagonal Gaussian mixture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::conditioners::{Context, ContextBatch};
use crate::density::{check_batch, ConditionalDensity};
use crate::error::{Error, Result};
use crate::nn::{Mlp, Standardizer};

/// Lower bound on component log-std.
pub const MIN_LOG_STD: f64 = -7.0;

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdnConfig {
    pub dim: usize,
    pub context_features: usize,
    pub components: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl MdnConfig {
    /// Five components behind two hidden layers of eight units.
    pub fn new(dim: usize, context_features: usize, seed: u64) -> Self {
        MdnConfig {
            dim,
            context_features,
            components: 5,
            hidden: vec![8, 8],
            seed,
        }
    }
}

/// Mixture parameters for one context, in data coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureParams {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<Vec<f64>>,
}

impl MixtureParams {
    pub fn log_prob(&self, x: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(w, (m, s))| {
                let ll: f64 = x
                    .iter()
                    .zip(m.iter().zip(s))
                    .map(|(xi, (mi, si))| -0.5 * ((xi - mi) / si).powi(2) - si.ln() - HALF_LOG_2PI)
                    .sum();
                w.ln() + ll
            })
            .collect();
        let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln()
    }

    /// Picks a component by weight, then draws from its diagonal Gaussian.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::invalid("mdn sample", "n must be at least 1"));
        }
        let d = self.means[0].len();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut k = self.weights.len() - 1;
            for (i, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = i;
                    break;
                }
            }
            for j in 0..d {
                let e: f64 = rng.sample(StandardNormal);
                data.push(self.means[k][j] + self.stds[k][j] * e);
            }
        }
        Tensor::new(vec![n, d], data)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MdnModel {
    net: Mlp,
    dim: usize,
    components: usize,
    params: ParamStore,
    data_norm: Option<Standardizer>,
    context_norm: Option<Standardizer>,
}

impl MdnModel {
    pub fn new(cfg: &MdnConfig) -> Result<Self> {
        if cfg.dim == 0 || cfg.context_features == 0 || cfg.components == 0 {
            return Err(Error::InvalidConfig(format!(
                "mdn needs positive dim, context features and components: {cfg:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::new();
        let k = cfg.components;
        let net = Mlp::new(
            &mut params,
            "mdn",
            cfg.context_features,
            &cfg.hidden,
            k + 2 * k * cfg.dim,
            &mut rng,
        );
        Ok(MdnModel {
            net,
            dim: cfg.dim,
            components: k,
            params,
            data_norm: None,
            context_norm: None,
        })
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn context_features(&self) -> usize {
        self.net.inputs()
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn set_data_normalizer(&mut self, norm: Option<Standardizer>) -> Result<()> {
        if norm.as_ref().is_some_and(|n| n.dim() != self.dim) {
            return Err(Error::InvalidConfig("data normalizer dimension mismatch".into()));
        }
        self.data_norm = norm;
        Ok(())
    }

    pub fn set_context_normalizer(&mut self, norm: Option<Standardizer>) -> Result<()> {
        if norm.as_ref().is_some_and(|n| n.dim() != self.context_features()) {
            return Err(Error::InvalidConfig("context normalizer dimension mismatch".into()));
        }
        self.context_norm = norm;
        Ok(())
    }

    fn context_tensor(&self, ctx: &ContextBatch) -> Result<Tensor> {
        let ContextBatch::Vectors(t) = ctx else {
            return Err(Error::Context("mdn expects vector contexts".into()));
        };
        if t.last_dim() != self.context_features() {
            return Err(Error::Context(format!(
                "expected {} context features, got {}",
                self.context_features(),
                t.last_dim()
            )));
        }
        Ok(match &self.context_norm {
            Some(n) => {
                let mut t = t.clone();
                n.apply(t.data_mut());
                t
            }
            None => t.clone(),
        })
    }

    /// `(logits [B, K], means [B, K*d], log_std [B, K*d])` in normalized coordinates.
    fn heads(&self, tape: &mut Tape, p: &Bound, ctx: &ContextBatch) -> Result<(Var, Var, Var)> {
        let c = self.context_tensor(ctx)?;
        let c = tape.constant(c);
        let o = self.net.forward(tape, p, c)?;
        let (k, kd) = (self.components, self.components * self.dim);
        let logits = tape.slice_last(o, 0, k)?;
        let means = tape.slice_last(o, k, k + kd)?;
        let log_std = tape.slice_last(o, k + kd, k + 2 * kd)?;
        let log_std = tape.clamp(log_std, MIN_LOG_STD, f64::INFINITY);
        Ok((logits, means, log_std))
    }

    /// Mixture parameters for one context, mapped back to data coordinates.
    pub fn mdn_forward(&self, ctx: &Context) -> Result<MixtureParams> {
        let batch = ContextBatch::from_contexts(std::slice::from_ref(ctx))?;
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let (logits, means, log_std) = self.heads(&mut tape, &p, &batch)?;
        let w = tape.softmax_last(logits);
        let d = self.dim;
        let (mu, ls) = (tape.value(means).data(), tape.value(log_std).data());
        let mut out = MixtureParams {
            weights: tape.value(w).data().to_vec(),
            means: Vec::with_capacity(self.components),
            stds: Vec::with_capacity(self.components),
        };
        for k in 0..self.components {
            let mut m = mu[k * d..(k + 1) * d].to_vec();
            let mut s: Vec<f64> = ls[k * d..(k + 1) * d].iter().map(|l| l.exp()).collect();
            if let Some(n) = &self.data_norm {
                n.invert(&mut m);
                for (sj, scale) in s.iter_mut().zip(&n.scale) {
                    *sj *= scale;
                }
            }
            out.means.push(m);
            out.stds.push(s);
        }
        Ok(out)
    }
}

impl ConditionalDensity for MdnModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn log_prob_tape(&self, tape: &mut Tape, p: &Bound, x: &Tensor, ctx: &ContextBatch) -> Result<Var> {
        check_batch(self.dim, x, ctx)?;
        let (b, k, d) = (x.shape()[0], self.components, self.dim);
        let mut xn = x.clone();
        let mut correction = 0.0;
        if let Some(n) = &self.data_norm {
            n.apply(xn.data_mut());
            correction = -n.log_scale_sum();
        }
        let (logits, means, log_std) = self.heads(tape, p, ctx)?;
        let tiled: Vec<usize> = (0..k).flat_map(|_| 0..d).collect();
        let xv = tape.constant(xn);
        let xt = tape.gather_last(xv, &tiled)?;
        let diff = tape.sub(xt, means)?;
        let neg = tape.neg(log_std);
        let inv = tape.exp(neg);
        let u = tape.mul(diff, inv)?;
        let sq = tape.square(u);
        let half = tape.scale(sq, -0.5);
        let terms = tape.sub(half, log_std)?;
        let terms = tape.reshape(terms, &[b, k, d])?;
        let comp = tape.sum_last(terms);
        let comp = tape.add_scalar(comp, -HALF_LOG_2PI * d as f64);
        let joint = tape.add(comp, logits)?;
        let num = tape.logsumexp_last(joint);
        let den = tape.logsumexp_last(logits);
        let lp = tape.sub(num, den)?;
        Ok(tape.add_scalar(lp, correction))
    }

    fn sample<R: Rng + ?Sized>(&self, n: usize, ctx: &Context, rng: &mut R) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::invalid("mdn sample", "n must be at least 1"));
        }
        self.mdn_forward(ctx)?.sample(n, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeroed(k: usize) -> MdnModel {
        let mut m = MdnModel::new(&MdnConfig {
            components: k,
            ..MdnConfig::new(2, 1, 0)
        })
        .unwrap();
        for layer in &m.net.layers.clone() {
            layer.zero(&mut m.params);
        }
        m
    }

    #[test]
    fn zero_weights_uniform_mixture() {
        let m = zeroed(5);
        let mp = m.mdn_forward(&Context::time(3.0)).unwrap();
        for w in &mp.weights {
            assert!((w - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn weights_sum_to_one() {
        let m = MdnModel::new(&MdnConfig::new(2, 1, 4)).unwrap();
        for t in [-5.0, 0.0, 13.0, 100.0] {
            let mp = m.mdn_forward(&Context::time(t)).unwrap();
            assert!((mp.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(mp.weights.iter().all(|&w| w > 0.0));
            assert!(mp.stds.iter().flatten().all(|&s| s > 0.0));
        }
    }

    #[test]
    fn single_component_matches_gaussian() {
        let mut m = zeroed(1);
        // output layout: [logit, mu_x, mu_y, log_std_x, log_std_y]
        let bias = m.net.output_layer().bias;
        m.params.get_mut(bias).data_mut().copy_from_slice(&[0.7, 1.0, -1.0, 0.5f64.ln(), 2f64.ln()]);
        let x = [1.3, 0.4];
        let lp = m.log_prob(&x, &Context::time(1.0)).unwrap();
        let hand = -0.5 * ((0.3f64 / 0.5).powi(2) + (1.4f64 / 2.0).powi(2))
            - 0.5f64.ln()
            - 2f64.ln()
            - (2.0 * std::f64::consts::PI).ln();
        assert!((lp - hand).abs() < 1e-13, "{lp} vs {hand}");
    }

    #[test]
    fn dominant_component_at_mean() {
        let mut m = zeroed(2);
        let bias = m.net.output_layer().bias;
        // logits (60, 0): the first component carries all the weight
        m.params
            .get_mut(bias)
            .data_mut()
            .copy_from_slice(&[60.0, 0.0, 2.0, 3.0, -5.0, -5.0, 0.0, 0.0, 0.0, 0.0]);
        let lp = m.log_prob(&[2.0, 3.0], &Context::time(0.0)).unwrap();
        assert!((lp + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn far_components_stay_finite() {
        let mp = MixtureParams {
            weights: vec![0.5, 0.5],
            means: vec![vec![100.0, 0.0], vec![-100.0, 0.0]],
            stds: vec![vec![1.0, 1.0], vec![1.0, 1.0]],
        };
        assert!(mp.log_prob(&[0.0, 0.0]).is_finite());

        let mut m = zeroed(2);
        let bias = m.net.output_layer().bias;
        m.params
            .get_mut(bias)
            .data_mut()
            .copy_from_slice(&[0.0, 0.0, 100.0, 0.0, -100.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let lp = m.log_prob(&[0.0, 0.0], &Context::time(0.0)).unwrap();
        assert!(lp.is_finite());
        assert!((lp - mp.log_prob(&[0.0, 0.0])).abs() < 1e-9);
    }

    #[test]
    fn separated_components_split_evenly() {
        let mp = MixtureParams {
            weights: vec![0.5, 0.5],
            means: vec![vec![-10.0, 0.0], vec![10.0, 0.0]],
            stds: vec![vec![1.0, 1.0], vec![1.0, 1.0]],
        };
        let s = mp.sample(100_000, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let left = s.rows().filter(|r| r[0] < 0.0).count() as f64 / 100_000.0;
        assert!((left - 0.5).abs() <= 0.01, "{left}");
    }

    #[test]
    fn sampling_is_seeded() {
        let m = MdnModel::new(&MdnConfig::new(2, 1, 4)).unwrap();
        let a = m.sample(50, &Context::time(2.0), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = m.sample(50, &Context::time(2.0), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
        assert!(m.sample(0, &Context::time(2.0), &mut ChaCha8Rng::seed_from_u64(8)).is_err());
    }

    #[test]
    fn normalized_density_matches_mixture_params() {
        let mut m = MdnModel::new(&MdnConfig::new(2, 1, 9)).unwrap();
        m.set_data_normalizer(Some(Standardizer {
            mean: vec![3.0, -1.0],
            scale: vec![2.0, 0.25],
        }))
        .unwrap();
        m.set_context_normalizer(Some(Standardizer {
            mean: vec![10.0],
            scale: vec![5.0],
        }))
        .unwrap();
        let ctx = Context::time(13.0);
        let mp = m.mdn_forward(&ctx).unwrap();
        let x = [2.5, -0.8];
        assert!((m.log_prob(&x, &ctx).unwrap() - mp.log_prob(&x)).abs() < 1e-12);
    }

    #[test]
    fn sequence_context_rejected() {
        let m = MdnModel::new(&MdnConfig::new(2, 3, 1)).unwrap();
        let seq = crate::conditioners::ObservationSequence::new(vec![[0.0, 0.0, 0.0]]).unwrap();
        assert!(m.log_prob(&[0.0, 0.0], &Context::Sequence(seq)).is_err());
    }
}
