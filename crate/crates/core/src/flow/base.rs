use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamStore, Tape, Var};
use crate::error::Result;
use crate::nn::Mlp;

use super::layers::LOG_SCALE_CLAMP;

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

/// Diagonal Gaussian whose mean and log-std are an MLP of the context embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalGaussianBase {
    net: Mlp,
    dim: usize,
}

impl ConditionalGaussianBase {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, context: usize, hidden: &[usize], rng: &mut R) -> Self {
        ConditionalGaussianBase {
            net: Mlp::new(store, "base", context, hidden, 2 * dim, rng),
            dim,
        }
    }

    /// Zero output weights and bias: `N(0, I)` for every context.
    pub fn zero_output(&self, store: &mut ParamStore) {
        self.net.output_layer().zero(store);
    }

    /// `(mu, log_std)`, each `[B, dim]`.
    pub fn params_tape(&self, tape: &mut Tape, p: &Bound, emb: Var) -> Result<(Var, Var)> {
        let o = self.net.forward(tape, p, emb)?;
        let mu = tape.slice_last(o, 0, self.dim)?;
        let log_std = tape.slice_last(o, self.dim, 2 * self.dim)?;
        Ok((mu, tape.clamp(log_std, -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)))
    }

    /// Per-row `log N(z; mu, diag(sigma^2))`: `[B]`.
    pub fn log_prob_tape(&self, tape: &mut Tape, p: &Bound, z: Var, emb: Var) -> Result<Var> {
        let (mu, log_std) = self.params_tape(tape, p, emb)?;
        let diff = tape.sub(z, mu)?;
        let neg = tape.neg(log_std);
        let inv_std = tape.exp(neg);
        let u = tape.mul(diff, inv_std)?;
        let sq = tape.square(u);
        let half = tape.scale(sq, -0.5);
        let terms = tape.sub(half, log_std)?;
        let s = tape.sum_last(terms);
        Ok(tape.add_scalar(s, -HALF_LOG_2PI * self.dim as f64))
    }
}
