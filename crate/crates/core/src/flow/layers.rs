use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;

/// Bound on the affine log-scale before exponentiation.
pub const LOG_SCALE_CLAMP: f64 = 7.0;

/// Output of one layer: transformed batch plus per-row log|det J| (`None` = 0).
pub struct LayerOutput {
    pub value: Var,
    pub logdet: Option<Var>,
}

/// Fixed reordering of the dimensions: `x[i] = z[perm[i]]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationLayer {
    perm: Vec<usize>,
    inverse: Vec<usize>,
}

impl PermutationLayer {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let d = perm.len();
        let mut inverse = vec![usize::MAX; d];
        for (i, &p) in perm.iter().enumerate() {
            if p >= d || inverse[p] != usize::MAX {
                return Err(Error::invalid("permutation", format!("{perm:?} is not a bijection")));
            }
            inverse[p] = i;
        }
        Ok(PermutationLayer { perm, inverse })
    }

    pub fn reversal(dim: usize) -> Self {
        PermutationLayer::new((0..dim).rev().collect()).expect("reversal is a bijection")
    }

    pub fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let mut perm: Vec<usize> = (0..dim).collect();
        perm.shuffle(rng);
        PermutationLayer::new(perm).expect("shuffle is a bijection")
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn forward(&self, tape: &mut Tape, z: Var) -> Result<LayerOutput> {
        Ok(LayerOutput {
            value: tape.gather_last(z, &self.perm)?,
            logdet: None,
        })
    }

    pub fn inverse(&self, tape: &mut Tape, x: Var) -> Result<LayerOutput> {
        Ok(LayerOutput {
            value: tape.gather_last(x, &self.inverse)?,
            logdet: None,
        })
    }
}

/// `x = W z` with `W = L U`: `L` unit lower-triangular, `U` upper-triangular
/// with diagonal `sign * exp(log_diag)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LuLinearLayer {
    pub lower: ParamId,
    pub upper: ParamId,
    pub log_diag: ParamId,
    sign: Vec<f64>,
    dim: usize,
}

fn strict_mask(d: usize, lower: bool) -> Vec<f64> {
    (0..d * d)
        .map(|k| {
            let (i, j) = (k / d, k % d);
            let keep = if lower { j < i } else { j > i };
            if keep {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

fn eye(d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[d, d]);
    for i in 0..d {
        t.data_mut()[i * d + i] = 1.0;
    }
    t
}

impl LuLinearLayer {
    /// Random triangular factors.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        let mut lower = store.add_uniform(format!("{name}.lower"), &[dim, dim], dim, rng);
        let mut upper = store.add_uniform(format!("{name}.upper"), &[dim, dim], dim, rng);
        let log_diag = store.add_uniform(format!("{name}.log_diag"), &[dim], dim, rng);
        // entries outside the strict triangles never reach W; keep them at zero
        for (id, lo) in [(&mut lower, true), (&mut upper, false)] {
            let mask = strict_mask(dim, lo);
            for (v, m) in store.get_mut(*id).data_mut().iter_mut().zip(mask) {
                *v *= m;
            }
        }
        LuLinearLayer {
            lower,
            upper,
            log_diag,
            sign: vec![1.0; dim],
            dim,
        }
    }

    /// `W = I`.
    pub fn identity(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LuLinearLayer {
            lower: store.add(format!("{name}.lower"), Tensor::zeros(&[dim, dim])),
            upper: store.add(format!("{name}.upper"), Tensor::zeros(&[dim, dim])),
            log_diag: store.add(format!("{name}.log_diag"), Tensor::zeros(&[dim])),
            sign: vec![1.0; dim],
            dim,
        }
    }

    pub fn set_sign(&mut self, sign: Vec<f64>) -> Result<()> {
        if sign.len() != self.dim || sign.iter().any(|s| s.abs() != 1.0) {
            return Err(Error::invalid("lu_linear", "sign entries must be +1 or -1"));
        }
        self.sign = sign;
        Ok(())
    }

    /// Dense `W` from the current parameter values.
    pub fn matrix(&self, store: &ParamStore) -> Vec<f64> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let (l, u) = self.factors(&mut tape, &p).expect("shapes fixed at construction");
        let w = tape.matmul(l, u).expect("square factors");
        tape.value(w).data().to_vec()
    }

    fn factors(&self, tape: &mut Tape, p: &Bound) -> Result<(Var, Var)> {
        let d = self.dim;
        let lo = tape.mask(p.get(self.lower), &strict_mask(d, true))?;
        let id = tape.constant(eye(d));
        let l = tape.add(lo, id)?;
        let up = tape.mask(p.get(self.upper), &strict_mask(d, false))?;
        let scale = tape.exp(p.get(self.log_diag));
        let diag = tape.mask(scale, &self.sign)?;
        let diag = tape.diag_embed(diag)?;
        let u = tape.add(up, diag)?;
        Ok((l, u))
    }

    fn logdet(&self, tape: &mut Tape, p: &Bound, rows: usize, negate: bool) -> Result<Var> {
        let s = tape.sum(p.get(self.log_diag));
        let s = if negate { tape.neg(s) } else { s };
        let s = tape.reshape(s, &[1])?;
        let b = tape.broadcast_rows(s, rows)?;
        tape.reshape(b, &[rows])
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<LayerOutput> {
        let rows = tape.shape(z)[0];
        let (l, u) = self.factors(tape, p)?;
        let ut = tape.transpose(u)?;
        let lt = tape.transpose(l)?;
        let y = tape.matmul(z, ut)?;
        let x = tape.matmul(y, lt)?;
        Ok(LayerOutput {
            value: x,
            logdet: Some(self.logdet(tape, p, rows, false)?),
        })
    }

    pub fn inverse(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<LayerOutput> {
        let rows = tape.shape(x)[0];
        let (l, u) = self.factors(tape, p)?;
        let y = tape.solve_triangular(l, x, true, true)?;
        let z = tape.solve_triangular(u, y, false, false)?;
        Ok(LayerOutput {
            value: z,
            logdet: Some(self.logdet(tape, p, rows, true)?),
        })
    }
}

/// Affine autoregressive layer: `x_i = z_i * exp(alpha_i) + mu_i`, where
/// `(mu_i, alpha_i)` come from a degree-masked network that sees only
/// `z_{<i}` and the context embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedAffineLayer {
    hidden: Linear,
    output: Linear,
    hidden_mask: Vec<f64>,
    output_mask: Vec<f64>,
    dim: usize,
    context: usize,
}

impl MaskedAffineLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        context: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let inputs = dim + context;
        let hidden_layer = Linear::new(store, &format!("{name}.hidden"), inputs, hidden, rng);
        let output = Linear::new(store, &format!("{name}.output"), hidden, 2 * dim, rng);
        // hidden unit k has degree k mod dim; input z_j has degree j + 1,
        // context inputs degree 0; output column for dimension i has degree i + 1
        let degree = |k: usize| k % dim;
        let mut hidden_mask = vec![0.0; inputs * hidden];
        for j in 0..inputs {
            for k in 0..hidden {
                let allowed = j >= dim || j < degree(k);
                hidden_mask[j * hidden + k] = if allowed { 1.0 } else { 0.0 };
            }
        }
        let mut output_mask = vec![0.0; hidden * 2 * dim];
        for k in 0..hidden {
            for c in 0..2 * dim {
                let i = c % dim;
                output_mask[k * 2 * dim + c] = if degree(k) <= i { 1.0 } else { 0.0 };
            }
        }
        MaskedAffineLayer {
            hidden: hidden_layer,
            output,
            hidden_mask,
            output_mask,
            dim,
            context,
        }
    }

    /// Zeroes the output head so that `mu = alpha = 0` (identity map).
    pub fn zero_output(&self, store: &mut ParamStore) {
        self.output.zero(store);
    }

    /// Shift and clamped log-scale, each `[B, dim]`.
    pub fn conditioner(&self, tape: &mut Tape, p: &Bound, z: Var, emb: Var) -> Result<(Var, Var)> {
        let input = tape.concat_last(&[z, emb])?;
        let w1 = tape.mask(p.get(self.hidden.weight), &self.hidden_mask)?;
        let h = tape.matmul(input, w1)?;
        let h = tape.add_row(h, p.get(self.hidden.bias))?;
        let h = tape.tanh(h);
        let w2 = tape.mask(p.get(self.output.weight), &self.output_mask)?;
        let o = tape.matmul(h, w2)?;
        let o = tape.add_row(o, p.get(self.output.bias))?;
        let mu = tape.slice_last(o, 0, self.dim)?;
        let alpha = tape.slice_last(o, self.dim, 2 * self.dim)?;
        let alpha = tape.clamp(alpha, -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP);
        Ok((mu, alpha))
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: Var, emb: Var) -> Result<LayerOutput> {
        let (mu, alpha) = self.conditioner(tape, p, z, emb)?;
        let scale = tape.exp(alpha);
        let zs = tape.mul(z, scale)?;
        let x = tape.add(zs, mu)?;
        Ok(LayerOutput {
            value: x,
            logdet: Some(tape.sum_last(alpha)),
        })
    }

    /// Dimension-by-dimension inversion; pass `i` recovers `z_i` from `z_{<i}`.
    pub fn inverse(&self, tape: &mut Tape, p: &Bound, x: Var, emb: Var) -> Result<LayerOutput> {
        let rows = tape.shape(x)[0];
        let d = self.dim;
        let zero_col = tape.constant(Tensor::zeros(&[rows, 1]));
        let mut cols: Vec<Var> = Vec::with_capacity(d);
        let mut alphas: Vec<Var> = Vec::with_capacity(d);
        for i in 0..d {
            let mut parts = cols.clone();
            parts.extend(std::iter::repeat_n(zero_col, d - i));
            let z_partial = tape.concat_last(&parts)?;
            let (mu, alpha) = self.conditioner(tape, p, z_partial, emb)?;
            let mu_i = tape.slice_last(mu, i, i + 1)?;
            let alpha_i = tape.slice_last(alpha, i, i + 1)?;
            let x_i = tape.slice_last(x, i, i + 1)?;
            let centered = tape.sub(x_i, mu_i)?;
            let neg = tape.neg(alpha_i);
            let inv_scale = tape.exp(neg);
            cols.push(tape.mul(centered, inv_scale)?);
            alphas.push(alpha_i);
        }
        let z = if d == 1 { cols[0] } else { tape.concat_last(&cols)? };
        let a = if d == 1 { alphas[0] } else { tape.concat_last(&alphas)? };
        let ld = tape.sum_last(a);
        Ok(LayerOutput {
            value: z,
            logdet: Some(tape.neg(ld)),
        })
    }

    pub fn context_features(&self) -> usize {
        self.context
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FlowLayer {
    Permutation(PermutationLayer),
    Linear(LuLinearLayer),
    Affine(MaskedAffineLayer),
}

impl FlowLayer {
    pub fn forward(&self, tape: &mut Tape, p: &Bound, z: Var, emb: Var) -> Result<LayerOutput> {
        match self {
            FlowLayer::Permutation(l) => l.forward(tape, z),
            FlowLayer::Linear(l) => l.forward(tape, p, z),
            FlowLayer::Affine(l) => l.forward(tape, p, z, emb),
        }
    }

    pub fn inverse(&self, tape: &mut Tape, p: &Bound, x: Var, emb: Var) -> Result<LayerOutput> {
        match self {
            FlowLayer::Permutation(l) => l.inverse(tape, x),
            FlowLayer::Linear(l) => l.inverse(tape, p, x),
            FlowLayer::Affine(l) => l.inverse(tape, p, x, emb),
        }
    }
}
