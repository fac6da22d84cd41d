//! Conditional normalizing flow.
//!
//! A [`FlowModel`] maps base samples `z ~ N(mu(c), diag(sigma(c)^2))` to data
//! `x = f(z)` through an ordered stack of permutation, LU-linear and masked
//! affine autoregressive layers. Densities follow the change of variables
//!
//! ```text
//! log p(x | c) = log p_base(z | c) - log|det J_f(z)|,   z = f^{-1}(x)
//! ```
//!
//! The context `c` is embedded once per point by the conditioner; the same
//! embedding feeds every affine layer and the base encoder.

mod base;
mod layers;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::conditioners::{Conditioner, ConditionerSpec, Context, ContextBatch};
use crate::density::{check_batch, ConditionalDensity};
use crate::error::{Error, Result};
use crate::nn::Standardizer;

pub use base::ConditionalGaussianBase;
pub use layers::{
    FlowLayer, LayerOutput, LuLinearLayer, MaskedAffineLayer, PermutationLayer, LOG_SCALE_CLAMP,
};

/// Layer kinds accepted by [`FlowModel::with_layout`].
#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    /// Reversal for `d = 2`, seeded random permutation otherwise.
    Permutation,
    FixedPermutation(Vec<usize>),
    Linear,
    Affine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub dim: usize,
    /// Number of `[permutation, linear, affine]` blocks.
    pub blocks: usize,
    pub affine_hidden: usize,
    pub base_hidden: Vec<usize>,
    pub conditioner: ConditionerSpec,
    pub seed: u64,
}

impl FlowConfig {
    pub fn new(dim: usize, conditioner: ConditionerSpec, seed: u64) -> Self {
        FlowConfig {
            dim,
            blocks: 5,
            affine_hidden: 32,
            base_hidden: vec![32, 32],
            conditioner,
            seed,
        }
    }

    pub fn layout(&self) -> Vec<LayerKind> {
        (0..self.blocks)
            .flat_map(|_| [LayerKind::Permutation, LayerKind::Linear, LayerKind::Affine])
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlowModel {
    dim: usize,
    layers: Vec<FlowLayer>,
    base: ConditionalGaussianBase,
    conditioner: Conditioner,
    spec: ConditionerSpec,
    params: ParamStore,
    data_norm: Option<Standardizer>,
    context_norm: Option<Standardizer>,
}

impl FlowModel {
    pub fn new(cfg: &FlowConfig) -> Result<Self> {
        FlowModel::with_layout(
            cfg.dim,
            cfg.conditioner,
            &cfg.layout(),
            cfg.affine_hidden,
            &cfg.base_hidden,
            cfg.seed,
        )
    }

    pub fn with_layout(
        dim: usize,
        spec: ConditionerSpec,
        layout: &[LayerKind],
        affine_hidden: usize,
        base_hidden: &[usize],
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("flow dimension must be positive".into()));
        }
        if affine_hidden == 0 && layout.contains(&LayerKind::Affine) {
            return Err(Error::InvalidConfig("affine hidden width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let conditioner = Conditioner::build(&spec, &mut params, &mut rng)?;
        let emb = conditioner.output_features();
        let mut layers = Vec::with_capacity(layout.len());
        for (i, kind) in layout.iter().enumerate() {
            let name = format!("layer{i}");
            layers.push(match kind {
                LayerKind::Permutation if dim == 2 => FlowLayer::Permutation(PermutationLayer::reversal(2)),
                LayerKind::Permutation => FlowLayer::Permutation(PermutationLayer::random(dim, &mut rng)),
                LayerKind::FixedPermutation(p) => {
                    if p.len() != dim {
                        return Err(Error::InvalidConfig(format!("permutation {p:?} for dimension {dim}")));
                    }
                    FlowLayer::Permutation(PermutationLayer::new(p.clone())?)
                }
                LayerKind::Linear => FlowLayer::Linear(LuLinearLayer::new(&mut params, &name, dim, &mut rng)),
                LayerKind::Affine => FlowLayer::Affine(MaskedAffineLayer::new(
                    &mut params,
                    &name,
                    dim,
                    emb,
                    affine_hidden,
                    &mut rng,
                )),
            });
        }
        let base = ConditionalGaussianBase::new(&mut params, dim, emb, base_hidden, &mut rng);
        Ok(FlowModel {
            dim,
            layers,
            base,
            conditioner,
            spec,
            params,
            data_norm: None,
            context_norm: None,
        })
    }

    pub fn layers(&self) -> &[FlowLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [FlowLayer] {
        &mut self.layers
    }

    pub fn base(&self) -> &ConditionalGaussianBase {
        &self.base
    }

    pub fn conditioner(&self) -> &Conditioner {
        &self.conditioner
    }

    pub fn conditioner_spec(&self) -> &ConditionerSpec {
        &self.spec
    }

    pub fn embedding_dim(&self) -> usize {
        self.conditioner.output_features()
    }

    /// Fixed affine map applied after the last layer: `x = mean + scale * f(z)`.
    pub fn set_data_normalizer(&mut self, norm: Option<Standardizer>) -> Result<()> {
        if let Some(n) = &norm {
            if n.dim() != self.dim {
                return Err(Error::InvalidConfig(format!(
                    "data normalizer has {} dims, flow has {}",
                    n.dim(),
                    self.dim
                )));
            }
        }
        self.data_norm = norm;
        Ok(())
    }

    /// Per-feature normalization applied to raw contexts before embedding.
    pub fn set_context_normalizer(&mut self, norm: Option<Standardizer>) -> Result<()> {
        if let Some(n) = &norm {
            if n.dim() != self.conditioner.input_features() {
                return Err(Error::InvalidConfig(format!(
                    "context normalizer has {} features, conditioner expects {}",
                    n.dim(),
                    self.conditioner.input_features()
                )));
            }
        }
        self.context_norm = norm;
        Ok(())
    }

    /// Makes every affine layer the identity and the base a standard normal.
    pub fn zero_affine_and_base(&mut self) {
        for layer in &self.layers {
            if let FlowLayer::Affine(a) = layer {
                a.zero_output(&mut self.params);
            }
        }
        self.base.zero_output(&mut self.params);
    }

    fn normalized_context(&self, ctx: &ContextBatch) -> ContextBatch {
        match &self.context_norm {
            Some(n) => ctx.map_features(|j, v| (v - n.mean[j]) / n.scale[j]),
            None => ctx.clone(),
        }
    }

    /// Context embedding on `tape`: `[B, embedding_dim]`.
    pub fn embed(&self, tape: &mut Tape, p: &Bound, ctx: &ContextBatch) -> Result<Var> {
        let ctx = self.normalized_context(ctx);
        self.conditioner.encode_batch(tape, p, &ctx)
    }

    fn check_embedding(&self, tape: &Tape, z: Var, emb: Var) -> Result<()> {
        let (sz, se) = (tape.shape(z), tape.shape(emb));
        if sz.len() != 2 || sz[1] != self.dim || se.len() != 2 || se[1] != self.embedding_dim() || se[0] != sz[0] {
            return Err(Error::Shape {
                op: "flow",
                lhs: sz.to_vec(),
                rhs: se.to_vec(),
            });
        }
        Ok(())
    }

    /// `x = f(z)` and `log|det J_f(z)|` per row.
    pub fn forward_tape(&self, tape: &mut Tape, p: &Bound, z: Var, emb: Var) -> Result<(Var, Var)> {
        self.check_embedding(tape, z, emb)?;
        let rows = tape.shape(z)[0];
        let mut h = z;
        let mut logdet = tape.constant(Tensor::zeros(&[rows]));
        for layer in &self.layers {
            let out = layer.forward(tape, p, h, emb)?;
            h = out.value;
            if let Some(ld) = out.logdet {
                logdet = tape.add(logdet, ld)?;
            }
        }
        if let Some(n) = &self.data_norm {
            let scale = tape.constant(Tensor::vector(n.scale.clone()));
            let mean = tape.constant(Tensor::vector(n.mean.clone()));
            let s = tape.mul_row(h, scale)?;
            h = tape.add_row(s, mean)?;
            logdet = tape.add_scalar(logdet, n.log_scale_sum());
        }
        Ok((h, logdet))
    }

    /// `z = f^{-1}(x)` and `log|det J_{f^{-1}}(x)|` per row.
    pub fn inverse_tape(&self, tape: &mut Tape, p: &Bound, x: Var, emb: Var) -> Result<(Var, Var)> {
        self.check_embedding(tape, x, emb)?;
        let rows = tape.shape(x)[0];
        let mut h = x;
        let mut logdet = tape.constant(Tensor::zeros(&[rows]));
        if let Some(n) = &self.data_norm {
            let neg_mean = tape.constant(Tensor::vector(n.mean.iter().map(|m| -m).collect()));
            let inv_scale = tape.constant(Tensor::vector(n.scale.iter().map(|s| 1.0 / s).collect()));
            let c = tape.add_row(h, neg_mean)?;
            h = tape.mul_row(c, inv_scale)?;
            logdet = tape.add_scalar(logdet, -n.log_scale_sum());
        }
        for layer in self.layers.iter().rev() {
            let out = layer.inverse(tape, p, h, emb)?;
            h = out.value;
            if let Some(ld) = out.logdet {
                logdet = tape.add(logdet, ld)?;
            }
        }
        Ok((h, logdet))
    }

    /// Embedding of one raw context (frozen weights).
    pub fn embed_context(&self, ctx: &Context) -> Result<Vec<f64>> {
        let batch = ContextBatch::from_contexts(std::slice::from_ref(ctx))?;
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let e = self.embed(&mut tape, &p, &batch)?;
        Ok(tape.value(e).data().to_vec())
    }

    fn transform_one(&self, v: &[f64], embedding: &[f64], inverse: bool) -> Result<(Vec<f64>, f64)> {
        if v.len() != self.dim {
            return Err(Error::Shape {
                op: "transform",
                lhs: vec![v.len()],
                rhs: vec![self.dim],
            });
        }
        let (x, ld) = self.transform_batch(
            &Tensor::new(vec![1, self.dim], v.to_vec())?,
            &Tensor::new(vec![1, embedding.len()], embedding.to_vec())?,
            inverse,
        )?;
        Ok((x.into_data(), ld[0]))
    }

    /// Batched transform of `[B, d]` rows given `[B, e]` embeddings.
    pub fn transform_batch(&self, v: &Tensor, embedding: &Tensor, inverse: bool) -> Result<(Tensor, Vec<f64>)> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let vv = tape.constant(v.clone());
        let e = tape.constant(embedding.clone());
        let (out, ld) = if inverse {
            self.inverse_tape(&mut tape, &p, vv, e)?
        } else {
            self.forward_tape(&mut tape, &p, vv, e)?
        };
        Ok((tape.value(out).clone(), tape.value(ld).data().to_vec()))
    }

    pub fn forward_transform(&self, z: &[f64], embedding: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.transform_one(z, embedding, false)
    }

    pub fn inverse_transform(&self, x: &[f64], embedding: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.transform_one(x, embedding, true)
    }

    /// Draws `n` points for one embedding, `[n, d]`.
    pub fn sample_embedding<R: Rng + ?Sized>(&self, n: usize, embedding: &[f64], rng: &mut R) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::invalid("sample", "n must be at least 1"));
        }
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let e1 = tape.constant(Tensor::new(vec![embedding.len()], embedding.to_vec())?);
        let emb = tape.broadcast_rows(e1, n)?;
        let (mu, log_std) = self.base.params_tape(&mut tape, &p, emb)?;
        let eps: Vec<f64> = (0..n * self.dim).map(|_| rng.sample(StandardNormal)).collect();
        let eps = tape.constant(Tensor::new(vec![n, self.dim], eps)?);
        let std = tape.exp(log_std);
        let scaled = tape.mul(eps, std)?;
        let z = tape.add(mu, scaled)?;
        let (x, _) = self.forward_tape(&mut tape, &p, z, emb)?;
        Ok(tape.value(x).clone())
    }
}

impl ConditionalDensity for FlowModel {
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
        let emb = self.embed(tape, p, ctx)?;
        let xv = tape.constant(x.clone());
        let (z, logdet) = self.inverse_tape(tape, p, xv, emb)?;
        let base = self.base.log_prob_tape(tape, p, z, emb)?;
        tape.add(base, logdet)
    }

    fn sample<R: Rng + ?Sized>(&self, n: usize, ctx: &Context, rng: &mut R) -> Result<Tensor> {
        let e = self.embed_context(ctx)?;
        self.sample_embedding(n, &e, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_model(dim: usize) -> FlowModel {
        let mut store_layout = vec![LayerKind::Linear, LayerKind::Affine];
        store_layout.insert(0, LayerKind::FixedPermutation((0..dim).collect()));
        let mut m = FlowModel::with_layout(dim, ConditionerSpec::identity(1), &store_layout, 8, &[8], 0).unwrap();
        m.zero_affine_and_base();
        // make the linear layer exactly the identity
        for layer in &m.layers {
            if let FlowLayer::Linear(l) = layer {
                for id in [l.lower, l.upper, l.log_diag] {
                    m.params.get_mut(id).data_mut().fill(0.0);
                }
            }
        }
        m
    }

    #[test]
    fn identity_composition() {
        let m = identity_model(2);
        let (x, ld) = m.forward_transform(&[0.3, -1.2], &[5.0]).unwrap();
        assert_eq!(x, vec![0.3, -1.2]);
        assert_eq!(ld, 0.0);
        let (z, ld) = m.inverse_transform(&[0.3, -1.2], &[5.0]).unwrap();
        assert_eq!(z, vec![0.3, -1.2]);
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn standard_normal_at_origin() {
        let m = identity_model(2);
        let lp = m.log_prob(&[0.0, 0.0], &Context::time(3.0)).unwrap();
        assert!((lp + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
        let x = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let c = ContextBatch::from_contexts(&[Context::time(3.0)]).unwrap();
        assert!((m.nll_loss(&x, &c).unwrap() - (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn reversal_permutation() {
        let m = FlowModel::with_layout(
            2,
            ConditionerSpec::identity(1),
            &[LayerKind::Permutation],
            8,
            &[8],
            1,
        )
        .unwrap();
        let (x, ld) = m.forward_transform(&[1.5, -2.5], &[0.0]).unwrap();
        assert_eq!(x, vec![-2.5, 1.5]);
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn diagonal_linear_layer() {
        let mut m = FlowModel::with_layout(2, ConditionerSpec::identity(1), &[LayerKind::Linear], 8, &[8], 1).unwrap();
        let FlowLayer::Linear(l) = m.layers[0].clone() else {
            unreachable!()
        };
        m.params.get_mut(l.lower).data_mut().fill(0.0);
        m.params.get_mut(l.upper).data_mut().fill(0.0);
        m.params.get_mut(l.log_diag).data_mut().copy_from_slice(&[2f64.ln(), 3f64.ln()]);
        // brute-force 2x2 determinant of W
        let w = l.matrix(&m.params);
        let det = w[0] * w[3] - w[1] * w[2];
        let (_, ld) = m.forward_transform(&[0.1, 0.2], &[0.0]).unwrap();
        assert!((ld - 6f64.ln()).abs() < 1e-14);
        assert!((ld - det.abs().ln()).abs() < 1e-14);
        let (z, ild) = m.inverse_transform(&[2.0, 3.0], &[0.0]).unwrap();
        assert!((z[0] - 1.0).abs() < 1e-15 && (z[1] - 1.0).abs() < 1e-15);
        assert!((ild + 6f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn sample_rejects_zero_and_is_seeded() {
        let m = FlowModel::new(&FlowConfig::new(2, ConditionerSpec::identity(1), 3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(m.sample(0, &Context::time(1.0), &mut rng).is_err());
        let a = m.sample(16, &Context::time(1.0), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = m.sample(16, &Context::time(1.0), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[16, 2]);
    }

    #[test]
    fn context_mismatch_rejected() {
        let m = FlowModel::new(&FlowConfig::new(2, ConditionerSpec::identity(1), 3)).unwrap();
        assert!(m.embed_context(&Context::Vector(vec![1.0, 2.0])).is_err());
        assert!(m.log_prob(&[0.0, 0.0, 0.0], &Context::time(1.0)).is_err());
    }

    #[test]
    fn data_normalizer_shifts_density() {
        let mut m = identity_model(2);
        m.set_data_normalizer(Some(Standardizer {
            mean: vec![1.0, -1.0],
            scale: vec![2.0, 0.5],
        }))
        .unwrap();
        let lp = m.log_prob(&[1.0, -1.0], &Context::time(0.0)).unwrap();
        assert!((lp - (-(2.0 * std::f64::consts::PI).ln() - 1f64.ln())).abs() < 1e-14);
        let (x, ld) = m.forward_transform(&[1.0, 1.0], &[0.0]).unwrap();
        assert_eq!(x, vec![3.0, -0.5]);
        assert!(ld.abs() < 1e-15);
    }
}
