//! Context encoders mapping a time stamp or an observation history to a
//! fixed-size embedding shared by every flow layer and the base density.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Identity,
    Mlp,
    Rnn,
    Gru,
    Lstm,
    Transformer,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Identity,
        Variant::Mlp,
        Variant::Rnn,
        Variant::Gru,
        Variant::Lstm,
        Variant::Transformer,
    ];

    /// Whether the variant consumes an [`ObservationSequence`].
    pub fn is_sequential(self) -> bool {
        matches!(
            self,
            Variant::Rnn | Variant::Gru | Variant::Lstm | Variant::Transformer
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Identity => "identity",
            Variant::Mlp => "mlp",
            Variant::Rnn => "rnn",
            Variant::Gru => "gru",
            Variant::Lstm => "lstm",
            Variant::Transformer => "transformer",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown conditioner `{s}`")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerDims {
    pub model_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub feed_forward: usize,
}

impl Default for TransformerDims {
    fn default() -> Self {
        TransformerDims {
            model_dim: 16,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            feed_forward: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionerSpec {
    pub variant: Variant,
    pub input_features: usize,
    pub hidden_features: usize,
    pub output_features: usize,
    pub transformer: TransformerDims,
}

impl ConditionerSpec {
    pub fn identity(features: usize) -> Self {
        ConditionerSpec {
            variant: Variant::Identity,
            input_features: features,
            hidden_features: 0,
            output_features: features,
            transformer: TransformerDims::default(),
        }
    }

    pub fn mlp(inputs: usize, hidden: usize, outputs: usize) -> Self {
        ConditionerSpec {
            variant: Variant::Mlp,
            input_features: inputs,
            hidden_features: hidden,
            output_features: outputs,
            transformer: TransformerDims::default(),
        }
    }

    /// Sequence encoder with 3 input, 4 hidden and 4 output features.
    pub fn sequential(variant: Variant) -> Self {
        ConditionerSpec {
            variant,
            input_features: 3,
            hidden_features: 4,
            output_features: 4,
            transformer: TransformerDims::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.input_features == 0 || self.output_features == 0 {
            return bad("conditioner feature counts must be positive".into());
        }
        match self.variant {
            Variant::Identity if self.output_features != self.input_features => bad(format!(
                "identity conditioner needs output == input features ({} != {})",
                self.output_features, self.input_features
            )),
            Variant::Mlp | Variant::Rnn | Variant::Gru | Variant::Lstm
                if self.hidden_features == 0 =>
            {
                bad("hidden features must be positive".into())
            }
            Variant::Transformer
                if self.transformer.heads == 0
                    || !self.transformer.model_dim.is_multiple_of(self.transformer.heads)
                    || self.transformer.encoder_layers == 0
                    || self.transformer.decoder_layers == 0 =>
            {
                bad(format!("invalid transformer dims {:?}", self.transformer))
            }
            _ => Ok(()),
        }
    }
}

/// Ordered `(obs_x, obs_y, time)` triples with strictly increasing time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationSequence {
    obs: Vec<[f64; 3]>,
}

impl ObservationSequence {
    pub fn new(obs: Vec<[f64; 3]>) -> Result<Self> {
        if obs.is_empty() {
            return Err(Error::Empty("observation sequence"));
        }
        if let Some(i) = obs.windows(2).position(|w| w[1][2] <= w[0][2]) {
            return Err(Error::Context(format!(
                "observation times must strictly increase (index {})",
                i + 1
            )));
        }
        Ok(ObservationSequence { obs })
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn as_slice(&self) -> &[[f64; 3]] {
        &self.obs
    }

    pub fn last_time(&self) -> f64 {
        self.obs[self.obs.len() - 1][2]
    }
}

/// Raw conditioning information for one data point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Context {
    Vector(Vec<f64>),
    Sequence(ObservationSequence),
}

impl Context {
    pub fn time(t: f64) -> Self {
        Context::Vector(vec![t])
    }
}

/// Rectangular batch of contexts: `[B, f]` vectors or `[B, L, f]` sequences.
#[derive(Clone, Debug, PartialEq)]
pub enum ContextBatch {
    Vectors(Tensor),
    Sequences(Tensor),
}

impl ContextBatch {
    pub fn from_contexts(contexts: &[Context]) -> Result<Self> {
        let first = contexts.first().ok_or(Error::Empty("context batch"))?;
        match first {
            Context::Vector(v0) => {
                let mut data = Vec::with_capacity(contexts.len() * v0.len());
                for c in contexts {
                    match c {
                        Context::Vector(v) if v.len() == v0.len() => data.extend_from_slice(v),
                        _ => {
                            return Err(Error::Context(
                                "batch mixes context kinds or vector lengths".into(),
                            ))
                        }
                    }
                }
                Ok(ContextBatch::Vectors(Tensor::new(
                    vec![contexts.len(), v0.len()],
                    data,
                )?))
            }
            Context::Sequence(s0) => {
                let len = s0.len();
                let mut data = Vec::with_capacity(contexts.len() * len * 3);
                for c in contexts {
                    match c {
                        Context::Sequence(s) if s.len() == len => {
                            data.extend(s.as_slice().iter().flatten());
                        }
                        _ => {
                            return Err(Error::Context(
                                "batch mixes context kinds or sequence lengths".into(),
                            ))
                        }
                    }
                }
                Ok(ContextBatch::Sequences(Tensor::new(
                    vec![contexts.len(), len, 3],
                    data,
                )?))
            }
        }
    }

    pub fn batch_size(&self) -> usize {
        match self {
            ContextBatch::Vectors(t) | ContextBatch::Sequences(t) => t.shape()[0],
        }
    }

    pub fn tensor(&self) -> &Tensor {
        match self {
            ContextBatch::Vectors(t) | ContextBatch::Sequences(t) => t,
        }
    }

    pub fn features(&self) -> usize {
        self.tensor().last_dim()
    }

    /// Rows `range` of the batch.
    pub fn slice(&self, range: std::ops::Range<usize>) -> ContextBatch {
        let t = self.tensor();
        let per: usize = t.shape()[1..].iter().product();
        let data = t.data()[range.start * per..range.end * per].to_vec();
        let mut shape = t.shape().to_vec();
        shape[0] = range.len();
        let t = Tensor::from_parts(shape, data);
        match self {
            ContextBatch::Vectors(_) => ContextBatch::Vectors(t),
            ContextBatch::Sequences(_) => ContextBatch::Sequences(t),
        }
    }

    /// Copy with every feature column passed through `f(column, value)`.
    pub fn map_features(&self, f: impl Fn(usize, f64) -> f64) -> ContextBatch {
        let t = self.tensor();
        let m = t.last_dim();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(i % m, x))
            .collect();
        let t = Tensor::from_parts(t.shape().to_vec(), data);
        match self {
            ContextBatch::Vectors(_) => ContextBatch::Vectors(t),
            ContextBatch::Sequences(_) => ContextBatch::Sequences(t),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let n = tape.layer_norm_last(x, 1e-5);
        let g = tape.mul_row(n, p.get(self.gain))?;
        tape.add_row(g, p.get(self.bias))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Attention {
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        Attention {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        }
    }

    /// Multi-head scaled dot-product attention of `[B, Lq, D]` queries over `[B, Lk, D]` memory.
    fn forward(&self, tape: &mut Tape, p: &Bound, xq: Var, mem: Var) -> Result<Var> {
        let q = self.query.forward(tape, p, xq)?;
        let k = self.key.forward(tape, p, mem)?;
        let v = self.value.forward(tape, p, mem)?;
        let dim = self.query.outputs;
        let dk = dim / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * dk, (h + 1) * dk);
            let qh = tape.slice_last(q, a, b)?;
            let kh = tape.slice_last(k, a, b)?;
            let vh = tape.slice_last(v, a, b)?;
            let scores = tape.bmm_nt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_last(scores);
            outs.push(tape.bmm(attn, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_last(&outs)?
        };
        self.out.forward(tape, p, cat)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, p, x)?;
        let h = tape.relu(h);
        self.down.forward(tape, p, h)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EncoderLayer {
    attn: Attention,
    norm1: LayerNorm,
    ff: FeedForward,
    norm2: LayerNorm,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DecoderLayer {
    self_attn: Attention,
    norm1: LayerNorm,
    cross_attn: Attention,
    norm2: LayerNorm,
    ff: FeedForward,
    norm3: LayerNorm,
}

/// Encoder-decoder transformer used as a many-to-one sequence encoder.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransformerEncoder {
    input: Linear,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    head: Linear,
    dims: TransformerDims,
}

/// Sinusoidal positional encoding, `[len, dim]` row-major.
pub fn positional_encoding(len: usize, dim: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * rate;
            pe[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

impl TransformerEncoder {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, spec: &ConditionerSpec, rng: &mut R) -> Self {
        let d = spec.transformer;
        let ff = |store: &mut ParamStore, name: &str, rng: &mut R| FeedForward {
            up: Linear::new(store, &format!("{name}.up"), d.model_dim, d.feed_forward, rng),
            down: Linear::new(store, &format!("{name}.down"), d.feed_forward, d.model_dim, rng),
        };
        let input = Linear::new(store, "cond.input", spec.input_features, d.model_dim, rng);
        let encoder = (0..d.encoder_layers)
            .map(|i| {
                let n = format!("cond.enc{i}");
                EncoderLayer {
                    attn: Attention::new(store, &format!("{n}.attn"), d.model_dim, d.heads, rng),
                    norm1: LayerNorm::new(store, &format!("{n}.norm1"), d.model_dim),
                    ff: ff(store, &format!("{n}.ff"), rng),
                    norm2: LayerNorm::new(store, &format!("{n}.norm2"), d.model_dim),
                }
            })
            .collect();
        let decoder = (0..d.decoder_layers)
            .map(|i| {
                let n = format!("cond.dec{i}");
                DecoderLayer {
                    self_attn: Attention::new(store, &format!("{n}.self"), d.model_dim, d.heads, rng),
                    norm1: LayerNorm::new(store, &format!("{n}.norm1"), d.model_dim),
                    cross_attn: Attention::new(store, &format!("{n}.cross"), d.model_dim, d.heads, rng),
                    norm2: LayerNorm::new(store, &format!("{n}.norm2"), d.model_dim),
                    ff: ff(store, &format!("{n}.ff"), rng),
                    norm3: LayerNorm::new(store, &format!("{n}.norm3"), d.model_dim),
                }
            })
            .collect();
        let head = Linear::new(store, "cond.head", d.model_dim, spec.output_features, rng);
        TransformerEncoder {
            input,
            encoder,
            decoder,
            head,
            dims: d,
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, seq: &Tensor) -> Result<Var> {
        let (b, len) = (seq.shape()[0], seq.shape()[1]);
        let dm = self.dims.model_dim;
        let x = tape.constant(seq.clone());
        let x = self.input.forward(tape, p, x)?;
        let pe = positional_encoding(len, dm);
        let pe_batch: Vec<f64> = (0..b).flat_map(|_| pe.iter().copied()).collect();
        let pe = tape.constant(Tensor::from_parts(vec![b, len, dm], pe_batch));
        let mut mem = tape.add(x, pe)?;
        for layer in &self.encoder {
            let a = layer.attn.forward(tape, p, mem, mem)?;
            let h = tape.add(mem, a)?;
            let h = layer.norm1.forward(tape, p, h)?;
            let f = layer.ff.forward(tape, p, h)?;
            let h2 = tape.add(h, f)?;
            mem = layer.norm2.forward(tape, p, h2)?;
        }

        // single zero target token at position 0
        let pe0 = positional_encoding(1, dm);
        let tgt: Vec<f64> = (0..b).flat_map(|_| pe0.iter().copied()).collect();
        let mut y = tape.constant(Tensor::from_parts(vec![b, 1, dm], tgt));
        for layer in &self.decoder {
            let a = layer.self_attn.forward(tape, p, y, y)?;
            let h = tape.add(y, a)?;
            let h = layer.norm1.forward(tape, p, h)?;
            let c = layer.cross_attn.forward(tape, p, h, mem)?;
            let h2 = tape.add(h, c)?;
            let h2 = layer.norm2.forward(tape, p, h2)?;
            let f = layer.ff.forward(tape, p, h2)?;
            let h3 = tape.add(h2, f)?;
            y = layer.norm3.forward(tape, p, h3)?;
        }
        let y = tape.reshape(y, &[b, dm])?;
        self.head.forward(tape, p, y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
enum CellKind {
    Rnn,
    Gru,
    Lstm,
}

impl CellKind {
    fn gates(self) -> usize {
        match self {
            CellKind::Rnn => 1,
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }
}

/// Single-layer recurrent encoder; the final hidden state is projected to the embedding.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecurrentEncoder {
    kind: CellKind,
    input: Linear,
    recurrent: ParamId,
    recurrent_bias: ParamId,
    head: Linear,
    hidden: usize,
}

impl RecurrentEncoder {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, kind: CellKind, spec: &ConditionerSpec, rng: &mut R) -> Self {
        let h = spec.hidden_features;
        let g = kind.gates() * h;
        RecurrentEncoder {
            kind,
            input: Linear::new(store, "cond.input", spec.input_features, g, rng),
            recurrent: store.add_uniform("cond.recurrent", &[h, g], h, rng),
            recurrent_bias: store.add_uniform("cond.recurrent_bias", &[g], h, rng),
            head: Linear::new(store, "cond.head", h, spec.output_features, rng),
            hidden: h,
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, seq: &Tensor) -> Result<Var> {
        let (b, len) = (seq.shape()[0], seq.shape()[1]);
        let hs = self.hidden;
        // project all steps at once: [B, L, gates*H]
        let x = tape.constant(seq.clone());
        let gi_all = self.input.forward(tape, p, x)?;
        let gi_all = tape.reshape(gi_all, &[b, len * self.kind.gates() * hs])?;
        let gw = self.kind.gates() * hs;

        let mut h = tape.constant(Tensor::zeros(&[b, hs]));
        let mut c = tape.constant(Tensor::zeros(&[b, hs]));
        for t in 0..len {
            let gi = tape.slice_last(gi_all, t * gw, (t + 1) * gw)?;
            let gh = tape.matmul(h, p.get(self.recurrent))?;
            let gh = tape.add_row(gh, p.get(self.recurrent_bias))?;
            match self.kind {
                CellKind::Rnn => {
                    let pre = tape.add(gi, gh)?;
                    h = tape.tanh(pre);
                }
                CellKind::Gru => {
                    let gi_rz = tape.slice_last(gi, 0, 2 * hs)?;
                    let gh_rz = tape.slice_last(gh, 0, 2 * hs)?;
                    let rz = tape.add(gi_rz, gh_rz)?;
                    let rz = tape.sigmoid(rz);
                    let r = tape.slice_last(rz, 0, hs)?;
                    let z = tape.slice_last(rz, hs, 2 * hs)?;
                    let gi_n = tape.slice_last(gi, 2 * hs, 3 * hs)?;
                    let gh_n = tape.slice_last(gh, 2 * hs, 3 * hs)?;
                    let rn = tape.mul(r, gh_n)?;
                    let n = tape.add(gi_n, rn)?;
                    let n = tape.tanh(n);
                    // h = n + z * (h - n)
                    let diff = tape.sub(h, n)?;
                    let zd = tape.mul(z, diff)?;
                    h = tape.add(n, zd)?;
                }
                CellKind::Lstm => {
                    let pre = tape.add(gi, gh)?;
                    let ifo_pre = tape.slice_last(pre, 0, 3 * hs)?;
                    let ifo = tape.sigmoid(ifo_pre);
                    let g_pre = tape.slice_last(pre, 3 * hs, 4 * hs)?;
                    let g = tape.tanh(g_pre);
                    let i = tape.slice_last(ifo, 0, hs)?;
                    let fg = tape.slice_last(ifo, hs, 2 * hs)?;
                    let o = tape.slice_last(ifo, 2 * hs, 3 * hs)?;
                    let fc = tape.mul(fg, c)?;
                    let ig = tape.mul(i, g)?;
                    c = tape.add(fc, ig)?;
                    let tc = tape.tanh(c);
                    h = tape.mul(o, tc)?;
                }
            }
        }
        self.head.forward(tape, p, h)
    }
}

/// A built conditioner: architecture plus parameter handles into a store.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Conditioner {
    Identity { features: usize },
    Mlp(Mlp),
    Recurrent(RecurrentEncoder),
    Transformer(TransformerEncoder),
}

impl Conditioner {
    /// Registers the conditioner's parameters in `store`.
    pub fn build<R: Rng + ?Sized>(spec: &ConditionerSpec, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        Ok(match spec.variant {
            Variant::Identity => Conditioner::Identity {
                features: spec.input_features,
            },
            Variant::Mlp => Conditioner::Mlp(Mlp::new(
                store,
                "cond",
                spec.input_features,
                &[spec.hidden_features],
                spec.output_features,
                rng,
            )),
            Variant::Rnn => Conditioner::Recurrent(RecurrentEncoder::new(store, CellKind::Rnn, spec, rng)),
            Variant::Gru => Conditioner::Recurrent(RecurrentEncoder::new(store, CellKind::Gru, spec, rng)),
            Variant::Lstm => Conditioner::Recurrent(RecurrentEncoder::new(store, CellKind::Lstm, spec, rng)),
            Variant::Transformer => Conditioner::Transformer(TransformerEncoder::new(store, spec, rng)),
        })
    }

    pub fn wants_sequence(&self) -> bool {
        matches!(self, Conditioner::Recurrent(_) | Conditioner::Transformer(_))
    }

    pub fn input_features(&self) -> usize {
        match self {
            Conditioner::Identity { features } => *features,
            Conditioner::Mlp(m) => m.inputs(),
            Conditioner::Recurrent(r) => r.input.inputs,
            Conditioner::Transformer(t) => t.input.inputs,
        }
    }

    pub fn output_features(&self) -> usize {
        match self {
            Conditioner::Identity { features } => *features,
            Conditioner::Mlp(m) => m.outputs(),
            Conditioner::Recurrent(r) => r.head.outputs,
            Conditioner::Transformer(t) => t.head.outputs,
        }
    }

    pub fn check(&self, ctx: &ContextBatch) -> Result<()> {
        let kind_ok = match ctx {
            ContextBatch::Vectors(_) => !self.wants_sequence(),
            ContextBatch::Sequences(_) => self.wants_sequence(),
        };
        if !kind_ok {
            return Err(Error::Context(format!(
                "conditioner expects {} contexts",
                if self.wants_sequence() { "sequence" } else { "vector" }
            )));
        }
        if ctx.features() != self.input_features() {
            return Err(Error::Context(format!(
                "expected {} context features, got {}",
                self.input_features(),
                ctx.features()
            )));
        }
        Ok(())
    }

    /// Embeds a batch of contexts: `[B, output_features]`.
    pub fn encode_batch(&self, tape: &mut Tape, p: &Bound, ctx: &ContextBatch) -> Result<Var> {
        self.check(ctx)?;
        match (self, ctx) {
            (Conditioner::Identity { .. }, ContextBatch::Vectors(t)) => Ok(tape.constant(t.clone())),
            (Conditioner::Mlp(m), ContextBatch::Vectors(t)) => {
                let x = tape.constant(t.clone());
                m.forward(tape, p, x)
            }
            (Conditioner::Recurrent(r), ContextBatch::Sequences(t)) => r.forward(tape, p, t),
            (Conditioner::Transformer(tr), ContextBatch::Sequences(t)) => tr.forward(tape, p, t),
            _ => unreachable!("context kind checked above"),
        }
    }

    /// Embedding of a single context, evaluated with frozen weights.
    pub fn encode(&self, store: &ParamStore, ctx: &Context) -> Result<Vec<f64>> {
        let batch = ContextBatch::from_contexts(std::slice::from_ref(ctx))?;
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let e = self.encode_batch(&mut tape, &p, &batch)?;
        Ok(tape.value(e).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(len: usize, f: impl Fn(usize) -> [f64; 2]) -> Context {
        Context::Sequence(
            ObservationSequence::new(
                (0..len)
                    .map(|i| {
                        let [x, y] = f(i);
                        [x, y, i as f64 * 0.125]
                    })
                    .collect(),
            )
            .unwrap(),
        )
    }

    fn build(variant: Variant, seed: u64) -> (Conditioner, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = Conditioner::build(&ConditionerSpec::sequential(variant), &mut store, &mut rng).unwrap();
        (c, store)
    }

    #[test]
    fn identity_passes_context_through() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Conditioner::build(&ConditionerSpec::identity(1), &mut store, &mut rng).unwrap();
        assert_eq!(c.encode(&store, &Context::time(13.0)).unwrap(), vec![13.0]);
        assert_eq!(store.numel(), 0);
    }

    #[test]
    fn empty_sequence_rejected() {
        assert!(matches!(ObservationSequence::new(vec![]), Err(Error::Empty(_))));
        assert!(ObservationSequence::new(vec![[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]]).is_err());
    }

    #[test]
    fn wrong_context_kind_rejected() {
        let (rnn, store) = build(Variant::Rnn, 1);
        assert!(matches!(rnn.encode(&store, &Context::time(1.0)), Err(Error::Context(_))));
        let mut s2 = ParamStore::new();
        let id = Conditioner::build(&ConditionerSpec::identity(1), &mut s2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(id.encode(&s2, &seq(3, |_| [0.0, 0.0])).is_err());
        assert!(id.encode(&s2, &Context::Vector(vec![1.0, 2.0])).is_err());
    }

    #[test]
    fn zero_weight_rnn_gives_zero_embedding() {
        let (rnn, mut store) = build(Variant::Rnn, 2);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let e = rnn.encode(&store, &seq(7, |i| [i as f64, -(i as f64)])).unwrap();
        assert_eq!(e, vec![0.0; 4]);
    }

    #[test]
    fn gated_cells_track_sequence_length() {
        for variant in [Variant::Gru, Variant::Lstm] {
            for seed in 0..5 {
                let (c, store) = build(variant, seed);
                let short = c.encode(&store, &seq(1, |_| [0.7, -0.3])).unwrap();
                let long = c.encode(&store, &seq(20, |_| [0.7, -0.3])).unwrap();
                assert_ne!(short, long, "{variant} seed {seed}");
            }
        }
    }

    #[test]
    fn transformer_embedding_shape_and_order_sensitivity() {
        let (tr, store) = build(Variant::Transformer, 3);
        for len in [1, 5, 50] {
            assert_eq!(tr.encode(&store, &seq(len, |i| [i as f64, 1.0])).unwrap().len(), 4);
        }
        let fwd = seq(6, |i| [(i as f64).sin(), (i as f64 * 0.7).cos()]);
        let rev = seq(6, |i| [((5 - i) as f64).sin(), ((5 - i) as f64 * 0.7).cos()]);
        let a = tr.encode(&store, &fwd).unwrap();
        assert_ne!(a, tr.encode(&store, &rev).unwrap());
        assert_eq!(a, tr.encode(&store, &fwd).unwrap());
    }

    #[test]
    fn long_constant_sequences_stay_finite() {
        for variant in [Variant::Gru, Variant::Lstm] {
            let (c, store) = build(variant, 4);
            let e = c.encode(&store, &seq(500, |_| [3.0, -2.0])).unwrap();
            assert!(e.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn weight_count_independent_of_length() {
        for variant in [Variant::Rnn, Variant::Gru, Variant::Lstm, Variant::Transformer] {
            let (c, store) = build(variant, 5);
            let before = store.numel();
            c.encode(&store, &seq(3, |_| [0.0, 0.0])).unwrap();
            c.encode(&store, &seq(30, |_| [0.0, 0.0])).unwrap();
            assert_eq!(store.numel(), before);
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = ConditionerSpec::identity(2);
        s.output_features = 3;
        assert!(s.validate().is_err());
        let mut t = ConditionerSpec::sequential(Variant::Transformer);
        t.transformer.heads = 3;
        assert!(t.validate().is_err());
        assert_eq!("gru".parse::<Variant>().unwrap(), Variant::Gru);
        assert!("vae".parse::<Variant>().is_err());
    }
}
