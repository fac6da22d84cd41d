//! Reverse-mode differentiation tape.
//!
//! Every primitive appends one node holding its forward value. `backward`
//! walks the nodes in exact reverse recording order, so the forward values
//! are never touched after recording.

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Lower bound applied to the argument of [`Tape::log`].
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    Bmm(Var, Var),
    BmmNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    AddScalar(Var),
    Neg(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    LogSumExpLast(Var),
    SoftmaxLast(Var),
    LayerNormLast(Var, f64),
    Concat(Vec<Var>),
    SliceLast(Var, usize, usize),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    BroadcastRows(Var),
    DiagEmbed(Var),
    Transpose(Var),
    SolveTri {
        a: Var,
        b: Var,
        lower: bool,
        unit: bool,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to `v`; zeros when `v` did not reach the loss.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.sizes[v.0]],
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

// c[n,m] += a[n,k] * b[k,m]
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

// c[n,m] += a[n,k] * b[m,k]^T
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * m + j] += dot;
        }
    }
}

// c[n,m] += a[k,n]^T * b[k,m]
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for p in 0..k {
        let brow = &b[p * m..(p + 1) * m];
        for i in 0..n {
            let api = a[p * n + i];
            if api == 0.0 {
                continue;
            }
            let crow = &mut c[i * m..(i + 1) * m];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += api * bj;
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(g) => {
            for (gi, ci) in g.iter_mut().zip(contribution) {
                *gi += ci;
            }
        }
        None => *slot = Some(contribution),
    }
}

fn leading(shape: &[usize]) -> usize {
    shape[..shape.len().saturating_sub(1)].iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const, false)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(name, sa, sb));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_parts(sa.to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    /// `[..., k] x [k, m] -> [..., m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || *sa.last().unwrap() != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (k, m) = (sb[0], sb[1]);
        let n = leading(&sa);
        let mut out = vec![0.0; n * m];
        gemm_nn(self.data(a), self.data(b), &mut out, n, k, m);
        let mut shape = sa;
        *shape.last_mut().unwrap() = m;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), rg))
    }

    /// Batched `[B, n, k] x [B, k, m] -> [B, n, m]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let (bs, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * n * m];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..bs {
            gemm_nn(
                &ad[i * n * k..(i + 1) * n * k],
                &bd[i * k * m..(i + 1) * k * m],
                &mut out[i * n * m..(i + 1) * n * m],
                n,
                k,
                m,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![bs, n, m], out), Op::Bmm(a, b), rg))
    }

    /// Batched `[B, n, k] x [B, m, k]^T -> [B, n, m]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(shape_err("bmm_nt", &sa, &sb));
        }
        let (bs, n, k, m) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![0.0; bs * n * m];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..bs {
            gemm_nt(
                &ad[i * n * k..(i + 1) * n * k],
                &bd[i * m * k..(i + 1) * m * k],
                &mut out[i * n * m..(i + 1) * n * m],
                n,
                k,
                m,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![bs, n, m], out), Op::BmmNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise quotient. Division by zero follows IEEE semantics.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn row_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 1 || *sa.last().unwrap() != sb[0] {
            return Err(shape_err(name, &sa, &sb));
        }
        let m = sb[0];
        let bd = self.data(b);
        let data = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % m]))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(sa, data), op, rg))
    }

    /// Adds a `[m]` vector to every row of `[..., m]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_op("add_row", a, b, Op::AddRow(a, b), |x, y| x + y)
    }

    /// Multiplies every row of `[..., m]` by a `[m]` vector.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_op("mul_row", a, b, Op::MulRow(a, b), |x, y| x * y)
    }

    /// Elementwise product with a fixed mask of the same shape.
    pub fn mask(&mut self, a: Var, mask: &[f64]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.iter().product::<usize>() != mask.len() {
            return Err(shape_err("mask", &sa, &[mask.len()]));
        }
        let data = self.data(a).iter().zip(mask).map(|(x, m)| x * m).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(sa, data), Op::MulConst(a, mask.to_vec()), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// Natural log of `max(a, LOG_FLOOR)`; the gradient is zero where the
    /// floor is active.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), |x| x.max(LOG_FLOOR).ln())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Hard clamp to `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    fn reduce_last(&mut self, a: Var, op: Op, f: impl Fn(&[f64]) -> f64) -> Var {
        let av = &self.nodes[a.0].value;
        let shape = av.shape();
        let out_shape = shape[..shape.len().saturating_sub(1)].to_vec();
        let data = av.rows().map(f).collect();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(out_shape, data), op, rg)
    }

    /// Sums over the last axis: `[..., m] -> [...]`.
    pub fn sum_last(&mut self, a: Var) -> Var {
        self.reduce_last(a, Op::SumLast(a), |r| r.iter().sum())
    }

    /// Numerically stable `log(sum(exp(.)))` over the last axis.
    pub fn logsumexp_last(&mut self, a: Var) -> Var {
        self.reduce_last(a, Op::LogSumExpLast(a), |r| {
            let mx = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return mx;
            }
            mx + r.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
        })
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let mut data = Vec::with_capacity(av.numel());
        for r in av.rows() {
            let mx = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            data.extend(r.iter().map(|x| (x - mx).exp()));
            let z: f64 = data[start..].iter().sum();
            data[start..].iter_mut().for_each(|x| *x /= z);
        }
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxLast(a), rg)
    }

    /// Normalizes each row of the last axis to zero mean and unit variance.
    pub fn layer_norm_last(&mut self, a: Var, eps: f64) -> Var {
        let av = &self.nodes[a.0].value;
        let m = av.last_dim() as f64;
        let mut data = Vec::with_capacity(av.numel());
        for r in av.rows() {
            let mu = r.iter().sum::<f64>() / m;
            let var = r.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / m;
            let inv = 1.0 / (var + eps).sqrt();
            data.extend(r.iter().map(|x| (x - mu) * inv));
        }
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push(value, Op::LayerNormLast(a, eps), rg)
    }

    /// Concatenates along the last axis; leading dimensions must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_last"))?;
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        if lead.is_empty() && self.shape(first).is_empty() {
            return Err(Error::invalid("concat_last", "cannot concatenate scalars"));
        }
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(shape_err("concat_last", self.shape(first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let m = *sa.last().ok_or_else(|| Error::invalid("slice_last", "scalar input"))?;
        if start >= end || end > m {
            return Err(Error::invalid(
                "slice_last",
                format!("range {start}..{end} out of bounds for shape {sa:?}"),
            ));
        }
        let data = self
            .value(a)
            .rows()
            .flat_map(|r| r[start..end].iter().copied())
            .collect();
        let mut shape = sa;
        *shape.last_mut().unwrap() = end - start;
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, data), Op::SliceLast(a, start, end), rg))
    }

    /// `out[..., j] = a[..., index[j]]`.
    pub fn gather_last(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let m = *sa.last().ok_or_else(|| Error::invalid("gather_last", "scalar input"))?;
        if index.is_empty() || index.iter().any(|&i| i >= m) {
            return Err(Error::invalid(
                "gather_last",
                format!("index {index:?} out of bounds for shape {sa:?}"),
            ));
        }
        let data = self
            .value(a)
            .rows()
            .flat_map(|r| index.iter().map(move |&i| r[i]))
            .collect();
        let mut shape = sa;
        *shape.last_mut().unwrap() = index.len();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Gather(a, index.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        if sa.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(shape_err("reshape", sa, shape));
        }
        let data = self.data(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Reshape(a), rg))
    }

    /// Repeats a `[m]` vector into `[n, m]`.
    pub fn broadcast_rows(&mut self, v: Var, n: usize) -> Result<Var> {
        let sv = self.shape(v);
        if sv.len() != 1 || n == 0 {
            return Err(shape_err("broadcast_rows", sv, &[n]));
        }
        let m = sv[0];
        let row = self.data(v).to_vec();
        let data = (0..n).flat_map(|_| row.iter().copied()).collect();
        let rg = self.rg(v);
        Ok(self.push(Tensor::from_parts(vec![n, m], data), Op::BroadcastRows(v), rg))
    }

    /// `[d] -> [d, d]` diagonal matrix.
    pub fn diag_embed(&mut self, v: Var) -> Result<Var> {
        let sv = self.shape(v);
        if sv.len() != 1 {
            return Err(shape_err("diag_embed", sv, &[]));
        }
        let d = sv[0];
        let mut data = vec![0.0; d * d];
        for (i, x) in self.data(v).iter().enumerate() {
            data[i * d + i] = *x;
        }
        let rg = self.rg(v);
        Ok(self.push(Tensor::from_parts(vec![d, d], data), Op::DiagEmbed(v), rg))
    }

    /// Transpose of a `[r, c]` matrix.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(shape_err("transpose", &sa, &[]));
        }
        let (r, c) = (sa[0], sa[1]);
        let ad = self.data(a);
        let data = (0..c * r).map(|idx| ad[(idx % r) * c + idx / r]).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![c, r], data), Op::Transpose(a), rg))
    }

    /// Solves `A x = b` for every row `b` of `[..., d]`, with `A` triangular.
    /// Only the relevant triangle of `A` is read; with `unit` the diagonal is
    /// taken to be one.
    pub fn solve_triangular(&mut self, a: Var, b: Var, lower: bool, unit: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sa[0] != sa[1] || sb.last() != Some(&sa[0]) {
            return Err(shape_err("solve_triangular", &sa, &sb));
        }
        let d = sa[0];
        let ad = self.data(a);
        let mut out = self.data(b).to_vec();
        for row in out.chunks_mut(d) {
            tri_solve_row(ad, row, d, lower, unit, false);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(sb, out),
            Op::SolveTri { a, b, lower, unit },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let sizes = self.nodes.iter().map(|n| n.value.numel()).collect();
        Ok(Gradients { grads, sizes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        let mut send = |v: Var, contrib: Vec<f64>| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], contrib);
            }
        };
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                let sb = self.shape(*b);
                let (k, m) = (sb[0], sb[1]);
                let n = g.len() / m;
                if self.rg(*a) {
                    let mut da = vec![0.0; n * k];
                    gemm_nt(g, self.data(*b), &mut da, n, m, k);
                    send(*a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * m];
                    gemm_tn(self.data(*a), g, &mut db, k, n, m);
                    send(*b, db);
                }
            }
            Op::Bmm(a, b) => {
                let sa = self.shape(*a);
                let (bs, n, k) = (sa[0], sa[1], sa[2]);
                let m = self.shape(*b)[2];
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.rg(*a) {
                    let mut da = vec![0.0; bs * n * k];
                    for i in 0..bs {
                        gemm_nt(
                            &g[i * n * m..(i + 1) * n * m],
                            &bd[i * k * m..(i + 1) * k * m],
                            &mut da[i * n * k..(i + 1) * n * k],
                            n,
                            m,
                            k,
                        );
                    }
                    send(*a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; bs * k * m];
                    for i in 0..bs {
                        gemm_tn(
                            &ad[i * n * k..(i + 1) * n * k],
                            &g[i * n * m..(i + 1) * n * m],
                            &mut db[i * k * m..(i + 1) * k * m],
                            k,
                            n,
                            m,
                        );
                    }
                    send(*b, db);
                }
            }
            Op::BmmNt(a, b) => {
                let sa = self.shape(*a);
                let (bs, n, k) = (sa[0], sa[1], sa[2]);
                let m = self.shape(*b)[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.rg(*a) {
                    // dA = G B
                    let mut da = vec![0.0; bs * n * k];
                    for i in 0..bs {
                        gemm_nn(
                            &g[i * n * m..(i + 1) * n * m],
                            &bd[i * m * k..(i + 1) * m * k],
                            &mut da[i * n * k..(i + 1) * n * k],
                            n,
                            m,
                            k,
                        );
                    }
                    send(*a, da);
                }
                if self.rg(*b) {
                    // dB = G^T A
                    let mut db = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        gemm_tn(
                            &g[i * n * m..(i + 1) * n * m],
                            &ad[i * n * k..(i + 1) * n * k],
                            &mut db[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    send(*b, db);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                send(*a, g.iter().zip(bd).map(|(gi, bi)| gi * bi).collect());
                send(*b, g.iter().zip(ad).map(|(gi, ai)| gi * ai).collect());
            }
            Op::Div(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                send(*a, g.iter().zip(bd).map(|(gi, bi)| gi / bi).collect());
                send(
                    *b,
                    g.iter()
                        .zip(ad.iter().zip(bd))
                        .map(|(gi, (ai, bi))| -gi * ai / (bi * bi))
                        .collect(),
                );
            }
            Op::AddRow(a, b) => {
                let m = self.shape(*b)[0];
                send(*a, g.to_vec());
                if self.rg(*b) {
                    let mut db = vec![0.0; m];
                    for (i, gi) in g.iter().enumerate() {
                        db[i % m] += gi;
                    }
                    send(*b, db);
                }
            }
            Op::MulRow(a, b) => {
                let m = self.shape(*b)[0];
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.rg(*a) {
                    send(*a, g.iter().enumerate().map(|(i, gi)| gi * bd[i % m]).collect());
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; m];
                    for (i, gi) in g.iter().enumerate() {
                        db[i % m] += gi * ad[i];
                    }
                    send(*b, db);
                }
            }
            Op::MulConst(a, mask) => {
                send(*a, g.iter().zip(mask).map(|(gi, mi)| gi * mi).collect());
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|gi| gi * c).collect()),
            Op::AddScalar(a) => send(*a, g.to_vec()),
            Op::Neg(a) => send(*a, g.iter().map(|gi| -gi).collect()),
            Op::Tanh(a) => send(*a, g.iter().zip(out).map(|(gi, y)| gi * (1.0 - y * y)).collect()),
            Op::Sigmoid(a) => send(*a, g.iter().zip(out).map(|(gi, y)| gi * y * (1.0 - y)).collect()),
            Op::Exp(a) => send(*a, g.iter().zip(out).map(|(gi, y)| gi * y).collect()),
            Op::Log(a) => send(
                *a,
                g.iter()
                    .zip(self.data(*a))
                    .map(|(gi, &x)| if x >= LOG_FLOOR { gi / x } else { 0.0 })
                    .collect(),
            ),
            Op::Relu(a) => send(
                *a,
                g.iter()
                    .zip(self.data(*a))
                    .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                    .collect(),
            ),
            Op::Square(a) => send(
                *a,
                g.iter().zip(self.data(*a)).map(|(gi, x)| 2.0 * gi * x).collect(),
            ),
            Op::Clamp(a, lo, hi) => send(
                *a,
                g.iter()
                    .zip(self.data(*a))
                    .map(|(gi, &x)| if x >= *lo && x <= *hi { *gi } else { 0.0 })
                    .collect(),
            ),
            Op::Sum(a) => send(*a, vec![g[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                send(*a, vec![g[0] / n as f64; n]);
            }
            Op::SumLast(a) => {
                let m = self.value(*a).last_dim();
                send(*a, g.iter().flat_map(|&gi| std::iter::repeat_n(gi, m)).collect());
            }
            Op::LogSumExpLast(a) => {
                let av = self.value(*a);
                let mut da = Vec::with_capacity(av.numel());
                for ((r, &lse), &gi) in av.rows().zip(out).zip(g) {
                    da.extend(r.iter().map(|x| gi * (x - lse).exp()));
                }
                send(*a, da);
            }
            Op::SoftmaxLast(a) => {
                let m = self.value(*a).last_dim();
                let mut da = Vec::with_capacity(out.len());
                for (y, gy) in out.chunks(m).zip(g.chunks(m)) {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    da.extend(y.iter().zip(gy).map(|(yi, gi)| yi * (gi - dot)));
                }
                send(*a, da);
            }
            Op::LayerNormLast(a, eps) => {
                let av = self.value(*a);
                let m = av.last_dim();
                let mf = m as f64;
                let mut da = Vec::with_capacity(av.numel());
                for ((x, y), gy) in av.rows().zip(out.chunks(m)).zip(g.chunks(m)) {
                    let mu = x.iter().sum::<f64>() / mf;
                    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / mf;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mean_g = gy.iter().sum::<f64>() / mf;
                    let mean_gy = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / mf;
                    da.extend(
                        gy.iter()
                            .zip(y)
                            .map(|(gi, yi)| inv * (gi - mean_g - yi * mean_gy)),
                    );
                }
                send(*a, da);
            }
            Op::Concat(parts) => {
                let total = node.value.last_dim();
                let rows = g.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        send(p, dp);
                    }
                    offset += w;
                }
            }
            Op::SliceLast(a, start, end) => {
                let m = self.value(*a).last_dim();
                let w = end - start;
                let mut da = vec![0.0; self.value(*a).numel()];
                for (r, gr) in g.chunks(w).enumerate() {
                    da[r * m + start..r * m + end].copy_from_slice(gr);
                }
                send(*a, da);
            }
            Op::Gather(a, index) => {
                let m = self.value(*a).last_dim();
                let w = index.len();
                let mut da = vec![0.0; self.value(*a).numel()];
                for (r, gr) in g.chunks(w).enumerate() {
                    for (&i, gi) in index.iter().zip(gr) {
                        da[r * m + i] += gi;
                    }
                }
                send(*a, da);
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::BroadcastRows(v) => {
                let m = self.value(*v).numel();
                let mut dv = vec![0.0; m];
                for (i, gi) in g.iter().enumerate() {
                    dv[i % m] += gi;
                }
                send(*v, dv);
            }
            Op::DiagEmbed(v) => {
                let d = self.value(*v).numel();
                send(*v, (0..d).map(|i| g[i * d + i]).collect());
            }
            Op::Transpose(a) => {
                let sa = self.shape(*a);
                let (r, c) = (sa[0], sa[1]);
                send(*a, (0..r * c).map(|idx| g[(idx % c) * r + idx / c]).collect());
            }
            Op::SolveTri { a, b, lower, unit } => {
                let d = self.shape(*a)[0];
                let ad = self.data(*a);
                // db = A^{-T} g, row by row; dA = -sum_r db_r x_r^T on the used triangle.
                let mut db = g.to_vec();
                for row in db.chunks_mut(d) {
                    tri_solve_row(ad, row, d, *lower, *unit, true);
                }
                if self.rg(*a) {
                    let mut da = vec![0.0; d * d];
                    for (bh, x) in db.chunks(d).zip(out.chunks(d)) {
                        for i in 0..d {
                            for j in 0..d {
                                let used = if *lower { j < i || (j == i && !*unit) } else { j > i || (j == i && !*unit) };
                                if used {
                                    da[i * d + j] -= bh[i] * x[j];
                                }
                            }
                        }
                    }
                    send(*a, da);
                }
                send(*b, db);
            }
        }
    }
}

/// In-place solve of `A x = r` (or `A^T x = r` with `transpose`) for one row.
fn tri_solve_row(a: &[f64], r: &mut [f64], d: usize, lower: bool, unit: bool, transpose: bool) {
    let at = |i: usize, j: usize| if transpose { a[j * d + i] } else { a[i * d + j] };
    // A lower and not transposed, or A upper and transposed: forward substitution.
    let forward = lower != transpose;
    let order: Box<dyn Iterator<Item = usize>> = if forward {
        Box::new(0..d)
    } else {
        Box::new((0..d).rev())
    };
    for i in order {
        let mut s = r[i];
        if forward {
            for j in 0..i {
                s -= at(i, j) * r[j];
            }
        } else {
            for j in i + 1..d {
                s -= at(i, j) * r[j];
            }
        }
        r[i] = if unit { s } else { s / at(i, i) };
    }
}
