//! Common interface of the trainable conditional densities (flow and MDN).

use rand::Rng;

use crate::autodiff::{Bound, ParamGrads, ParamStore, Tape, Tensor, Var};
use crate::conditioners::{Context, ContextBatch};
use crate::error::{Error, Result};
use crate::par::{self, Execution};

pub trait ConditionalDensity: Sync {
    fn dim(&self) -> usize;

    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;

    /// Per-row `log p(x | context)` recorded on `tape`: `[B]`.
    fn log_prob_tape(&self, tape: &mut Tape, p: &Bound, x: &Tensor, ctx: &ContextBatch) -> Result<Var>;

    /// `n` draws from `p(. | context)`, `[n, dim]`.
    fn sample<R: Rng + ?Sized>(&self, n: usize, ctx: &Context, rng: &mut R) -> Result<Tensor>;

    /// Evaluates `log p(x_k | c_k)` for every row, with frozen weights.
    fn log_prob_batch(&self, x: &Tensor, ctx: &ContextBatch) -> Result<Vec<f64>> {
        check_batch(self.dim(), x, ctx)?;
        let mut tape = Tape::new();
        let p = self.params().bind_frozen(&mut tape);
        let lp = self.log_prob_tape(&mut tape, &p, x, ctx)?;
        Ok(tape.value(lp).data().to_vec())
    }

    fn log_prob(&self, x: &[f64], ctx: &Context) -> Result<f64> {
        let xt = Tensor::new(vec![1, x.len()], x.to_vec())?;
        let batch = ContextBatch::from_contexts(std::slice::from_ref(ctx))?;
        Ok(self.log_prob_batch(&xt, &batch)?[0])
    }

    /// `-(1/n) sum_k log p(x_k | c_k)`.
    fn nll_loss(&self, x: &Tensor, ctx: &ContextBatch) -> Result<f64> {
        let lp = self.log_prob_batch(x, ctx)?;
        Ok(-lp.iter().sum::<f64>() / lp.len() as f64)
    }

    /// Mean NLL and its gradient. Rows are split into `chunk`-sized pieces,
    /// each differentiated on its own tape; the pieces are reduced in order,
    /// so the result does not depend on `exec`.
    fn nll_and_grad(
        &self,
        x: &Tensor,
        ctx: &ContextBatch,
        chunk: usize,
        exec: Execution,
    ) -> Result<(f64, ParamGrads)> {
        check_batch(self.dim(), x, ctx)?;
        let n = x.shape()[0];
        let inv_n = 1.0 / n as f64;
        let pieces = par::map_chunks(n, chunk, exec, |range| -> Result<(f64, ParamGrads)> {
            let xs = slice_rows(x, range.clone());
            let cs = ctx.slice(range);
            let mut tape = Tape::new();
            let p = self.params().bind(&mut tape);
            let lp = self.log_prob_tape(&mut tape, &p, &xs, &cs)?;
            let s = tape.sum(lp);
            let loss = tape.scale(s, -inv_n);
            let grads = tape.backward(loss)?;
            Ok((tape.value(loss).data()[0], self.params().collect_grads(&p, &grads)))
        });
        let mut total = 0.0;
        let mut grads = ParamGrads::zeros_like(self.params());
        for piece in pieces {
            let (l, g) = piece?;
            total += l;
            grads.add_assign(&g);
        }
        Ok((total, grads))
    }
}

pub(crate) fn check_batch(dim: usize, x: &Tensor, ctx: &ContextBatch) -> Result<()> {
    if x.shape().len() != 2 || x.shape()[1] != dim {
        return Err(Error::Shape {
            op: "log_prob",
            lhs: x.shape().to_vec(),
            rhs: vec![dim],
        });
    }
    if x.shape()[0] != ctx.batch_size() {
        return Err(Error::Context(format!(
            "{} points but {} contexts",
            x.shape()[0],
            ctx.batch_size()
        )));
    }
    Ok(())
}

pub fn slice_rows(x: &Tensor, range: std::ops::Range<usize>) -> Tensor {
    let m = x.last_dim();
    let mut shape = x.shape().to_vec();
    shape[0] = range.len();
    Tensor::new(shape, x.data()[range.start * m..range.end * m].to_vec()).expect("row slice of valid tensor")
}
