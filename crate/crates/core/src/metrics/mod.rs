//! Evaluation: two-sample k-NN KL divergence, mean log-likelihood and
//! highest-density confidence regions.

mod knn;
mod levelset;

pub use knn::{knn_kl_estimate, KlEstimate, DUPLICATE_JITTER};
pub use levelset::{
    densities, hdr_threshold, level_set_grid, Extents, LevelSetGrid, MIN_RESOLUTION, SIGMA_COVERAGE,
    THRESHOLD_SAMPLES,
};

use crate::autodiff::Tensor;
use crate::conditioners::{Context, ContextBatch};
use crate::density::ConditionalDensity;
use crate::error::{Error, Result};
use crate::par::{self, Execution};

/// Rows per batched evaluation in [`mean_log_likelihood`].
const EVAL_CHUNK: usize = 1024;

/// Arithmetic mean of `log p(x_k | c_k)`.
pub fn mean_log_likelihood<M: ConditionalDensity>(
    model: &M,
    points: &[Vec<f64>],
    contexts: &[Context],
    exec: Execution,
) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Empty("log-likelihood slice"));
    }
    if points.len() != contexts.len() {
        return Err(Error::Context(format!(
            "{} points but {} contexts",
            points.len(),
            contexts.len()
        )));
    }
    let parts = par::map_chunks(points.len(), EVAL_CHUNK, exec, |r| -> Result<f64> {
        let x = Tensor::from_rows(&points[r.clone()])?;
        let c = ContextBatch::from_contexts(&contexts[r])?;
        Ok(model.log_prob_batch(&x, &c)?.iter().sum())
    });
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total / points.len() as f64)
}

/// Result of [`two_means`].
#[derive(Clone, Debug, PartialEq)]
pub struct TwoMeans {
    pub centers: [Vec<f64>; 2],
    pub labels: Vec<usize>,
}

impl TwoMeans {
    /// Fraction of points assigned to each cluster.
    pub fn fractions(&self) -> [f64; 2] {
        let n = self.labels.len() as f64;
        let ones = self.labels.iter().filter(|&&l| l == 1).count() as f64;
        [(n - ones) / n, ones / n]
    }

    pub fn center_distance(&self) -> f64 {
        sq_dist(&self.centers[0], &self.centers[1]).sqrt()
    }

    /// Mean Euclidean distance of each point to its own center.
    pub fn mean_spread(&self, points: &Tensor) -> f64 {
        points
            .rows()
            .zip(&self.labels)
            .map(|(r, &l)| sq_dist(r, &self.centers[l]).sqrt())
            .sum::<f64>()
            / self.labels.len() as f64
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with two clusters, seeded deterministically by the point
/// farthest from the mean and the point farthest from that one.
pub fn two_means(points: &Tensor, max_iter: usize) -> Result<TwoMeans> {
    let n = points.shape()[0];
    if n < 2 {
        return Err(Error::invalid("two_means", "need at least two points"));
    }
    let d = points.last_dim();
    let mut mean = vec![0.0; d];
    for r in points.rows() {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / n as f64;
        }
    }
    let farthest = |from: &[f64]| {
        points
            .rows()
            .enumerate()
            .max_by(|a, b| sq_dist(a.1, from).total_cmp(&sq_dist(b.1, from)))
            .map(|(i, _)| i)
            .unwrap_or(0)
    };
    let a = farthest(&mean);
    let b = farthest(points.row(a));
    let mut centers = [points.row(a).to_vec(), points.row(b).to_vec()];
    let mut labels = vec![0usize; n];
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        for (i, r) in points.rows().enumerate() {
            let l = usize::from(sq_dist(r, &centers[1]) < sq_dist(r, &centers[0]));
            changed |= l != labels[i];
            labels[i] = l;
        }
        let mut sums = [vec![0.0; d], vec![0.0; d]];
        let mut counts = [0usize; 2];
        for (r, &l) in points.rows().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(r) {
                *s += x;
            }
        }
        for c in 0..2 {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    Ok(TwoMeans { centers, labels })
}
