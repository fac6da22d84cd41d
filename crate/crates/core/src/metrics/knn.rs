use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::par::{self, Execution};

/// Magnitude of the perturbation applied to duplicated model samples.
pub const DUPLICATE_JITTER: f64 = 1e-12;

/// Two-sample k-NN estimate of `KL(model || target)` in nats.
#[derive(Clone, Debug, PartialEq)]
pub struct KlEstimate {
    pub value: f64,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub d: usize,
}

impl fmt::Display for KlEstimate {
    /// `key=value` lines.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "kl={}", self.value)?;
        writeln!(f, "n={}", self.n)?;
        writeln!(f, "m={}", self.m)?;
        writeln!(f, "k={}", self.k)?;
        write!(f, "d={}", self.d)
    }
}

/// Squared distance from `p` to its `k`-th nearest row of `set`, skipping row `skip`.
fn kth_sq_distance(p: &[f64], set: &Tensor, k: usize, skip: Option<usize>) -> f64 {
    // ascending buffer of the k smallest squared distances
    let mut best = vec![f64::INFINITY; k];
    for (j, q) in set.rows().enumerate() {
        if Some(j) == skip {
            continue;
        }
        let d2: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
        if d2 < best[k - 1] {
            let mut i = k - 1;
            while i > 0 && best[i - 1] > d2 {
                best[i] = best[i - 1];
                i -= 1;
            }
            best[i] = d2;
        }
    }
    best[k - 1]
}

fn check_samples(name: &'static str, t: &Tensor, k: usize) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::invalid("knn_kl", format!("{name} must be a matrix, got shape {:?}", t.shape())));
    }
    let (n, d) = (t.shape()[0], t.shape()[1]);
    if n < k + 1 {
        return Err(Error::invalid(
            "knn_kl",
            format!("{name} has {n} points, need at least k + 1 = {}", k + 1),
        ));
    }
    Ok((n, d))
}

/// Copy of `samples` where every row that exactly repeats an earlier row is
/// moved by a seeded perturbation of size [`DUPLICATE_JITTER`].
fn jitter_duplicates(samples: &Tensor) -> Tensor {
    let mut rows: Vec<(Vec<u64>, usize)> = samples
        .rows()
        .enumerate()
        .map(|(i, r)| (r.iter().map(|x| x.to_bits()).collect(), i))
        .collect();
    rows.sort();
    let mut out = samples.clone();
    let d = samples.last_dim();
    for w in 1..rows.len() {
        if rows[w].0 == rows[w - 1].0 {
            let i = rows[w].1;
            let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
            for x in &mut out.data_mut()[i * d..(i + 1) * d] {
                *x += DUPLICATE_JITTER * rng.gen_range(-1.0..1.0);
            }
        }
    }
    out
}

/// `(d/n) sum_i log(s_k(z_i) / r_k(z_i)) + log(m / (n - 1))`.
///
/// `r_k` is the distance from model sample `z_i` to its k-th nearest other
/// model sample, `s_k` the distance to its k-th nearest target sample. The
/// cross-set distance sits in the numerator, which makes the estimate
/// converge to `KL(model || target) >= 0`. Search is exact and brute force.
pub fn knn_kl_estimate(model: &Tensor, target: &Tensor, k: usize, exec: Execution) -> Result<KlEstimate> {
    if k == 0 {
        return Err(Error::invalid("knn_kl", "k must be at least 1"));
    }
    let (n, d) = check_samples("model samples", model, k)?;
    let (m, dt) = check_samples("target samples", target, k)?;
    if d != dt {
        return Err(Error::Shape {
            op: "knn_kl",
            lhs: model.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let model = jitter_duplicates(model);
    let terms = par::map_indexed(n, exec, |i| -> Result<f64> {
        let p = model.row(i);
        let r2 = kth_sq_distance(p, &model, k, Some(i));
        let s2 = kth_sq_distance(p, target, k, None);
        if r2 == 0.0 || s2 == 0.0 {
            return Err(Error::ZeroDistance { index: i });
        }
        Ok(0.5 * (s2.ln() - r2.ln()))
    });
    let mut sum = 0.0;
    for t in terms {
        sum += t?;
    }
    Ok(KlEstimate {
        value: d as f64 / n as f64 * sum + (m as f64 / (n as f64 - 1.0)).ln(),
        n,
        m,
        k,
        d,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_too_few_points() {
        let one = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let many = Tensor::new(vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert!(knn_kl_estimate(&one, &many, 1, Execution::Sequential).is_err());
        assert!(knn_kl_estimate(&many, &one, 1, Execution::Sequential).is_err());
        assert!(knn_kl_estimate(&many, &many, 0, Execution::Sequential).is_err());
    }

    #[test]
    fn hand_computed_estimate() {
        // model {0, 1, 3}, target {0.5, 2}: r = (1, 1, 2), s = (0.5, 0.5, 1)
        let model = Tensor::new(vec![3, 1], vec![0.0, 1.0, 3.0]).unwrap();
        let target = Tensor::new(vec![2, 1], vec![0.5, 2.0]).unwrap();
        let e = knn_kl_estimate(&model, &target, 1, Execution::Sequential).unwrap();
        let expected = -(3.0 * 2f64.ln()) / 3.0 + (2.0f64 / 2.0).ln();
        assert!((e.value - expected).abs() < 1e-15);
        // k = 2: r = (3, 2, 3), s = (2, 1, 2)
        let target = Tensor::new(vec![3, 1], vec![0.5, 2.0, 5.0]).unwrap();
        let e = knn_kl_estimate(&model, &target, 2, Execution::Sequential).unwrap();
        let expected = -(2.0 * 1.5f64.ln() + 2f64.ln()) / 3.0 + (3.0f64 / 2.0).ln();
        assert!((e.value - expected).abs() < 1e-14);
    }

    #[test]
    fn duplicates_are_jittered() {
        let model = Tensor::new(vec![3, 1], vec![1.0, 1.0, 4.0]).unwrap();
        let target = Tensor::new(vec![2, 1], vec![0.0, 2.0]).unwrap();
        let e = knn_kl_estimate(&model, &target, 1, Execution::Sequential).unwrap();
        assert!(e.value.is_finite());
    }

    #[test]
    fn coincident_target_is_an_error() {
        let model = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let target = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let err = knn_kl_estimate(&model, &target, 1, Execution::Sequential).unwrap_err();
        assert!(matches!(err, Error::ZeroDistance { index: 0 }));
    }

    #[test]
    fn report_lines() {
        let e = KlEstimate {
            value: 0.25,
            n: 10,
            m: 20,
            k: 1,
            d: 2,
        };
        assert_eq!(e.to_string(), "kl=0.25\nn=10\nm=20\nk=1\nd=2");
    }
}
