use flowstate::baselines::{sigma_points, ukf_step, GaussianBelief, UkfParams};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn kalman_step(
    b: &GaussianBelief,
    a: &DMatrix<f64>,
    h: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    y: &DVector<f64>,
) -> GaussianBelief {
    let m = a * &b.mean;
    let p = a * &b.cov * a.transpose() + q;
    let s = h * &p * h.transpose() + r;
    let k = &p * h.transpose() * s.try_inverse().unwrap();
    let mean = &m + &k * (y - h * &m);
    let cov = (DMatrix::identity(m.len(), m.len()) - &k * h) * &p;
    GaussianBelief { mean, cov }
}

#[test]
fn matches_kalman_filter_on_linear_system() {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, -0.05, 0.98]);
    let h = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    let q = DMatrix::from_row_slice(2, 2, &[0.01, 0.002, 0.002, 0.02]);
    let r = DMatrix::from_row_slice(1, 1, &[0.25]);
    let params = UkfParams::new(q.clone(), r.clone());
    let init = GaussianBelief::new(DVector::from_vec(vec![1.0, 0.0]), DMatrix::identity(2, 2)).unwrap();
    let mut ukf = init.clone();
    let mut kf = init;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut truth = DVector::from_vec(vec![0.5, 0.3]);
    for step in 0..50 {
        truth = &a * truth + DVector::from_fn(2, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal));
        let y = &h * &truth + DVector::from_element(1, 0.5 * rng.sample::<f64, _>(StandardNormal));
        ukf = ukf_step(&ukf, &params, |x| &a * x, |x| &h * x, &y).unwrap();
        kf = kalman_step(&kf, &a, &h, &q, &r, &y);
        let dm = (&ukf.mean - &kf.mean).amax();
        let dc = (&ukf.cov - &kf.cov).amax();
        assert!(dm <= 1e-8 && dc <= 1e-8, "step {step}: mean diff {dm}, cov diff {dc}");
    }
}

proptest! {
    #[test]
    fn linear_unscented_transform_preserves_moments(
        m in prop::collection::vec(-5.0f64..5.0, 3),
        l in prop::collection::vec(-1.0f64..1.0, 6),
        t in prop::collection::vec(-2.0f64..2.0, 9),
        alpha in 0.05f64..1.0,
    ) {
        let lo = DMatrix::from_row_slice(3, 3, &[1.0 + l[0].abs(), 0.0, 0.0, l[1], 1.0 + l[2].abs(), 0.0, l[3], l[4], 0.5 + l[5].abs()]);
        let cov = &lo * lo.transpose();
        let b = GaussianBelief::new(DVector::from_vec(m), cov).unwrap();
        let mut p = UkfParams::new(DMatrix::zeros(3, 3), DMatrix::identity(1, 1));
        p.alpha = alpha;
        let sp = sigma_points(&b, &p).unwrap();
        let tm = DMatrix::from_row_slice(3, 3, &t);
        let mapped: Vec<DVector<f64>> = sp.points.iter().map(|x| &tm * x).collect();
        let mut mean = DVector::zeros(3);
        for (x, w) in mapped.iter().zip(&sp.mean_weights) {
            mean += x * *w;
        }
        let mut c = DMatrix::zeros(3, 3);
        for (x, w) in mapped.iter().zip(&sp.cov_weights) {
            c += (x - &mean) * (x - &mean).transpose() * *w;
        }
        let scale = 1.0 + (&tm * &b.cov * tm.transpose()).amax();
        prop_assert!((mean - &tm * &b.mean).amax() <= 1e-10 * scale);
        prop_assert!((c - &tm * &b.cov * tm.transpose()).amax() <= 1e-10 * scale);
    }
}
