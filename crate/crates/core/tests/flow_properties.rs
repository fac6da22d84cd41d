use flowstate::autodiff::{ParamStore, Tape, Tensor};
use flowstate::conditioners::{ConditionerSpec, Context, ContextBatch};
use flowstate::density::ConditionalDensity;
use flowstate::flow::{FlowConfig, FlowLayer, FlowModel, LayerKind, MaskedAffineLayer};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_layout(rng: &mut ChaCha8Rng, layers: usize) -> Vec<LayerKind> {
    (0..layers)
        .map(|_| match rng.gen_range(0..3) {
            0 => LayerKind::Permutation,
            1 => LayerKind::Linear,
            _ => LayerKind::Affine,
        })
        .collect()
}

fn random_model(dim: usize, layers: usize, seed: u64) -> FlowModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let layout = random_layout(&mut rng, layers);
    FlowModel::with_layout(dim, ConditionerSpec::identity(1), &layout, 8, &[8, 8], seed).unwrap()
}

fn normal_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let data = (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(vec![n, d], data).unwrap()
}

fn jacobian(model: &FlowModel, z: &[f64], emb: &[f64], h: f64) -> DMatrix<f64> {
    let d = z.len();
    let mut j = DMatrix::zeros(d, d);
    for k in 0..d {
        let mut up = z.to_vec();
        let mut down = z.to_vec();
        up[k] += h;
        down[k] -= h;
        let (xu, _) = model.forward_transform(&up, emb).unwrap();
        let (xd, _) = model.forward_transform(&down, emb).unwrap();
        for i in 0..d {
            j[(i, k)] = (xu[i] - xd[i]) / (2.0 * h);
        }
    }
    j
}

#[test]
fn roundtrip_random_models() {
    let mut worst: f64 = 0.0;
    for d in 2..=4 {
        for layers in 1..=8 {
            let seed = (d * 100 + layers) as u64;
            let model = random_model(d, layers, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = normal_rows(&mut rng, 1000, d);
            let emb = Tensor::new(vec![1000, 1], (0..1000).map(|i| i as f64 * 0.013).collect()).unwrap();
            let (x, fwd) = model.transform_batch(&z, &emb, false).unwrap();
            let (back, inv) = model.transform_batch(&x, &emb, true).unwrap();
            for (a, b) in z.data().iter().zip(back.data()) {
                worst = worst.max((a - b).abs());
            }
            for (f, i) in fwd.iter().zip(&inv) {
                assert!((f + i).abs() < 1e-8, "forward and inverse logdet disagree: {f} vs {i}");
            }
        }
    }
    assert!(worst <= 1e-8, "max roundtrip error {worst}");
}

#[test]
fn logdet_matches_finite_difference_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..100u64 {
        let d = 2 + (trial % 3) as usize;
        let layers = 1 + (trial % 8) as usize;
        let model = random_model(d, layers, 1000 + trial);
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let emb = [rng.gen_range(0.0..20.0)];
        let (_, logdet) = model.forward_transform(&z, &emb).unwrap();
        let numeric = jacobian(&model, &z, &emb, 1e-6).determinant().abs().ln();
        let rel = (logdet - numeric).abs() / numeric.abs().max(1.0);
        assert!(rel < 1e-4, "trial {trial}: analytic {logdet}, numeric {numeric}");
    }
}

#[test]
fn density_integrates_to_one() {
    for seed in [3u64, 4, 5] {
        let model = FlowModel::new(&FlowConfig {
            blocks: 2,
            affine_hidden: 8,
            base_hidden: vec![8, 8],
            ..FlowConfig::new(2, ConditionerSpec::identity(1), seed)
        })
        .unwrap();
        let ctx = Context::time(1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = model.sample(20_000, &ctx, &mut rng).unwrap();
        // box from the sample range, widened generously on each side
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for r in s.rows() {
            for k in 0..2 {
                lo[k] = lo[k].min(r[k]);
                hi[k] = hi[k].max(r[k]);
            }
        }
        let res = 300;
        let mut pts = Vec::with_capacity(res * res * 2);
        let mut cell = 1.0;
        let mut axes = [Vec::new(), Vec::new()];
        for k in 0..2 {
            let w = hi[k] - lo[k];
            let (a, b) = (lo[k] - w, hi[k] + w);
            let step = (b - a) / res as f64;
            cell *= step;
            axes[k] = (0..res).map(|i| a + (i as f64 + 0.5) * step).collect();
        }
        for &x in &axes[0] {
            for &y in &axes[1] {
                pts.push(x);
                pts.push(y);
            }
        }
        let x = Tensor::new(vec![res * res, 2], pts).unwrap();
        let c = ContextBatch::Vectors(Tensor::full(&[res * res, 1], 1.5));
        let total: f64 = model.log_prob_batch(&x, &c).unwrap().iter().map(|l| l.exp()).sum::<f64>() * cell;
        assert!((total - 1.0).abs() <= 0.02, "seed {seed}: integral {total}");
    }
}

#[test]
fn affine_outputs_ignore_later_dimensions() {
    for d in 2..=5 {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(d as u64);
        let layer = MaskedAffineLayer::new(&mut store, "ar", d, 2, 16, &mut rng);
        let base: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let emb = [0.3, -0.7];
        let eval = |z: &[f64]| {
            let mut tape = Tape::new();
            let p = store.bind_frozen(&mut tape);
            let zv = tape.constant(Tensor::new(vec![1, d], z.to_vec()).unwrap());
            let ev = tape.constant(Tensor::new(vec![1, 2], emb.to_vec()).unwrap());
            let (mu, alpha) = layer.conditioner(&mut tape, &p, zv, ev).unwrap();
            (tape.value(mu).data().to_vec(), tape.value(alpha).data().to_vec())
        };
        let (mu0, a0) = eval(&base);
        for j in 0..d {
            let mut z = base.clone();
            z[j] += 1.7;
            let (mu, a) = eval(&z);
            for i in 0..d {
                if j >= i {
                    assert_eq!(mu[i], mu0[i], "d={d}: mu_{i} moved with z_{j}");
                    assert_eq!(a[i], a0[i], "d={d}: alpha_{i} moved with z_{j}");
                }
            }
            // generic weights: the output after j does react
            if j + 1 < d {
                assert!(mu[d - 1] != mu0[d - 1] || a[d - 1] != a0[d - 1]);
            }
        }
    }
}

#[test]
fn permutation_keeps_symmetric_density() {
    let mut plain = FlowModel::with_layout(2, ConditionerSpec::identity(1), &[LayerKind::Affine], 8, &[8], 2).unwrap();
    plain.zero_affine_and_base();
    let mut permuted = FlowModel::with_layout(
        2,
        ConditionerSpec::identity(1),
        &[LayerKind::Affine, LayerKind::Permutation],
        8,
        &[8],
        2,
    )
    .unwrap();
    permuted.zero_affine_and_base();
    let ctx = Context::time(0.0);
    let a = plain.log_prob(&[0.4, -1.1], &ctx).unwrap();
    let b = permuted.log_prob(&[-1.1, 0.4], &ctx).unwrap();
    assert!((a - b).abs() < 1e-14);
}

#[test]
fn standard_normal_sample_mean() {
    let mut m = FlowModel::with_layout(2, ConditionerSpec::identity(1), &[LayerKind::Affine], 8, &[8], 2).unwrap();
    m.zero_affine_and_base();
    let s = m.sample(100_000, &Context::time(2.0), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    for k in 0..2 {
        let mean = s.rows().map(|r| r[k]).sum::<f64>() / 100_000.0;
        assert!(mean.abs() < 0.02, "axis {k}: mean {mean}");
    }
}

#[test]
fn duplicated_batch_same_loss() {
    let model = random_model(2, 6, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = normal_rows(&mut rng, 7, 2);
    let ctx: Vec<Context> = (0..7).map(|i| Context::time(i as f64)).collect();
    let c = ContextBatch::from_contexts(&ctx).unwrap();
    let mut doubled = x.data().to_vec();
    doubled.extend_from_slice(x.data());
    let x2 = Tensor::new(vec![14, 2], doubled).unwrap();
    let ctx2: Vec<Context> = ctx.iter().chain(&ctx).cloned().collect();
    let c2 = ContextBatch::from_contexts(&ctx2).unwrap();
    let a = model.nll_loss(&x, &c).unwrap();
    let b = model.nll_loss(&x2, &c2).unwrap();
    assert!((a - b).abs() < 1e-13);
}

#[test]
fn empty_batch_rejected() {
    assert!(Tensor::from_rows(&[]).is_err());
    assert!(ContextBatch::from_contexts(&[]).is_err());
    assert!(Tensor::new(vec![0, 2], vec![]).is_err());
}

#[test]
fn linear_layer_logdet_is_sum_of_log_diag() {
    let model = random_model(3, 1, 77);
    let model = if matches!(model.layers()[0], FlowLayer::Linear(_)) {
        model
    } else {
        FlowModel::with_layout(3, ConditionerSpec::identity(1), &[LayerKind::Linear], 8, &[8], 77).unwrap()
    };
    let FlowLayer::Linear(l) = &model.layers()[0] else { unreachable!() };
    let s: f64 = model.params().get(l.log_diag).data().iter().sum();
    let (_, ld) = model.forward_transform(&[0.1, 0.2, 0.3], &[0.0]).unwrap();
    assert_eq!(ld, s);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn roundtrip_property(seed in 0u64..10_000, d in 2usize..=4, layers in 1usize..=8,
                          z in prop::collection::vec(-3.0f64..3.0, 4), t in 0.0f64..20.0) {
        let model = random_model(d, layers, seed);
        let (x, fwd) = model.forward_transform(&z[..d], &[t]).unwrap();
        let (back, inv) = model.inverse_transform(&x, &[t]).unwrap();
        for (a, b) in z[..d].iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-8);
        }
        prop_assert!((fwd + inv).abs() <= 1e-8);
    }

    #[test]
    fn permutation_contributes_zero_logdet(d in 2usize..=6, seed in 0u64..1000,
                                            z in prop::collection::vec(-5.0f64..5.0, 6)) {
        let model = FlowModel::with_layout(d, ConditionerSpec::identity(1), &[LayerKind::Permutation], 4, &[4], seed).unwrap();
        let (x, ld) = model.forward_transform(&z[..d], &[0.0]).unwrap();
        prop_assert_eq!(ld, 0.0);
        let mut a = x.clone();
        let mut b = z[..d].to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn affine_is_monotone_in_own_dimension(seed in 0u64..1000, z0 in -3.0f64..3.0, dz in 0.01f64..2.0) {
        let model = FlowModel::with_layout(2, ConditionerSpec::identity(1), &[LayerKind::Affine], 8, &[8], seed).unwrap();
        let (a, _) = model.forward_transform(&[z0, 0.5], &[1.0]).unwrap();
        let (b, _) = model.forward_transform(&[z0 + dz, 0.5], &[1.0]).unwrap();
        prop_assert!(b[0] > a[0]);
    }
}
