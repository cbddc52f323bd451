mod common;

use oscxr::autodiff::{Tape, Tensor};
use oscxr::gradcam::{gradcam, CamConfig};
use oscxr::metrics::{brier, confusion_matrix, ece, oe, prf1};
use oscxr::nn::{LayerParams, ModelParams, ModelSpec, Profile};
use oscxr::os_loss::{os_penalty, partition, total_loss, weighted_cross_entropy};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn columns(d: usize, k: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-2.0f64..2.0, d), k)
}

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (1usize..=12, 1usize..=5)
}

fn ce(logits: &[f64], n: usize, k: usize, labels: &[usize], w: &[f64]) -> f64 {
    let mut t = Tape::<f64>::new();
    let l = t.constant(Tensor::from_f64(&[n, k], logits).unwrap());
    let v = weighted_cross_entropy(&mut t, l, labels, w).unwrap();
    t.value(v).item()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn penalty_is_nonnegative_and_matches_direct_form(
        cols in dims().prop_flat_map(|(d, k)| columns(d, k))
    ) {
        let p = common::penalty(&common::flatten_columns(&cols), cols.len());
        prop_assert!(p >= 0.0);
        let direct = common::penalty_of_columns(&cols);
        prop_assert!((p - direct).abs() <= 1e-9 * direct.max(1.0));
    }

    #[test]
    fn penalty_is_invariant_under_householder_reflections(
        (cols, v) in dims().prop_flat_map(|(d, k)| (columns(d, k), prop::collection::vec(-1.0f64..1.0, d)))
    ) {
        let norm2: f64 = v.iter().map(|x| x * x).sum();
        prop_assume!(norm2 > 1e-3);
        let d = v.len();
        let mut q = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                q[i * d + j] = f64::from(u8::from(i == j)) - 2.0 * v[i] * v[j] / norm2;
            }
        }
        let k = cols.len();
        let a = common::penalty(&common::flatten_columns(&cols), k);
        let b = common::penalty(&common::flatten_columns(&common::left_multiply(&q, &cols)), k);
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0), "{a} vs {b}");
    }

    #[test]
    fn total_loss_is_affine_in_lambda(ce_v in 0.0f64..10.0, os_v in 0.0f64..100.0, lambda in 0.0f64..=1.0) {
        let at = |l: f64| {
            let mut t = Tape::<f64>::new();
            let c = t.constant(Tensor::scalar(ce_v));
            let o = t.constant(Tensor::scalar(os_v));
            let v = total_loss(&mut t, c, o, l).unwrap();
            t.value(v).item()
        };
        let (l0, l1) = (at(0.0), at(1.0));
        prop_assert_eq!(l0, os_v);
        prop_assert_eq!(l1, ce_v);
        let expect = l0 + lambda * (l1 - l0);
        prop_assert!((at(lambda) - expect).abs() <= 1e-10 * expect.max(1.0));
    }

    #[test]
    fn doubling_class_weights_doubles_cross_entropy(
        (logits, labels, w, k) in (1usize..6, 2usize..5).prop_flat_map(|(n, k)| (
            prop::collection::vec(-5.0f64..5.0, n * k),
            prop::collection::vec(0..k, n),
            prop::collection::vec(0.1f64..5.0, k),
            Just(k),
        ))
    ) {
        let n = labels.len();
        let w2: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
        let base = ce(&logits, n, k, &labels, &w);
        prop_assert_eq!(ce(&logits, n, k, &labels, &w2), 2.0 * base);
        prop_assert!(base >= 0.0);
    }

    #[test]
    fn calibration_matches_brute_force(
        (probs, labels, bins) in (1usize..120, 2usize..5, 1usize..20, any::<u64>()).prop_map(|(n, k, bins, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let probs = common::random_probs(&mut rng, n, k, 2.0);
            let labels = (0..n).map(|i| (i * 7 + seed as usize) % k).collect::<Vec<_>>();
            (probs, labels, bins)
        })
    ) {
        let (_, conf, ok) = oscxr::metrics::confidence_and_correctness(&probs, &labels);
        let (be, bo) = common::brute_calibration(&conf, &ok, bins);
        prop_assert!((ece(&conf, &ok, bins).unwrap() - be).abs() <= 1e-12);
        prop_assert!((oe(&conf, &ok, bins).unwrap() - bo).abs() <= 1e-12);
        prop_assert!((brier(&probs, &labels).unwrap() - common::brute_brier(&probs, &labels)).abs() <= 1e-12);
    }

    #[test]
    fn prf1_ignores_sample_order_and_class_names(
        (pairs, seed) in (prop::collection::vec((0usize..3, 0usize..3), 1..80), any::<u64>())
    ) {
        let (preds, labels): (Vec<usize>, Vec<usize>) = pairs.iter().cloned().unzip();
        let base = prf1(&confusion_matrix(&preds, &labels, 3).unwrap()).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut rng);
        let (p2, l2): (Vec<usize>, Vec<usize>) = shuffled.into_iter().unzip();
        prop_assert_eq!(prf1(&confusion_matrix(&p2, &l2, 3).unwrap()).unwrap(), base.clone());

        let mut relabel = vec![0usize, 1, 2];
        relabel.shuffle(&mut rng);
        let p3: Vec<usize> = preds.iter().map(|&c| relabel[c]).collect();
        let l3: Vec<usize> = labels.iter().map(|&c| relabel[c]).collect();
        let r = prf1(&confusion_matrix(&p3, &l3, 3).unwrap()).unwrap();
        prop_assert!((r.precision - base.precision).abs() <= 1e-12);
        prop_assert!((r.recall - base.recall).abs() <= 1e-12);
        prop_assert!((r.f1 - base.f1).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn gradcam_ignores_positive_scaling_of_the_class_column(alpha in 0.1f64..10.0, class in 0usize..3, seed in 0u64..1000) {
        let spec = ModelSpec::darkcovidnet(3, None, Profile::DESK).unwrap();
        let params = ModelParams::<f32>::init(&spec, seed).unwrap();
        let side = spec.image_side;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img: Tensor<f32> = Tensor::from_f64(
            &[3, side, side],
            &(0..3 * side * side).map(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0)).collect::<Vec<_>>(),
        ).unwrap();
        let mut scaled = params.clone();
        for layer in scaled.layers.iter_mut() {
            if let LayerParams::Linear { weight, .. } = layer {
                let units = weight.shape()[1];
                let data: Vec<f32> = weight
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| if i % units == class { w * alpha as f32 } else { w })
                    .collect();
                *weight = Tensor::new(weight.shape().to_vec(), data).unwrap();
            }
        }
        let cfg = CamConfig::default();
        let a = gradcam(&spec, &params, &img, class, &cfg).unwrap();
        let b = gradcam(&spec, &scaled, &img, class, &cfg).unwrap();
        let gap = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(gap <= 1e-4, "max gap {gap}");
    }
}

#[test]
fn penalty_on_random_orthonormal_bases_vanishes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for d in 1..=10 {
        for k in 1..=d.min(4) {
            let q = common::gram_schmidt(&common::gaussian_columns(&mut rng, d, k));
            assert!(common::penalty(&common::flatten_columns(&q), k) < 1e-10);
        }
    }
}

#[test]
fn batched_penalty_is_the_mean_of_per_sample_penalties() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (n, d, k) = (4, 5, 3);
    let samples: Vec<Vec<f64>> = (0..n)
        .map(|_| common::flatten_columns(&common::gaussian_columns(&mut rng, d, k)))
        .collect();
    let mean: f64 = samples.iter().map(|s| common::penalty(s, k)).sum::<f64>() / n as f64;
    let flat: Vec<f64> = samples.concat();
    let mut t = Tape::<f64>::new();
    let f = t.constant(Tensor::from_f64(&[n, d * k], &flat).unwrap());
    let fm = partition(&mut t, f, k).unwrap();
    let p = os_penalty(&mut t, &fm).unwrap();
    assert!((t.value(p).item() - mean).abs() < 1e-10);
}
