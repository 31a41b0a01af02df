use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tvseg_core::loss::*;
use tvseg_core::model::PredictionMap;
use tvseg_core::tensor::{finite_diff_grad, relative_error, softmax_channels, Shape4, Tensor4};
use tvseg_core::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn probs_from_logits(s: Shape4, logits: &[f64]) -> PredictionMap {
    PredictionMap::new(softmax_channels(&Tensor4::from_vec(s, logits.to_vec()).unwrap()).unwrap())
}

fn random_case(seed: u64, s: Shape4) -> (Vec<f64>, LabelMask) {
    let mut r = rng(seed);
    let logits = (0..s.len()).map(|_| r.random_range(-2.0..2.0)).collect();
    let labels = (0..s.n * s.h * s.w).map(|_| u8::from(r.random_bool(0.35))).collect();
    (logits, LabelMask::new(s.n, s.h, s.w, labels).unwrap())
}

/// Plain NLL written straight from the definition.
fn ce_oracle(p: &PredictionMap, labels: &LabelMask, weights: &[f64]) -> f64 {
    let s = p.probs.shape();
    let mut total = 0.0;
    for n in 0..s.n {
        for i in 0..s.h * s.w {
            let l = labels.item(n)[i] as usize;
            total -= weights[n * s.h * s.w + i] * p.probs.plane(n, l)[i].ln();
        }
    }
    total / (s.n * s.h * s.w) as f64
}

#[test]
fn ce_examples() {
    let s = Shape4::new(1, 2, 4, 4);
    let labels = LabelMask::new(1, 4, 4, vec![0, 1].repeat(8)).unwrap();
    let w = vec![1.0; 16];
    let uniform = probs_from_logits(s, &vec![0.0; 32]);
    let (v, _) = weighted_ce(&uniform, &labels, &w).unwrap();
    assert!((v - std::f64::consts::LN_2).abs() < 1e-12);

    let confident: Vec<f64> = (0..2)
        .flat_map(|c| (0..16).map(move |i| if (i % 2) as usize == c { 30.0 } else { -30.0 }))
        .collect();
    let (v, _) = weighted_ce(&probs_from_logits(s, &confident), &labels, &w).unwrap();
    assert!(v < 1e-20);

    let bad = LabelMask::new(1, 4, 4, vec![2; 16]).unwrap();
    assert!(matches!(weighted_ce(&uniform, &bad, &w), Err(Error::Label(_))));
}

#[test]
fn ce_matches_oracle_and_finite_differences() {
    let s = Shape4::new(2, 2, 3, 5);
    for seed in 0..20 {
        let (logits, labels) = random_case(seed, s);
        for policy in [WeightPolicy::Uniform, WeightPolicy::ClassBalanced] {
            let w = pixel_weights(policy, &labels, 2);
            let p = probs_from_logits(s, &logits);
            let (v, g) = weighted_ce(&p, &labels, &w).unwrap();
            assert!((v - ce_oracle(&p, &labels, &w)).abs() < 1e-12);
            let fd = finite_diff_grad(|x| weighted_ce(&probs_from_logits(s, x), &labels, &w).unwrap().0, &logits, 1e-5);
            assert!(relative_error(g.data(), &fd) < 1e-6, "seed {seed}");
        }
    }
}

#[test]
fn class_balanced_weights_equalize_class_mass() {
    let labels = LabelMask::new(1, 2, 5, vec![1, 0, 0, 0, 0, 0, 0, 1, 0, 0]).unwrap();
    let w = pixel_weights(WeightPolicy::ClassBalanced, &labels, 2);
    let mass = |c: u8| -> f64 { labels.labels.iter().zip(&w).filter(|(&l, _)| l == c).map(|(_, &v)| v).sum() };
    assert!((mass(0) - mass(1)).abs() < 1e-12);
    assert!((w.iter().sum::<f64>() - 10.0).abs() < 1e-12);
}

#[test]
fn dice_examples() {
    let (h, w) = (64, 64);
    let s = Shape4::new(1, 2, h, w);
    let y: Vec<u8> = (0..h * w).map(|i| u8::from((i / w) > 20 && (i / w) < 40 && (i % w) < 30)).collect();
    assert!(y.iter().filter(|&&v| v == 1).count() >= 100);
    let labels = LabelMask::new(1, h, w, y.clone()).unwrap();
    let mut probs = Tensor4::zeros(s);
    for (i, &v) in y.iter().enumerate() {
        probs.plane_mut(0, 1)[i] = v as f64;
        probs.plane_mut(0, 0)[i] = 1.0 - v as f64;
    }
    let (v, _) = dice_loss(&PredictionMap::new(probs), &labels).unwrap();
    assert!(v.abs() < 1e-2);

    let empty = LabelMask::new(1, 4, 4, vec![0; 16]).unwrap();
    let mut p0 = Tensor4::zeros(Shape4::new(1, 2, 4, 4));
    p0.plane_mut(0, 0).fill(1.0);
    let (v, _) = dice_loss(&PredictionMap::new(p0), &empty).unwrap();
    assert_eq!(v, 0.0);
}

#[test]
fn dice_gradient_matches_finite_differences() {
    let s = Shape4::new(2, 2, 4, 4);
    for seed in 0..20 {
        let (logits, labels) = random_case(100 + seed, s);
        let (_, g) = dice_loss(&probs_from_logits(s, &logits), &labels).unwrap();
        let fd = finite_diff_grad(|x| dice_loss(&probs_from_logits(s, x), &labels).unwrap().0, &logits, 1e-5);
        assert!(relative_error(g.data(), &fd) < 1e-6, "seed {seed}");
    }
}

/// `‖D y‖₁` with D the explicit (N−1)×N forward-difference matrix.
fn tv1d_operator(y: &[f64]) -> f64 {
    let n = y.len();
    let mut total = 0.0;
    for row in 0..n.saturating_sub(1) {
        let mut dot = 0.0;
        for (col, &v) in y.iter().enumerate() {
            let d = if col == row + 1 {
                1.0
            } else if col == row {
                -1.0
            } else {
                0.0
            };
            dot += d * v;
        }
        total += dot.abs();
    }
    total
}

#[test]
fn tv1d_examples() {
    assert_eq!(tv1d(&[0.4; 7]), 0.0);
    assert_eq!(tv1d(&[0.0, 1.0, 0.0, 1.0]), 3.0);
    assert_eq!(tv1d(&[5.0]), 0.0);
}

#[test]
fn tv_matches_operator_and_decomposition_on_random_instances() {
    let mut r = rng(7);
    for _ in 0..1000 {
        let (h, w) = (r.random_range(1..9), r.random_range(1..9));
        let plane: Vec<f64> = (0..h * w).map(|_| r.random_range(-2.0..2.0)).collect();
        let row_tv: f64 = plane.chunks(w).map(tv1d).sum();
        let col_tv: f64 = (0..w).map(|j| tv1d(&(0..h).map(|i| plane[i * w + j]).collect::<Vec<_>>())).sum();
        assert!((tv2d_aniso(&plane, h, w) - (row_tv + col_tv)).abs() < 1e-10);
        let row = &plane[..w];
        assert!((tv1d(row) - tv1d_operator(row)).abs() < 1e-10);
    }
}

#[test]
fn tv2d_examples() {
    assert_eq!(tv2d_aniso(&[0.3; 12], 3, 4), 0.0);
    assert_eq!(tv2d_aniso(&[1.0, 0.0, 0.0, 1.0], 2, 2), 4.0);
    assert!(tv2d_grad(&[0.3; 12], 3, 4, 0.0).iter().all(|&g| g == 0.0));
    assert!(tv2d_grad(&[0.3; 12], 3, 4, 1e-3).iter().all(|&g| g == 0.0));
}

#[test]
fn ramp_subgradient_is_sign_divergence() {
    // y[i][j] = i + j: every difference is +1, so each pixel gets
    // (#left/up neighbours) − (#right/down neighbours).
    let (h, w) = (3, 4);
    let plane: Vec<f64> = (0..h * w).map(|k| ((k / w) + (k % w)) as f64).collect();
    let g = tv2d_grad(&plane, h, w, 0.0);
    let expected: Vec<f64> = (0..h * w)
        .map(|k| {
            let (i, j) = (k / w, k % w);
            let before = (i > 0) as i32 + (j > 0) as i32;
            let after = (i + 1 < h) as i32 + (j + 1 < w) as i32;
            (before - after) as f64
        })
        .collect();
    assert_eq!(g, expected);
    assert_eq!(g, vec![-2.0, -1.0, -1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 2.0]);
}

#[test]
fn smoothed_tv_gradient_matches_finite_differences() {
    let mut r = rng(11);
    for seed in 0..20 {
        let (h, w) = (4 + seed % 3, 5);
        let plane: Vec<f64> = (0..h * w).map(|_| r.random_range(0.0..1.0)).collect();
        for eps in [1e-2, 1e-1] {
            let g = tv2d_grad(&plane, h, w, eps);
            let fd = finite_diff_grad(|p| tv2d_smoothed(p, h, w, eps), &plane, 1e-5);
            assert!(relative_error(&g, &fd) < 1e-6, "seed {seed} eps {eps}");
        }
    }
}

#[test]
fn gradient_step_on_tv_decreases_it() {
    let mut r = rng(12);
    let (h, w, eps) = (6, 6, 1e-3);
    let plane: Vec<f64> = (0..h * w).map(|_| r.random_range(0.0..1.0)).collect();
    let g = tv2d_grad(&plane, h, w, eps);
    let stepped: Vec<f64> = plane.iter().zip(&g).map(|(p, d)| p - 1e-4 * d).collect();
    assert!(tv2d_smoothed(&stepped, h, w, eps) < tv2d_smoothed(&plane, h, w, eps));
    assert!(tv2d_aniso(&stepped, h, w) < tv2d_aniso(&plane, h, w));
}

#[test]
fn total_loss_single_terms_and_lambda_zero() {
    let s = Shape4::new(2, 2, 4, 4);
    let (logits, labels) = random_case(5, s);
    let p = probs_from_logits(s, &logits);
    let w = pixel_weights(WeightPolicy::Uniform, &labels, 2);
    let (ce, ce_grad) = weighted_ce(&p, &labels, &w).unwrap();

    let bce = total_loss(&LossConfig::default(), &p, &labels, &w).unwrap();
    assert_eq!(bce.value, ce);
    assert_eq!(bce.grad, ce_grad);

    let tv0 = LossConfig {
        kind: LossKind::BceTv,
        lambda: 0.0,
        ..Default::default()
    };
    let out = total_loss(&tv0, &p, &labels, &w).unwrap();
    assert_eq!(out.value, ce);
    assert_eq!(out.grad, ce_grad);
    assert!(out.components.tv_raw > 0.0);
}

#[test]
fn total_loss_checkerboard_example() {
    let s = Shape4::new(1, 2, 2, 2);
    let fg = [1.0, 0.0, 0.0, 1.0];
    let logits: Vec<f64> = fg
        .iter()
        .map(|&f| if f > 0.5 { -40.0 } else { 40.0 })
        .chain(fg.iter().map(|&f| if f > 0.5 { 40.0 } else { -40.0 }))
        .collect();
    let p = probs_from_logits(s, &logits);
    let labels = LabelMask::new(1, 2, 2, vec![1, 0, 0, 1]).unwrap();
    let w = vec![1.0; 4];
    let cfg = LossConfig {
        kind: LossKind::BceTv,
        lambda: 0.1,
        tv_smoothing_eps: 0.0,
        ..Default::default()
    };
    let out = total_loss(&cfg, &p, &labels, &w).unwrap();
    let ce = weighted_ce(&p, &labels, &w).unwrap().0;
    assert!((out.value - (ce + 0.1 * 4.0)).abs() < 1e-12);
    assert!((out.components.tv_raw - 4.0).abs() < 1e-12);
}

#[test]
fn total_loss_gradients_match_finite_differences() {
    let s = Shape4::new(2, 2, 4, 4);
    for kind in [LossKind::Bce, LossKind::BceDice, LossKind::BceTv, LossKind::BceDiceTv] {
        for seed in 0..20 {
            let (logits, labels) = random_case(300 + seed, s);
            let w = pixel_weights(WeightPolicy::ClassBalanced, &labels, 2);
            let cfg = LossConfig {
                kind,
                lambda: 0.05,
                tv_smoothing_eps: 1e-2,
                tv_per_pixel: seed % 2 == 1,
                ..Default::default()
            };
            let out = total_loss(&cfg, &probs_from_logits(s, &logits), &labels, &w).unwrap();
            let fd = finite_diff_grad(
                |x| total_loss(&cfg, &probs_from_logits(s, x), &labels, &w).unwrap().value,
                &logits,
                1e-5,
            );
            assert!(relative_error(out.grad.data(), &fd) < 1e-6, "{kind:?} seed {seed}");
        }
    }
}

#[test]
fn loss_config_validation() {
    let neg = LossConfig {
        lambda: -1.0,
        ..Default::default()
    };
    assert!(matches!(neg.validate(), Err(Error::Config(_))));
    let json = r#"{"kind":"BCE+DSC+TV","lambda":0.001}"#;
    let cfg: LossConfig = serde_json::from_str(json).unwrap();
    assert_eq!(cfg.kind, LossKind::BceDiceTv);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tv_is_absolutely_homogeneous(seed in any::<u64>(), alpha in -5.0f64..5.0) {
        let mut r = rng(seed);
        let (h, w) = (r.random_range(1..7), r.random_range(1..7));
        let plane: Vec<f64> = (0..h * w).map(|_| r.random_range(-1.0..1.0)).collect();
        let scaled: Vec<f64> = plane.iter().map(|v| alpha * v).collect();
        prop_assert!((tv2d_aniso(&scaled, h, w) - alpha.abs() * tv2d_aniso(&plane, h, w)).abs() < 1e-10);
    }

    #[test]
    fn tv_zero_iff_constant(c in -3.0f64..3.0, pos in 0usize..20, bump in prop_oneof![-1.0f64..-1e-6, 1e-6f64..1.0]) {
        let (h, w) = (4, 5);
        let mut plane = vec![c; h * w];
        prop_assert_eq!(tv2d_aniso(&plane, h, w), 0.0);
        plane[pos] += bump;
        prop_assert!(tv2d_aniso(&plane, h, w) > 0.0);
    }

    #[test]
    fn total_is_sum_of_components(seed in any::<u64>(), lambda in 0.0f64..1.0) {
        let s = Shape4::new(2, 2, 3, 3);
        let (logits, labels) = random_case(seed, s);
        let w = pixel_weights(WeightPolicy::Uniform, &labels, 2);
        let cfg = LossConfig { kind: LossKind::BceDiceTv, lambda, ..Default::default() };
        let out = total_loss(&cfg, &probs_from_logits(s, &logits), &labels, &w).unwrap();
        let c = out.components;
        prop_assert_eq!(out.value, c.ce + c.dice + c.tv_term);
    }
}
