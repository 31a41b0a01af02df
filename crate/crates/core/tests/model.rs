use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tvseg_core::loss::{pixel_weights, total_loss, LabelMask, LossConfig, LossKind, WeightPolicy};
use tvseg_core::model::*;
use tvseg_core::tensor::{finite_diff_grad, relative_error, softmax_channels, Shape4, Tensor4};
use tvseg_core::Error;

fn tiny(h: usize, w: usize) -> UNetConfig {
    UNetConfig {
        in_channels: 1,
        num_classes: 2,
        depth: 2,
        base_channels: 4,
        input_size: [h, w],
    }
}

fn input(seed: u64, n: usize, h: usize, w: usize) -> Tensor4 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_fn(Shape4::new(n, 1, h, w), |_, _, _, _| r.random_range(0.0..1.0))
}

#[test]
fn parameter_count_matches_layer_shapes() {
    // (out, in, k) for every layer of the depth-2, base-4 network.
    let shapes = [
        (4, 1, 3),
        (4, 4, 3),
        (8, 4, 3),
        (8, 8, 3),
        (4, 8, 2),
        (4, 8, 3),
        (4, 4, 3),
        (2, 4, 1),
    ];
    let expected: usize = shapes.iter().map(|&(o, i, k)| o * i * k * k + o).sum();
    assert_eq!(expected, 1650);
    let cfg = tiny(8, 8);
    assert_eq!(cfg.param_count(), expected);
    assert_eq!(build(&cfg, 0).unwrap().param_count(), expected);
}

#[test]
fn layer_names_in_declared_order() {
    let names: Vec<String> = build(&tiny(8, 8), 0).unwrap().layers.into_iter().map(|l| l.name).collect();
    assert_eq!(
        names,
        ["enc0.conv_a", "enc0.conv_b", "enc1.conv_a", "enc1.conv_b", "dec0.up", "dec0.conv_a", "dec0.conv_b", "head"]
    );
}

#[test]
fn build_is_deterministic_with_zero_biases() {
    let cfg = UNetConfig::default();
    let a = build(&cfg, 17).unwrap();
    assert_eq!(a, build(&cfg, 17).unwrap());
    assert_ne!(a, build(&cfg, 18).unwrap());
    assert!(a.layers.iter().all(|l| l.kernel.bias.iter().all(|&b| b == 0.0)));
}

#[test]
fn he_init_spread() {
    let cfg = UNetConfig {
        base_channels: 16,
        ..UNetConfig::default()
    };
    let p = build(&cfg, 3).unwrap();
    let l = p.layer("enc1.conv_b").unwrap();
    let fan_in = (l.kernel.in_channels * 9) as f64;
    let n = l.kernel.weights.len() as f64;
    let var = l.kernel.weights.iter().map(|w| w * w).sum::<f64>() / n;
    assert!((var / (2.0 / fan_in) - 1.0).abs() < 0.1, "variance ratio {}", var / (2.0 / fan_in));
}

#[test]
fn invalid_configs_rejected() {
    let odd = UNetConfig {
        input_size: [10, 12],
        depth: 3,
        ..UNetConfig::default()
    };
    assert!(matches!(build(&odd, 0), Err(Error::Config(_))));
    let one_class = UNetConfig {
        num_classes: 1,
        ..UNetConfig::default()
    };
    assert!(build(&one_class, 0).is_err());
}

#[test]
fn forward_shapes_and_zero_params() {
    let cfg = tiny(8, 12);
    let x = input(1, 3, 8, 12);
    let (logits, tape) = forward(&build(&cfg, 0).unwrap(), &cfg, &x, false).unwrap();
    assert_eq!(logits.shape(), Shape4::new(3, 2, 8, 12));
    assert!(tape.is_none());

    let zero = UNetParams::zeros(&cfg);
    let (logits, _) = forward(&zero, &cfg, &x, false).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
    let p = predict(&zero, &cfg, &x).unwrap();
    assert!(p.probs.data().iter().all(|&v| v == 0.5));

    let wrong = input(1, 1, 8, 8);
    assert!(matches!(forward(&zero, &cfg, &wrong, false), Err(Error::Dimension(_))));
}

#[test]
fn batch_rows_are_independent() {
    let cfg = tiny(8, 8);
    let params = build(&cfg, 4).unwrap();
    let a = input(5, 1, 8, 8);
    let b = input(6, 1, 8, 8);
    let batch = Tensor4::stack(&[a.clone(), b.clone(), a.clone()]).unwrap();
    let (logits, _) = forward(&params, &cfg, &batch, false).unwrap();
    assert_eq!(logits.item(0), logits.item(2));
    let (la, _) = forward(&params, &cfg, &a, false).unwrap();
    let (lb, _) = forward(&params, &cfg, &b, false).unwrap();
    assert_eq!(logits.item(0), la);
    assert_eq!(logits.item(1), lb);

    let swapped = Tensor4::stack(&[b, a]).unwrap();
    let (ls, _) = forward(&params, &cfg, &swapped, false).unwrap();
    assert_eq!(ls.item(0), logits.item(1));
    assert_eq!(ls.item(1), logits.item(0));
}

#[test]
fn predict_is_a_distribution_consistent_with_logits() {
    let cfg = tiny(8, 8);
    let params = build(&cfg, 8).unwrap();
    let x = input(9, 2, 8, 8);
    let p = predict(&params, &cfg, &x).unwrap();
    let (logits, _) = forward(&params, &cfg, &x, false).unwrap();
    assert_eq!(p, predict(&params, &cfg, &x).unwrap());
    for n in 0..2 {
        for (i, &pf) in p.foreground_plane(n).iter().enumerate() {
            assert!(pf > 0.0 && pf < 1.0);
            let fg_wins = logits.plane(n, 1)[i] > logits.plane(n, 0)[i];
            if fg_wins {
                assert!(pf > 0.5);
            } else {
                assert!(pf <= 0.5);
            }
        }
    }
}

#[test]
fn backward_needs_tape_and_is_linear() {
    let cfg = tiny(4, 4);
    let params = build(&cfg, 2).unwrap();
    let x = input(3, 2, 4, 4);
    let g0 = Tensor4::zeros(Shape4::new(2, 2, 4, 4));
    assert!(matches!(backward(&params, &cfg, None, &g0), Err(Error::Usage(_))));

    let (_, tape) = forward(&params, &cfg, &x, true).unwrap();
    let zero = backward(&params, &cfg, tape.as_ref(), &g0).unwrap();
    assert!(zero.to_flat().iter().all(|&v| v == 0.0));

    // Gradient of a batch is the sum of the per-row gradients.
    let mut r = ChaCha8Rng::seed_from_u64(12);
    let g = Tensor4::from_fn(g0.shape(), |_, _, _, _| r.random_range(-1.0..1.0));
    let full = backward(&params, &cfg, tape.as_ref(), &g).unwrap().to_flat();
    let mut summed = vec![0.0; full.len()];
    for i in 0..2 {
        let (_, t) = forward(&params, &cfg, &x.item(i), true).unwrap();
        let gi = backward(&params, &cfg, t.as_ref(), &g.item(i)).unwrap().to_flat();
        for (s, v) in summed.iter_mut().zip(gi) {
            *s += v;
        }
    }
    assert!(relative_error(&full, &summed) < 1e-12);
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    for seed in 0..5 {
        for (h, w) in [(4, 4), (8, 8)] {
            let cfg = tiny(h, w);
            let mut params = build(&cfg, seed).unwrap();
            let mut r = ChaCha8Rng::seed_from_u64(1000 + seed);
            for (_, buf) in params.buffers_mut() {
                for v in buf.iter_mut() {
                    *v += r.random_range(-0.05..0.05);
                }
            }
            let x = input(50 + seed, 2, h, w);
            let labels = LabelMask::new(2, h, w, (0..2 * h * w).map(|_| u8::from(r.random_bool(0.3))).collect()).unwrap();
            let weights = pixel_weights(WeightPolicy::Uniform, &labels, 2);
            let loss_cfg = LossConfig {
                kind: LossKind::BceDiceTv,
                lambda: 0.01,
                tv_smoothing_eps: 1e-2,
                ..Default::default()
            };
            let value_of = |p: &UNetParams| {
                let (logits, _) = forward(p, &cfg, &x, false).unwrap();
                let probs = PredictionMap::new(softmax_channels(&logits).unwrap());
                total_loss(&loss_cfg, &probs, &labels, &weights).unwrap()
            };
            let (logits, tape) = forward(&params, &cfg, &x, true).unwrap();
            let out = total_loss(&loss_cfg, &PredictionMap::new(softmax_channels(&logits).unwrap()), &labels, &weights).unwrap();
            let grads = backward(&params, &cfg, tape.as_ref(), &out.grad).unwrap();
            let mut probe = params.clone();
            let fd = finite_diff_grad(
                |flat| {
                    probe.set_from_flat(flat).unwrap();
                    value_of(&probe).value
                },
                &params.to_flat(),
                1e-6,
            );
            let err = relative_error(&grads.to_flat(), &fd);
            assert!(err < 1e-4, "seed {seed} {h}x{w}: {err}");
        }
    }
}

#[test]
fn checkpoint_round_trip_and_validation() {
    let cfg = tiny(8, 8);
    let params = build(&cfg, 21).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &cfg, &params).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..6], b"TVSEG1");
    let (cfg2, params2) = load_checkpoint(&path).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!(params2, params);

    assert!(matches!(read_checkpoint(&bytes[..bytes.len() - 8]), Err(Error::Checkpoint(_))));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(read_checkpoint(&extra), Err(Error::Checkpoint(_))));
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(read_checkpoint(&bad_magic), Err(Error::Checkpoint(_))));
    assert!(matches!(load_checkpoint(&dir.path().join("missing.ckpt")), Err(Error::Checkpoint(_))));

    let other = tiny(16, 16);
    assert!(params.check_against(&other).is_ok(), "input size does not change parameter shapes");
    let wider = UNetConfig {
        base_channels: 8,
        ..cfg
    };
    assert!(params.check_against(&wider).is_err());
}
