//! Finite-difference checks of every hand-written backward pass.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::Result;
use crate::loss::{
    dice_loss, pixel_weights, total_loss, tv2d_grad, tv2d_smoothed, weighted_ce, LabelMask, LossConfig, LossKind,
    WeightPolicy,
};
use crate::model::{self, backward, forward, PredictionMap, UNetConfig};
use crate::rng;
use crate::tensor::{
    concat_channels, conv2d, conv2d_backward, finite_diff_grad, maxpool2, maxpool2_backward, relative_error, relu,
    relu_backward, softmax_channels, split_channels, upconv2, upconv2_backward, ConvKernel, Shape4, Tensor4,
};

pub const LAYER_TOLERANCE: f64 = 1e-5;
pub const LOSS_TOLERANCE: f64 = 1e-6;
pub const NETWORK_TOLERANCE: f64 = 1e-4;

const STEP: f64 = 1e-5;
const GRADCHECK_STREAM: u64 = 0x6763;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Layer,
    Loss,
    Network,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub kind: CheckKind,
    /// Worst relative error over all seeds.
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub seeds: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Random instances per layer and loss check.
    pub seeds: usize,
    /// Instances of the whole-network check.
    pub network_seeds: usize,
    /// Perturbs the analytic conv2d gradient so the suite must fail.
    pub corrupt: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: 20,
            network_seeds: 5,
            corrupt: false,
        }
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape4) -> Tensor4 {
    Tensor4::from_vec(shape, normal_vec(rng, shape.len())).expect("length matches")
}

fn random_kernel(rng: &mut ChaCha8Rng, o: usize, c: usize, k: usize) -> ConvKernel {
    ConvKernel::new(o, c, k, k, normal_vec(rng, o * c * k * k), normal_vec(rng, o)).expect("length matches")
}

fn tensor_with(shape: Shape4, data: &[f64]) -> Tensor4 {
    Tensor4::from_vec(shape, data.to_vec()).expect("length matches")
}

fn kernel_with(like: &ConvKernel, flat: &[f64]) -> ConvKernel {
    let nw = like.weights.len();
    ConvKernel::new(
        like.out_channels,
        like.in_channels,
        like.kh,
        like.kw,
        flat[..nw].to_vec(),
        flat[nw..].to_vec(),
    )
    .expect("length matches")
}

fn kernel_flat(k: &ConvKernel) -> Vec<f64> {
    k.weights.iter().chain(&k.bias).copied().collect()
}

fn concat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> LabelMask {
    let labels = (0..n * h * w).map(|_| u8::from(rng.random_bool(0.4))).collect();
    LabelMask::new(n, h, w, labels).expect("length matches")
}

fn check_conv2d(rng: &mut ChaCha8Rng, corrupt: bool) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (k, pad) in [(3, 1), (1, 0)] {
        let xs = Shape4::new(2, 3, 5, 4);
        let x = random_tensor(rng, xs);
        let kernel = random_kernel(rng, 2, 3, k);
        let out = conv2d(&x, &kernel, pad)?;
        let g = random_tensor(rng, out.shape());
        let (gx, mut gk) = conv2d_backward(&x, &kernel, &g, pad)?;
        if corrupt {
            gk.weights[0] = gk.weights[0] * 1.5 + 1.0;
        }
        let analytic = concat(&[gx.data(), &kernel_flat(&gk)]);
        let point = concat(&[x.data(), &kernel_flat(&kernel)]);
        let nx = xs.len();
        let numeric = finite_diff_grad(
            |p| {
                let out = conv2d(&tensor_with(xs, &p[..nx]), &kernel_with(&kernel, &p[nx..]), pad).expect("shapes fixed");
                out.dot(&g).expect("shapes fixed")
            },
            &point,
            STEP,
        );
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn check_upconv2(rng: &mut ChaCha8Rng) -> Result<f64> {
    let xs = Shape4::new(2, 3, 3, 4);
    let x = random_tensor(rng, xs);
    let kernel = random_kernel(rng, 2, 3, 2);
    let out = upconv2(&x, &kernel)?;
    let g = random_tensor(rng, out.shape());
    let (gx, gk) = upconv2_backward(&x, &kernel, &g)?;
    let analytic = concat(&[gx.data(), &kernel_flat(&gk)]);
    let point = concat(&[x.data(), &kernel_flat(&kernel)]);
    let nx = xs.len();
    let numeric = finite_diff_grad(
        |p| {
            let out = upconv2(&tensor_with(xs, &p[..nx]), &kernel_with(&kernel, &p[nx..])).expect("shapes fixed");
            out.dot(&g).expect("shapes fixed")
        },
        &point,
        STEP,
    );
    Ok(relative_error(&analytic, &numeric))
}

fn check_maxpool2(rng: &mut ChaCha8Rng) -> Result<f64> {
    // Distinct values at least 0.01 apart so the argmax is stable under the
    // finite-difference step.
    let xs = Shape4::new(2, 2, 6, 4);
    let mut values: Vec<f64> = (0..xs.len()).map(|i| i as f64 * 0.01).collect();
    for i in (1..values.len()).rev() {
        values.swap(i, rng.random_range(0..=i));
    }
    let x = tensor_with(xs, &values);
    let (out, idx) = maxpool2(&x)?;
    let g = random_tensor(rng, out.shape());
    let gx = maxpool2_backward(&idx, &g, xs)?;
    let numeric = finite_diff_grad(
        |p| maxpool2(&tensor_with(xs, p)).expect("shape fixed").0.dot(&g).expect("shape fixed"),
        x.data(),
        STEP,
    );
    Ok(relative_error(gx.data(), &numeric))
}

fn check_relu(rng: &mut ChaCha8Rng) -> Result<f64> {
    let xs = Shape4::new(2, 3, 4, 4);
    let x = Tensor4::from_fn(xs, |_, _, _, _| {
        let mag = rng.random_range(0.05..2.0);
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    });
    let g = random_tensor(rng, xs);
    let gx = relu_backward(&x, &g)?;
    let numeric = finite_diff_grad(|p| relu(&tensor_with(xs, p)).dot(&g).expect("shape fixed"), x.data(), STEP);
    Ok(relative_error(gx.data(), &numeric))
}

fn check_concat(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (sa, sb) = (Shape4::new(2, 2, 3, 3), Shape4::new(2, 3, 3, 3));
    let a = random_tensor(rng, sa);
    let b = random_tensor(rng, sb);
    let g = random_tensor(rng, Shape4::new(2, 5, 3, 3));
    let (ga, gb) = split_channels(&g, 2)?;
    let analytic = concat(&[ga.data(), gb.data()]);
    let na = sa.len();
    let numeric = finite_diff_grad(
        |p| {
            concat_channels(&tensor_with(sa, &p[..na]), &tensor_with(sb, &p[na..]))
                .expect("shapes fixed")
                .dot(&g)
                .expect("shapes fixed")
        },
        &concat(&[a.data(), b.data()]),
        STEP,
    );
    Ok(relative_error(&analytic, &numeric))
}

fn probs_of(shape: Shape4, logits: &[f64]) -> PredictionMap {
    PredictionMap::new(softmax_channels(&tensor_with(shape, logits)).expect("two classes"))
}

fn check_weighted_ce(rng: &mut ChaCha8Rng) -> Result<f64> {
    let s = Shape4::new(2, 2, 4, 5);
    let logits = random_tensor(rng, s);
    let labels = random_labels(rng, s.n, s.h, s.w);
    let weights = pixel_weights(WeightPolicy::ClassBalanced, &labels, 2);
    let (_, grad) = weighted_ce(&probs_of(s, logits.data()), &labels, &weights)?;
    let numeric = finite_diff_grad(
        |p| weighted_ce(&probs_of(s, p), &labels, &weights).expect("shapes fixed").0,
        logits.data(),
        STEP,
    );
    Ok(relative_error(grad.data(), &numeric))
}

fn check_dice(rng: &mut ChaCha8Rng) -> Result<f64> {
    let s = Shape4::new(2, 2, 4, 5);
    let logits = random_tensor(rng, s);
    let labels = random_labels(rng, s.n, s.h, s.w);
    let (_, grad) = dice_loss(&probs_of(s, logits.data()), &labels)?;
    let numeric = finite_diff_grad(
        |p| dice_loss(&probs_of(s, p), &labels).expect("shapes fixed").0,
        logits.data(),
        STEP,
    );
    Ok(relative_error(grad.data(), &numeric))
}

fn check_tv(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (h, w, eps) = (5, 6, 1e-2);
    let plane: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
    let grad = tv2d_grad(&plane, h, w, eps);
    let numeric = finite_diff_grad(|p| tv2d_smoothed(p, h, w, eps), &plane, STEP);
    Ok(relative_error(&grad, &numeric))
}

fn check_total_loss(rng: &mut ChaCha8Rng) -> Result<f64> {
    let s = Shape4::new(2, 2, 4, 5);
    let config = LossConfig {
        kind: LossKind::BceDiceTv,
        lambda: 0.1,
        tv_smoothing_eps: 1e-2,
        ..Default::default()
    };
    let logits = random_tensor(rng, s);
    let labels = random_labels(rng, s.n, s.h, s.w);
    let weights = pixel_weights(WeightPolicy::Uniform, &labels, 2);
    let out = total_loss(&config, &probs_of(s, logits.data()), &labels, &weights)?;
    let numeric = finite_diff_grad(
        |p| total_loss(&config, &probs_of(s, p), &labels, &weights).expect("shapes fixed").value,
        logits.data(),
        STEP,
    );
    Ok(relative_error(out.grad.data(), &numeric))
}

/// Tiny network used by the end-to-end check.
pub fn tiny_config() -> UNetConfig {
    UNetConfig {
        in_channels: 1,
        num_classes: 2,
        depth: 2,
        base_channels: 4,
        input_size: [8, 8],
    }
}

fn check_network(rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let config = tiny_config();
    let mut params = model::build(&config, seed)?;
    // Non-zero biases so every code path carries gradient.
    for (_, buf) in params.buffers_mut() {
        for v in buf.iter_mut() {
            if *v == 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                *v = 0.1 * z;
            }
        }
    }
    let [h, w] = config.input_size;
    let s = Shape4::new(2, 1, h, w);
    let x = Tensor4::from_fn(s, |_, _, _, _| rng.random_range(0.0..1.0));
    let labels = random_labels(rng, 2, h, w);
    let weights = pixel_weights(WeightPolicy::Uniform, &labels, 2);
    let loss = LossConfig {
        kind: LossKind::BceDiceTv,
        lambda: 0.01,
        tv_smoothing_eps: 1e-2,
        ..Default::default()
    };
    let objective = |p: &model::UNetParams| -> Result<(f64, Tensor4, Option<model::Tape>)> {
        let (logits, tape) = forward(p, &config, &x, true)?;
        let probs = PredictionMap::new(softmax_channels(&logits)?);
        let out = total_loss(&loss, &probs, &labels, &weights)?;
        Ok((out.value, out.grad, tape))
    };
    let (_, grad_logits, tape) = objective(&params)?;
    let grads = backward(&params, &config, tape.as_ref(), &grad_logits)?;
    let mut probe = params.clone();
    let numeric = finite_diff_grad(
        |flat| {
            probe.set_from_flat(flat).expect("length fixed");
            objective(&probe).expect("shapes fixed").0
        },
        &params.to_flat(),
        1e-6,
    );
    Ok(relative_error(&grads.to_flat(), &numeric))
}

type Check = fn(&mut ChaCha8Rng) -> Result<f64>;

/// Runs every check and returns one result per layer type, loss, and the
/// whole network.
pub fn run_suite(options: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let checks: [(&'static str, CheckKind, f64, Check); 8] = [
        ("conv2d", CheckKind::Layer, LAYER_TOLERANCE, |r| check_conv2d(r, false)),
        ("upconv2", CheckKind::Layer, LAYER_TOLERANCE, check_upconv2),
        ("maxpool2", CheckKind::Layer, LAYER_TOLERANCE, check_maxpool2),
        ("relu", CheckKind::Layer, LAYER_TOLERANCE, check_relu),
        ("concat_channels", CheckKind::Layer, LAYER_TOLERANCE, check_concat),
        ("weighted_ce", CheckKind::Loss, LOSS_TOLERANCE, check_weighted_ce),
        ("dice_loss", CheckKind::Loss, LOSS_TOLERANCE, check_dice),
        ("tv2d_smoothed", CheckKind::Loss, LOSS_TOLERANCE, check_tv),
    ];
    let mut results = Vec::new();
    for (i, (name, kind, tolerance, check)) in checks.into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        for s in 0..options.seeds {
            let mut rng = rng::stream(options.seed.wrapping_add(s as u64), GRADCHECK_STREAM + i as u64);
            let err = if name == "conv2d" {
                check_conv2d(&mut rng, options.corrupt)?
            } else {
                check(&mut rng)?
            };
            worst = worst.max(err);
        }
        results.push(CheckResult {
            name,
            kind,
            max_rel_error: worst,
            tolerance,
            seeds: options.seeds,
        });
    }

    let mut worst: f64 = 0.0;
    for s in 0..options.seeds {
        let mut rng = rng::stream(options.seed.wrapping_add(s as u64), GRADCHECK_STREAM + 100);
        worst = worst.max(check_total_loss(&mut rng)?);
    }
    results.push(CheckResult {
        name: "total_loss",
        kind: CheckKind::Loss,
        max_rel_error: worst,
        tolerance: LOSS_TOLERANCE,
        seeds: options.seeds,
    });

    let mut worst: f64 = 0.0;
    for s in 0..options.network_seeds {
        let seed = options.seed.wrapping_add(s as u64);
        let mut rng = rng::stream(seed, GRADCHECK_STREAM + 200);
        worst = worst.max(check_network(&mut rng, seed)?);
    }
    results.push(CheckResult {
        name: "unet_end_to_end",
        kind: CheckKind::Network,
        max_rel_error: worst,
        tolerance: NETWORK_TOLERANCE,
        seeds: options.network_seeds,
    });
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_corruption_is_caught() {
        let opts = GradcheckOptions {
            seeds: 2,
            network_seeds: 1,
            ..Default::default()
        };
        let results = run_suite(&opts).unwrap();
        for r in &results {
            assert!(r.passed(), "{r:?}");
        }
        let bad = run_suite(&GradcheckOptions { corrupt: true, ..opts }).unwrap();
        assert!(!bad.iter().find(|r| r.name == "conv2d").unwrap().passed());
    }
}
