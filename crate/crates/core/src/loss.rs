//! Training losses and their gradients with respect to the logits.
//!
//! All gradients assume `probs = softmax(logits)` over channels, so callers
//! can chain them straight into [`crate::model::backward`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PredictionMap;
use crate::tensor::{Shape4, Tensor4};

/// Which terms make up the training objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "BCE")]
    Bce,
    #[serde(rename = "BCE+DSC")]
    BceDice,
    #[serde(rename = "BCE+DSC+TV")]
    BceDiceTv,
    #[serde(rename = "BCE+TV")]
    BceTv,
}

impl LossKind {
    pub fn uses_dice(self) -> bool {
        matches!(self, LossKind::BceDice | LossKind::BceDiceTv)
    }

    pub fn uses_tv(self) -> bool {
        matches!(self, LossKind::BceTv | LossKind::BceDiceTv)
    }

    pub fn label(self) -> &'static str {
        match self {
            LossKind::Bce => "BCE",
            LossKind::BceDice => "BCE+DSC",
            LossKind::BceDiceTv => "BCE+DSC+TV",
            LossKind::BceTv => "BCE+TV",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightPolicy {
    /// ω ≡ 1.
    Uniform,
    /// ω inversely proportional to each class's pixel frequency in the batch.
    ClassBalanced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Weight of the TV term.
    pub lambda: f64,
    pub weight_policy: WeightPolicy,
    /// 0 uses the exact subgradient; > 0 smooths |t| as sqrt(t² + eps²) − eps.
    pub tv_smoothing_eps: f64,
    /// Divide each plane's TV by its pixel count.
    pub tv_per_pixel: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Bce,
            lambda: 1e-4,
            weight_policy: WeightPolicy::Uniform,
            tv_smoothing_eps: 1e-6,
            tv_per_pixel: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        if !(self.tv_smoothing_eps >= 0.0 && self.tv_smoothing_eps.is_finite()) {
            return Err(Error::Config(format!(
                "tv_smoothing_eps must be finite and non-negative, got {}",
                self.tv_smoothing_eps
            )));
        }
        Ok(())
    }
}

/// Per-pixel class labels, shape `(n, h, w)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(n: usize, h: usize, w: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != n * h * w {
            return Err(Error::dim(format!(
                "label mask ({n}, {h}, {w}) given {} labels",
                labels.len()
            )));
        }
        Ok(Self { n, h, w, labels })
    }

    pub fn item(&self, n: usize) -> &[u8] {
        let len = self.h * self.w;
        &self.labels[n * len..(n + 1) * len]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn check(&self, probs: &PredictionMap) -> Result<Shape4> {
        let s = probs.probs.shape();
        if (s.n, s.h, s.w) != (self.n, self.h, self.w) {
            return Err(Error::dim(format!(
                "labels ({}, {}, {}) do not match predictions {s}",
                self.n, self.h, self.w
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= s.c) {
            return Err(Error::Label(format!(
                "label {bad} is out of range for {} classes",
                s.c
            )));
        }
        Ok(s)
    }
}

/// Pixel weight map ω for `labels` under `policy`.
pub fn pixel_weights(policy: WeightPolicy, labels: &LabelMask, num_classes: usize) -> Vec<f64> {
    match policy {
        WeightPolicy::Uniform => vec![1.0; labels.len()],
        WeightPolicy::ClassBalanced => {
            let mut counts = vec![0usize; num_classes.max(1)];
            for &l in &labels.labels {
                if let Some(c) = counts.get_mut(l as usize) {
                    *c += 1;
                }
            }
            let present = counts.iter().filter(|&&c| c > 0).count().max(1) as f64;
            let total = labels.len() as f64;
            labels
                .labels
                .iter()
                .map(|&l| match counts.get(l as usize) {
                    Some(&c) if c > 0 => total / (present * c as f64),
                    _ => 1.0,
                })
                .collect()
        }
    }
}

/// Weighted negative log-likelihood averaged over every pixel of the batch:
/// `−(1/|Ω|) Σ ω(x) log p_{ℓ(x)}(x)`, with the fused softmax gradient
/// `(p − onehot) ω / |Ω|`.
pub fn weighted_ce(probs: &PredictionMap, labels: &LabelMask, weights: &[f64]) -> Result<(f64, Tensor4)> {
    let s = labels.check(probs)?;
    if weights.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} pixel weights for {} pixels",
            weights.len(),
            labels.len()
        )));
    }
    let plane = s.plane_len();
    let omega = labels.len() as f64;
    let p = probs.probs.data();
    let mut grad = Tensor4::zeros(s);
    let g = grad.data_mut();
    let mut value = 0.0;
    for n in 0..s.n {
        for px in 0..plane {
            let li = n * plane + px;
            let label = labels.labels[li] as usize;
            let wgt = weights[li];
            let base = n * s.c * plane + px;
            value -= wgt * p[base + label * plane].ln();
            for k in 0..s.c {
                let onehot = if k == label { 1.0 } else { 0.0 };
                g[base + k * plane] = (p[base + k * plane] - onehot) * wgt / omega;
            }
        }
    }
    let value = value / omega;
    if !value.is_finite() {
        return Err(Error::Training(
            "cross-entropy is not finite (a labelled class has probability 0)".into(),
        ));
    }
    Ok((value, grad))
}

/// Smoothing constant of the soft Dice loss.
pub const DICE_SMOOTH: f64 = 1.0;

/// Soft Dice loss on the foreground plane pooled over the batch:
/// `1 − (2 Σ p y + ε) / (Σ p + Σ y + ε)`.
pub fn dice_loss(probs: &PredictionMap, labels: &LabelMask) -> Result<(f64, Tensor4)> {
    let s = labels.check(probs)?;
    if s.c != 2 {
        return Err(Error::Config(format!(
            "dice loss is defined for 2 classes, got {}",
            s.c
        )));
    }
    let fg = probs.foreground;
    let (mut inter, mut sum_p, mut sum_y) = (0.0, 0.0, 0.0);
    for n in 0..s.n {
        for (&p, &l) in probs.foreground_plane(n).iter().zip(labels.item(n)) {
            let y = if l as usize == fg { 1.0 } else { 0.0 };
            inter += p * y;
            sum_p += p;
            sum_y += y;
        }
    }
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = sum_p + sum_y + DICE_SMOOTH;
    let value = 1.0 - num / den;

    let mut grad = Tensor4::zeros(s);
    for n in 0..s.n {
        let labels_n = labels.item(n);
        for px in 0..s.plane_len() {
            let y = if labels_n[px] as usize == fg { 1.0 } else { 0.0 };
            let d_p = -(2.0 * y * den - num) / (den * den);
            chain_foreground(&probs.probs, &mut grad, n, px, fg, d_p);
        }
    }
    Ok((value, grad))
}

/// Adds `d_fg · ∂p_fg/∂a_k` to every logit channel at pixel `px` of item `n`.
fn chain_foreground(probs: &Tensor4, grad: &mut Tensor4, n: usize, px: usize, fg: usize, d_fg: f64) {
    let s = probs.shape();
    let plane = s.plane_len();
    let base = n * s.c * plane + px;
    let p = probs.data();
    let p_fg = p[base + fg * plane];
    let g = grad.data_mut();
    for k in 0..s.c {
        let delta = if k == fg { 1.0 } else { 0.0 };
        g[base + k * plane] += d_fg * p_fg * (delta - p[base + k * plane]);
    }
}

/// Total variation of a 1D signal, `Σ |y[n+1] − y[n]|`.
pub fn tv1d(y: &[f64]) -> f64 {
    y.windows(2).map(|w| (w[1] - w[0]).abs()).sum()
}

/// Anisotropic TV of a row-major `h × w` plane: vertical plus horizontal
/// absolute differences over in-bounds neighbour pairs.
pub fn tv2d_aniso(plane: &[f64], h: usize, w: usize) -> f64 {
    tv2d_smoothed(plane, h, w, 0.0)
}

#[inline]
fn smooth_abs(t: f64, eps: f64) -> f64 {
    if eps == 0.0 {
        t.abs()
    } else {
        (t * t + eps * eps).sqrt() - eps
    }
}

#[inline]
fn smooth_abs_grad(t: f64, eps: f64) -> f64 {
    if eps == 0.0 {
        if t > 0.0 {
            1.0
        } else if t < 0.0 {
            -1.0
        } else {
            0.0
        }
    } else {
        t / (t * t + eps * eps).sqrt()
    }
}

fn for_each_pair(h: usize, w: usize, mut f: impl FnMut(usize, usize)) {
    for i in 0..h {
        for j in 0..w {
            let here = i * w + j;
            if i + 1 < h {
                f(here, here + w);
            }
            if j + 1 < w {
                f(here, here + 1);
            }
        }
    }
}

/// Anisotropic TV with each |t| replaced by `sqrt(t² + eps²) − eps`.
/// Equals [`tv2d_aniso`] when `eps == 0`.
pub fn tv2d_smoothed(plane: &[f64], h: usize, w: usize, eps: f64) -> f64 {
    assert_eq!(plane.len(), h * w, "plane length does not match {h}x{w}");
    let mut total = 0.0;
    for_each_pair(h, w, |a, b| total += smooth_abs(plane[b] - plane[a], eps));
    total
}

/// Gradient of [`tv2d_smoothed`]; with `eps == 0` the subgradient using
/// sign(0) = 0.
pub fn tv2d_grad(plane: &[f64], h: usize, w: usize, eps: f64) -> Vec<f64> {
    assert_eq!(plane.len(), h * w, "plane length does not match {h}x{w}");
    let mut grad = vec![0.0; plane.len()];
    for_each_pair(h, w, |a, b| {
        let d = smooth_abs_grad(plane[b] - plane[a], eps);
        grad[b] += d;
        grad[a] -= d;
    });
    grad
}

/// Per-term contributions to the total loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub ce: f64,
    pub dice: f64,
    /// λ times the batch-mean TV; this is what enters the total.
    pub tv_term: f64,
    /// Batch-mean TV of the foreground planes before weighting by λ.
    pub tv_raw: f64,
}

impl LossComponents {
    pub fn total(&self) -> f64 {
        self.ce + self.dice + self.tv_term
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Tensor4,
    pub components: LossComponents,
}

/// The configured objective: weighted CE, plus Dice and/or λ·TV of the
/// foreground probability plane as `config.kind` selects. TV is averaged
/// over batch items.
pub fn total_loss(
    config: &LossConfig,
    probs: &PredictionMap,
    labels: &LabelMask,
    weights: &[f64],
) -> Result<LossOutput> {
    config.validate()?;
    let (ce, mut grad) = weighted_ce(probs, labels, weights)?;
    let mut components = LossComponents {
        ce,
        ..Default::default()
    };

    if config.kind.uses_dice() {
        let (d, g) = dice_loss(probs, labels)?;
        components.dice = d;
        grad.add_assign(&g)?;
    }

    if config.kind.uses_tv() {
        let s = probs.probs.shape();
        let (h, w) = (s.h, s.w);
        let norm = if config.tv_per_pixel { (h * w) as f64 } else { 1.0 };
        let scale = 1.0 / (s.n as f64 * norm);
        let eps = config.tv_smoothing_eps;
        let mut tv_sum = 0.0;
        for n in 0..s.n {
            let plane = probs.foreground_plane(n);
            tv_sum += tv2d_smoothed(plane, h, w, eps);
            if config.lambda != 0.0 {
                let g = tv2d_grad(plane, h, w, eps);
                for (px, gv) in g.into_iter().enumerate() {
                    chain_foreground(&probs.probs, &mut grad, n, px, probs.foreground, config.lambda * scale * gv);
                }
            }
        }
        components.tv_raw = tv_sum * scale;
        components.tv_term = config.lambda * components.tv_raw;
    }

    let value = components.total();
    if !value.is_finite() {
        return Err(Error::Training(format!("loss is not finite: {components:?}")));
    }
    Ok(LossOutput {
        value,
        grad,
        components,
    })
}
