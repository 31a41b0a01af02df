//! Pixel-level segmentation metrics.
//!
//! Binary masks are `u8` slices holding 0 (background) or 1 (foreground).
//! Zero-denominator conventions: IoU and Dice of two empty masks are 1;
//! precision and recall with a zero denominator are 1 when the prediction
//! and ground truth are both empty and 0 otherwise.

use std::cmp::Ordering;

use serde::Serialize;

use crate::error::{Error, Result};

/// Pixel = 1 iff `prob >= threshold`.
pub fn binarize(probs: &[f64], threshold: f64) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p >= threshold)).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Class {
    Foreground,
    Background,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn both_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    pub fn precision(&self) -> f64 {
        match self.tp + self.fp {
            0 if self.both_empty() => 1.0,
            0 => 0.0,
            d => self.tp as f64 / d as f64,
        }
    }

    pub fn recall(&self) -> f64 {
        match self.tp + self.fn_ {
            0 if self.both_empty() => 1.0,
            0 => 0.0,
            d => self.tp as f64 / d as f64,
        }
    }

    /// `2TP / (2TP + FP + FN)`.
    pub fn dice(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    /// Intersection over union for one class.
    pub fn iou(&self, class: Class) -> f64 {
        match class {
            Class::Foreground => ratio(self.tp, self.tp + self.fp + self.fn_),
            Class::Background => ratio(self.tn, self.tn + self.fp + self.fn_),
        }
    }

    /// Mean of foreground and background IoU.
    pub fn miou(&self) -> f64 {
        0.5 * (self.iou(Class::Foreground) + self.iou(Class::Background))
    }
}

impl std::ops::AddAssign for Confusion {
    fn add_assign(&mut self, o: Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

pub fn confusion(pred: &[u8], gt: &[u8]) -> Result<Confusion> {
    if pred.len() != gt.len() {
        return Err(Error::dim(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn precision(c: &Confusion) -> f64 {
    c.precision()
}

pub fn recall(c: &Confusion) -> f64 {
    c.recall()
}

pub fn dice(c: &Confusion) -> f64 {
    c.dice()
}

pub fn iou(c: &Confusion, class: Class) -> f64 {
    c.iou(class)
}

pub fn miou(c: &Confusion) -> f64 {
    c.miou()
}

/// Metrics of one image at one threshold.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub confusion: Confusion,
    pub precision: f64,
    pub recall: f64,
    pub dice: f64,
    pub iou_foreground: f64,
    pub iou_background: f64,
    pub miou: f64,
    pub has_foreground: bool,
}

impl From<Confusion> for ImageMetrics {
    fn from(c: Confusion) -> Self {
        Self {
            confusion: c,
            precision: c.precision(),
            recall: c.recall(),
            dice: c.dice(),
            iou_foreground: c.iou(Class::Foreground),
            iou_background: c.iou(Class::Background),
            miou: c.miou(),
            has_foreground: c.tp + c.fn_ > 0,
        }
    }
}

/// Aggregate (micro-averaged over pooled confusions) metrics at one
/// threshold, with per-image values kept alongside.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub threshold: f64,
    pub confusion: Confusion,
    pub precision: f64,
    pub recall: f64,
    pub dice: f64,
    pub iou_foreground: f64,
    pub iou_background: f64,
    pub miou: f64,
    /// Normal-approximation 95% half-width over per-image recalls; `None`
    /// when fewer than two images have foreground.
    pub recall_ci_halfwidth: Option<f64>,
    pub per_image: Vec<ImageMetrics>,
}

impl MetricsReport {
    pub fn from_images(threshold: f64, per_image: Vec<ImageMetrics>) -> Self {
        let mut total = Confusion::default();
        for m in &per_image {
            total += m.confusion;
        }
        let recalls: Vec<f64> = per_image
            .iter()
            .filter(|m| m.has_foreground)
            .map(|m| m.recall)
            .collect();
        Self {
            threshold,
            confusion: total,
            precision: total.precision(),
            recall: total.recall(),
            dice: total.dice(),
            iou_foreground: total.iou(Class::Foreground),
            iou_background: total.iou(Class::Background),
            miou: total.miou(),
            recall_ci_halfwidth: recall_ci(&recalls, 0.95).ok(),
            per_image,
        }
    }

    /// Per-image (macro) average of a metric.
    pub fn macro_mean(&self, f: impl Fn(&ImageMetrics) -> f64) -> f64 {
        if self.per_image.is_empty() {
            return 0.0;
        }
        self.per_image.iter().map(f).sum::<f64>() / self.per_image.len() as f64
    }
}

fn check_aligned<P: AsRef<[f64]>, G: AsRef<[u8]>>(probs: &[P], gts: &[G]) -> Result<()> {
    if probs.len() != gts.len() {
        return Err(Error::dim(format!(
            "{} probability maps but {} ground-truth masks",
            probs.len(),
            gts.len()
        )));
    }
    for (i, (p, g)) in probs.iter().zip(gts).enumerate() {
        if p.as_ref().len() != g.as_ref().len() {
            return Err(Error::dim(format!(
                "image {i}: {} probabilities vs {} mask pixels",
                p.as_ref().len(),
                g.as_ref().len()
            )));
        }
    }
    Ok(())
}

/// One [`MetricsReport`] per threshold, in the order given.
pub fn threshold_sweep<P: AsRef<[f64]>, G: AsRef<[u8]>>(
    probs_per_image: &[P],
    gts: &[G],
    thresholds: &[f64],
) -> Result<Vec<MetricsReport>> {
    check_aligned(probs_per_image, gts)?;
    thresholds
        .iter()
        .map(|&t| {
            let per_image = probs_per_image
                .iter()
                .zip(gts)
                .map(|(p, g)| confusion(&binarize(p.as_ref(), t), g.as_ref()).map(ImageMetrics::from))
                .collect::<Result<Vec<_>>>()?;
            Ok(MetricsReport::from_images(t, per_image))
        })
        .collect()
}

/// The Table-style default grid 0.1, 0.2, …, 0.8.
pub fn default_thresholds() -> Vec<f64> {
    (1..=8).map(|i| i as f64 / 10.0).collect()
}

fn z_score(confidence: f64) -> Option<f64> {
    const TABLE: [(f64, f64); 5] = [(0.80, 1.282), (0.90, 1.645), (0.95, 1.96), (0.98, 2.326), (0.99, 2.576)];
    TABLE
        .iter()
        .find(|(c, _)| (c - confidence).abs() < 1e-9)
        .map(|&(_, z)| z)
}

/// Normal-approximation half-width `z · s / √n` of the mean per-image
/// recall, with `s` the sample standard deviation.
pub fn recall_ci(per_image_recalls: &[f64], confidence: f64) -> Result<f64> {
    let z = z_score(confidence).ok_or_else(|| {
        Error::Config(format!(
            "unsupported confidence {confidence}; use 0.80, 0.90, 0.95, 0.98 or 0.99"
        ))
    })?;
    let n = per_image_recalls.len();
    if n < 2 {
        return Err(Error::NotComputable(format!(
            "recall interval needs at least 2 images with foreground, got {n}"
        )));
    }
    if per_image_recalls.iter().all(|&r| r == per_image_recalls[0]) {
        return Ok(0.0);
    }
    let mean = per_image_recalls.iter().sum::<f64>() / n as f64;
    let var = per_image_recalls.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(z * var.sqrt() / (n as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Pools every pixel and returns (score, is_foreground) sorted by score,
/// highest first. Ties keep no particular order.
fn pooled_desc<P: AsRef<[f64]>, G: AsRef<[u8]>>(probs: &[P], gts: &[G]) -> Vec<(f64, bool)> {
    let mut pooled: Vec<(f64, bool)> = probs
        .iter()
        .zip(gts)
        .flat_map(|(p, g)| p.as_ref().iter().zip(g.as_ref()).map(|(&p, &g)| (p, g != 0)))
        .collect();
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
    pooled
}

/// Cumulative (threshold, tp, fp) after each block of equal scores.
fn cumulative_counts(pooled: &[(f64, bool)]) -> Vec<(f64, u64, u64)> {
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < pooled.len() {
        let t = pooled[i].0;
        while i < pooled.len() && pooled[i].0.total_cmp(&t) == Ordering::Equal {
            if pooled[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((t, tp, fp));
    }
    out
}

/// Precision/recall at every distinct predicted probability, pooled over
/// all images, ordered by increasing recall (decreasing threshold).
pub fn pr_curve<P: AsRef<[f64]>, G: AsRef<[u8]>>(probs_per_image: &[P], gts: &[G]) -> Result<Vec<PrPoint>> {
    check_aligned(probs_per_image, gts)?;
    let pooled = pooled_desc(probs_per_image, gts);
    let positives = pooled.iter().filter(|(_, g)| *g).count() as u64;
    if positives == 0 {
        return Err(Error::NotComputable(
            "PR curve needs at least one foreground pixel".into(),
        ));
    }
    Ok(cumulative_counts(&pooled)
        .into_iter()
        .map(|(t, tp, fp)| PrPoint {
            threshold: t,
            recall: tp as f64 / positives as f64,
            precision: tp as f64 / (tp + fp) as f64,
        })
        .collect())
}

/// `Σ (R_i − R_{i−1}) · P_i` over recall-sorted points, starting from R = 0.
pub fn average_precision(points: &[PrPoint]) -> f64 {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.recall.total_cmp(&b.recall));
    let mut prev = 0.0;
    let mut ap = 0.0;
    for p in &sorted {
        ap += (p.recall - prev) * p.precision;
        prev = p.recall;
    }
    ap
}

/// Threshold whose pooled recall lies closest to `target`, found by binary
/// search over the distinct predicted probabilities. Returns
/// `(threshold, achieved_recall)`, or `None` without any foreground.
pub fn match_recall<P: AsRef<[f64]>, G: AsRef<[u8]>>(
    probs_per_image: &[P],
    gts: &[G],
    target: f64,
) -> Result<Option<(f64, f64)>> {
    check_aligned(probs_per_image, gts)?;
    let pooled = pooled_desc(probs_per_image, gts);
    let positives = pooled.iter().filter(|(_, g)| *g).count() as u64;
    if positives == 0 {
        return Ok(None);
    }
    let steps: Vec<(f64, f64)> = cumulative_counts(&pooled)
        .into_iter()
        .map(|(t, tp, _)| (t, tp as f64 / positives as f64))
        .collect();
    // Recall is non-decreasing along `steps`.
    let k = steps.partition_point(|&(_, r)| r < target);
    let pick = if k == steps.len() {
        k - 1
    } else if k > 0 && (target - steps[k - 1].1) < (steps[k].1 - target) {
        k - 1
    } else {
        k
    };
    Ok(Some(steps[pick]))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Components {
    pub count: usize,
    /// Pixel count of each component in discovery (row-major) order.
    pub sizes: Vec<usize>,
}

/// 4-connected components of a row-major `h × w` binary mask, labelled by
/// iterative flood fill in row-major discovery order.
pub fn connected_components(mask: &[u8], h: usize, w: usize) -> Components {
    assert_eq!(mask.len(), h * w, "mask length does not match {h}x{w}");
    let mut seen = vec![false; mask.len()];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if mask[start] == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if mask[j] != 0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        sizes.push(size);
    }
    Components {
        count: sizes.len(),
        sizes,
    }
}
