use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tvseg_core::metrics::*;
use tvseg_core::Error;

/// Set-based reference metrics, with the empty-mask conventions spelled out.
struct Naive {
    precision: f64,
    recall: f64,
    dice: f64,
    iou_fg: f64,
    iou_bg: f64,
}

fn naive(pred: &[u8], gt: &[u8]) -> Naive {
    let idx = |m: &[u8], v: u8| -> Vec<usize> { (0..m.len()).filter(|&i| m[i] == v).collect() };
    let p: Vec<usize> = idx(pred, 1);
    let g: Vec<usize> = idx(gt, 1);
    let inter = p.iter().filter(|i| g.contains(i)).count() as f64;
    let union_of = |a: &[usize], b: &[usize]| a.len() + b.iter().filter(|i| !a.contains(i)).count();
    let (np, ng) = (p.len() as f64, g.len() as f64);
    let both_empty = p.is_empty() && g.is_empty();
    let safe = |num: f64, den: f64, empty: f64| if den == 0.0 { empty } else { num / den };
    let empty_pr = if both_empty { 1.0 } else { 0.0 };

    let pb: Vec<usize> = idx(pred, 0);
    let gb: Vec<usize> = idx(gt, 0);
    let inter_bg = pb.iter().filter(|i| gb.contains(i)).count() as f64;
    Naive {
        precision: safe(inter, np, empty_pr),
        recall: safe(inter, ng, empty_pr),
        dice: safe(2.0 * inter, np + ng, 1.0),
        iou_fg: safe(inter, union_of(&p, &g) as f64, 1.0),
        iou_bg: safe(inter_bg, union_of(&pb, &gb) as f64, 1.0),
    }
}

fn assert_matches(pred: &[u8], gt: &[u8]) {
    let c = confusion(pred, gt).unwrap();
    let n = naive(pred, gt);
    assert_eq!(c.total(), pred.len() as u64);
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    assert!(close(precision(&c), n.precision), "precision {pred:?} {gt:?}");
    assert!(close(recall(&c), n.recall), "recall {pred:?} {gt:?}");
    assert!(close(dice(&c), n.dice), "dice {pred:?} {gt:?}");
    assert!(close(iou(&c, Class::Foreground), n.iou_fg));
    assert!(close(iou(&c, Class::Background), n.iou_bg));
    assert!(close(miou(&c), 0.5 * (n.iou_fg + n.iou_bg)));
}

fn bits(v: u32, n: usize) -> Vec<u8> {
    (0..n).map(|i| ((v >> i) & 1) as u8).collect()
}

#[test]
fn exhaustive_three_by_three_pairs() {
    let masks: Vec<Vec<u8>> = (0..512).map(|v| bits(v, 9)).collect();
    for pred in &masks {
        for gt in &masks {
            assert_matches(pred, gt);
        }
    }
}

#[test]
fn random_sixteen_by_sixteen_pairs() {
    let mut r = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..10_000 {
        let density = r.random_range(0.0..1.0);
        let mut mask = || -> Vec<u8> { (0..256).map(|_| u8::from(r.random_bool(density))).collect() };
        let (pred, gt) = (mask(), mask());
        assert_matches(&pred, &gt);
    }
}

#[test]
fn dice_iou_identity_is_exact_on_integer_confusions() {
    // dice = 2I/(2I+FP+FN), iou = I/U with U = I+FP+FN, so
    // 2·iou/(1+iou) = 2I/(U+I); compare the two fractions by cross-multiplying.
    for tp in 0u64..30 {
        for fp in 0u64..30 {
            for fn_ in 0u64..30 {
                let c = Confusion { tp, fp, fn_, tn: 0 };
                let u = tp + fp + fn_;
                if u == 0 {
                    assert_eq!(c.dice(), 1.0);
                    assert_eq!(c.iou(Class::Foreground), 1.0);
                    continue;
                }
                assert_eq!(2 * tp * (u + tp), 2 * tp * (2 * tp + fp + fn_));
                let iou = c.iou(Class::Foreground);
                assert!((c.dice() - 2.0 * iou / (1.0 + iou)).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn metric_examples() {
    let m = [1u8, 0, 1, 1, 0, 0];
    let c = confusion(&m, &m).unwrap();
    assert_eq!((c.precision(), c.recall(), c.dice(), c.miou()), (1.0, 1.0, 1.0, 1.0));
    let empty = confusion(&[0; 16], &[0; 16]).unwrap();
    assert_eq!((empty.dice(), empty.iou(Class::Foreground)), (1.0, 1.0));
    assert_eq!((empty.precision(), empty.recall()), (1.0, 1.0));
    let all_wrong = confusion(&[1; 100], &[0; 100]).unwrap();
    assert_eq!(all_wrong, Confusion { tp: 0, fp: 100, fn_: 0, tn: 0 });
    assert_eq!((all_wrong.precision(), all_wrong.recall(), all_wrong.dice()), (0.0, 0.0, 0.0));
    assert!(matches!(confusion(&[0; 3], &[0; 4]), Err(Error::Dimension(_))));
}

#[test]
fn default_grid_and_sweep_shape() {
    let grid = default_thresholds();
    assert_eq!(grid.len(), 8);
    assert!((grid[0] - 0.1).abs() < 1e-12 && (grid[7] - 0.8).abs() < 1e-12);

    let mut r = ChaCha8Rng::seed_from_u64(3);
    let probs: Vec<Vec<f64>> = (0..5).map(|_| (0..64).map(|_| r.random_range(0.0..1.0)).collect()).collect();
    let gts: Vec<Vec<u8>> = probs.iter().map(|p| p.iter().map(|&v| u8::from(v + r.random_range(-0.3..0.3) > 0.5)).collect()).collect();
    let sweep = threshold_sweep(&probs, &gts, &grid).unwrap();
    assert_eq!(sweep.len(), 8);
    for w in sweep.windows(2) {
        assert!(w[1].recall <= w[0].recall);
    }
    for rep in &sweep {
        assert_eq!(rep.per_image.len(), 5);
        let mut pooled = Confusion::default();
        for m in &rep.per_image {
            pooled += m.confusion;
        }
        assert_eq!(pooled, rep.confusion);
        assert!(rep.recall_ci_halfwidth.is_some());
    }
    let single = threshold_sweep(&probs, &gts, &[0.3]).unwrap();
    assert_eq!(single.len(), 1);
    assert_eq!(single[0].threshold, 0.3);
}

#[test]
fn recall_interval_examples() {
    assert_eq!(recall_ci(&[0.8; 6], 0.95).unwrap(), 0.0);
    let r = [0.5, 0.7, 0.9, 0.6];
    let mean = 0.675;
    let s = (r.iter().map(|x: &f64| (x - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
    assert!((recall_ci(&r, 0.95).unwrap() - 1.96 * s / 2.0).abs() < 1e-12);
    assert!(matches!(recall_ci(&[0.5], 0.95), Err(Error::NotComputable(_))));
    assert!(matches!(recall_ci(&r, 0.42), Err(Error::Config(_))));
}

/// Reference AP: binarize at every distinct score with `>=`, pool confusions.
fn naive_ap(probs: &[Vec<f64>], gts: &[Vec<u8>]) -> f64 {
    let mut ts: Vec<f64> = probs.iter().flatten().copied().collect();
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    let mut points = Vec::new();
    for &t in &ts {
        let mut c = Confusion::default();
        for (p, g) in probs.iter().zip(gts) {
            let pred: Vec<u8> = p.iter().map(|&v| u8::from(v >= t)).collect();
            c += confusion(&pred, g).unwrap();
        }
        points.push((c.tp as f64 / (c.tp + c.fn_) as f64, c.tp as f64 / (c.tp + c.fp) as f64));
    }
    let mut prev = 0.0;
    let mut ap = 0.0;
    for (r, p) in points {
        ap += (r - prev) * p;
        prev = r;
    }
    ap
}

#[test]
fn pr_curve_and_ap_match_reference() {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let n_img = r.random_range(1..4);
        // Coarse scores force ties.
        let probs: Vec<Vec<f64>> = (0..n_img).map(|_| (0..25).map(|_| r.random_range(0..10) as f64 / 10.0).collect()).collect();
        let mut gts: Vec<Vec<u8>> = probs.iter().map(|p| p.iter().map(|&v| u8::from(r.random_bool(0.2 + 0.6 * v))).collect()).collect();
        gts[0][0] = 1;
        let pts = pr_curve(&probs, &gts).unwrap();
        for w in pts.windows(2) {
            assert!(w[1].recall >= w[0].recall);
            assert!(w[1].threshold < w[0].threshold);
        }
        assert_eq!(pts.last().unwrap().recall, 1.0);
        let ap = average_precision(&pts);
        assert!((ap - naive_ap(&probs, &gts)).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&ap));
    }
}

#[test]
fn pr_examples() {
    let probs = vec![vec![0.9, 0.8, 0.2, 0.1]];
    let gts = vec![vec![1u8, 1, 0, 0]];
    assert_eq!(average_precision(&pr_curve(&probs, &gts).unwrap()), 1.0);
    assert!(matches!(pr_curve(&probs, &[vec![0u8; 4]]), Err(Error::NotComputable(_))));

    let (t, achieved) = match_recall(&probs, &gts, 0.5).unwrap().unwrap();
    assert_eq!((t, achieved), (0.9, 0.5));
    let (_, achieved) = match_recall(&probs, &gts, 0.97).unwrap().unwrap();
    assert_eq!(achieved, 1.0);
    assert!(match_recall(&probs, &[vec![0u8; 4]], 0.5).unwrap().is_none());
}

fn uf_find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Union-find labelling over right/down neighbours.
fn uf_components(mask: &[u8], h: usize, w: usize) -> (usize, Vec<usize>) {
    let mut parent: Vec<usize> = (0..h * w).collect();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if mask[i] == 0 {
                continue;
            }
            for j in [(x + 1 < w).then(|| i + 1), (y + 1 < h).then(|| i + w)].into_iter().flatten() {
                if mask[j] != 0 {
                    let (a, b) = (uf_find(&mut parent, i), uf_find(&mut parent, j));
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut sizes = std::collections::BTreeMap::new();
    for i in (0..h * w).filter(|&i| mask[i] != 0) {
        *sizes.entry(uf_find(&mut parent, i)).or_insert(0usize) += 1;
    }
    let mut s: Vec<usize> = sizes.into_values().collect();
    s.sort_unstable();
    (s.len(), s)
}

#[test]
fn component_examples() {
    assert_eq!(connected_components(&[0; 9], 3, 3).count, 0);
    // Diagonal neighbours are separate under 4-connectivity.
    let diag = [1, 0, 0, 0, 1, 0, 0, 0, 1];
    assert_eq!(connected_components(&diag, 3, 3).sizes, vec![1, 1, 1]);
    let ring = [1, 1, 1, 1, 0, 1, 1, 1, 1];
    assert_eq!(connected_components(&ring, 3, 3).sizes, vec![8]);
    let checker: Vec<u8> = (0..16).map(|i| (((i / 4) + (i % 4)) % 2) as u8).collect();
    assert_eq!(connected_components(&checker, 4, 4).count, 8);
}

#[test]
fn components_match_union_find() {
    let mut r = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..2000 {
        let (h, w) = (r.random_range(1..20), r.random_range(1..20));
        let density = r.random_range(0.0..1.0);
        let mask: Vec<u8> = (0..h * w).map(|_| u8::from(r.random_bool(density))).collect();
        let got = connected_components(&mask, h, w);
        let mut sizes = got.sizes.clone();
        sizes.sort_unstable();
        assert_eq!((got.count, sizes), uf_components(&mask, h, w));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn metrics_are_bounded_and_consistent(pred in proptest::collection::vec(0u8..2, 36), gt in proptest::collection::vec(0u8..2, 36)) {
        let c = confusion(&pred, &gt).unwrap();
        prop_assert_eq!(c.total(), 36);
        for v in [c.precision(), c.recall(), c.dice(), c.iou(Class::Foreground), c.iou(Class::Background), c.miou()] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(c.miou(), 0.5 * (c.iou(Class::Foreground) + c.iou(Class::Background)));
        let swapped = confusion(&gt, &pred).unwrap();
        prop_assert_eq!(swapped.dice(), c.dice());
    }

    #[test]
    fn recall_is_non_increasing_in_threshold(probs in proptest::collection::vec(0.0f64..1.0, 30), gt in proptest::collection::vec(0u8..2, 30)) {
        let sweep = threshold_sweep(&[probs], &[gt], &default_thresholds()).unwrap();
        for w in sweep.windows(2) {
            prop_assert!(w[1].recall <= w[0].recall);
        }
    }
}
