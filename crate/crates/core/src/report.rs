//! Text outputs: sweep tables, PR curves and training history, all with
//! fixed 6-decimal numbers so reruns are byte-identical.

use std::fmt::Write as _;

use crate::metrics::{MetricsReport, PrPoint};
use crate::trainer::EpochRecord;

fn f6(v: f64) -> String {
    format!("{v:.6}")
}

pub const SWEEP_HEADER: &str = "threshold,recall,recall_ci,precision,miou,dice";

pub fn sweep_csv(rows: &[MetricsReport]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let ci = r.recall_ci_halfwidth.map_or_else(|| "NA".to_string(), f6);
        writeln!(
            out,
            "{},{},{},{},{},{}",
            f6(r.threshold),
            f6(r.recall),
            ci,
            f6(r.precision),
            f6(r.miou),
            f6(r.dice)
        )
        .expect("writing to a String");
    }
    out
}

/// `recall,precision` rows followed by an `AP,<value>` line.
pub fn pr_csv(points: &[PrPoint], ap: f64) -> String {
    let mut out = String::from("recall,precision\n");
    for p in points {
        writeln!(out, "{},{}", f6(p.recall), f6(p.precision)).expect("writing to a String");
    }
    writeln!(out, "AP,{}", f6(ap)).expect("writing to a String");
    out
}

/// Standalone SVG line plot of precision against recall.
pub fn pr_svg(points: &[PrPoint], ap: f64) -> String {
    const SIZE: f64 = 400.0;
    const MARGIN: f64 = 50.0;
    let x = |r: f64| MARGIN + r * SIZE;
    let y = |p: f64| MARGIN + (1.0 - p) * SIZE;
    let full = SIZE + 2.0 * MARGIN;
    let mut coords = String::new();
    for (i, p) in points.iter().enumerate() {
        if i > 0 {
            coords.push(' ');
        }
        write!(coords, "{:.2},{:.2}", x(p.recall), y(p.precision)).expect("writing to a String");
    }
    let mut ticks = String::new();
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        writeln!(
            ticks,
            "  <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"middle\">{v:.1}</text>",
            x(v),
            MARGIN + SIZE + 16.0
        )
        .expect("writing to a String");
        writeln!(
            ticks,
            "  <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"end\">{v:.1}</text>",
            MARGIN - 6.0,
            y(v) + 4.0
        )
        .expect("writing to a String");
    }
    format!(
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{full}" height="{full}" viewBox="0 0 {full} {full}">
  <rect x="{m}" y="{m}" width="{s}" height="{s}" fill="none" stroke="black"/>
{ticks}  <text x="{cx}" y="{xl}" font-size="13" text-anchor="middle">Recall</text>
  <text x="14" y="{cx}" font-size="13" text-anchor="middle" transform="rotate(-90 14 {cx})">Precision</text>
  <text x="{cx}" y="30" font-size="14" text-anchor="middle">Precision-recall (AP = {ap:.3})</text>
  <polyline fill="none" stroke="steelblue" stroke-width="2" points="{coords}"/>
</svg>
"#,
        m = MARGIN,
        s = SIZE,
        cx = MARGIN + SIZE / 2.0,
        xl = MARGIN + SIZE + 36.0,
    )
}

pub const HISTORY_HEADER: &str =
    "epoch,train_loss,val_loss,train_precision,train_recall,val_precision,val_recall,lr,train_ce,train_dice,train_tv_term,train_tv_raw";

/// Everything in an [`EpochRecord`] except wall time, which varies between
/// otherwise identical runs.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in history {
        let c = &r.train_components;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{:e},{},{},{},{}",
            r.epoch,
            f6(r.train_loss),
            f6(r.val_loss),
            f6(r.train_precision),
            f6(r.train_recall),
            f6(r.val_precision),
            f6(r.val_recall),
            r.lr,
            f6(c.ce),
            f6(c.dice),
            f6(c.tv_term),
            f6(c.tv_raw)
        )
        .expect("writing to a String");
    }
    out
}

pub fn timing_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,wall_time_s\n");
    for r in history {
        writeln!(out, "{},{:.3}", r.epoch, r.wall_time).expect("writing to a String");
    }
    out
}
