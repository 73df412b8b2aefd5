//! Plots and a text table from an evaluation run.
//!
//! Output is plain SVG and text with every number printed at fixed precision,
//! so the same inputs always give the same bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ovg_core::metrics::{PredictionRecord, SizeBucket, LARGE_AREA, SMALL_AREA};
use ovg_core::EvalReport;

use crate::{create_dir, write, CliError, Result, PREDICTIONS_FILE, REPORT_FILE};

pub const SCATTER_FILE: &str = "gt_size_scatter.svg";
pub const BARS_FILE: &str = "bucket_accuracy.svg";
pub const TABLE_FILE: &str = "accuracy_table.txt";

const SIZE: f64 = 480.0;
const MARGIN: f64 = 56.0;

fn bucket_color(b: SizeBucket) -> &'static str {
    match b {
        SizeBucket::Small => "#d95f02",
        SizeBucket::Middle => "#1b9e77",
        SizeBucket::Large => "#7570b3",
    }
}

/// Read `report.json` and the sibling `predictions.json`, then write the scatter
/// plot, the bucket bar chart and the accuracy table. Returns the written paths.
pub fn cmd_report(input: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let report_path = if input.is_dir() { input.join(REPORT_FILE) } else { input.to_path_buf() };
    let preds_path = report_path.with_file_name(PREDICTIONS_FILE);
    let report: EvalReport = read_json(&report_path)?;
    let preds: Vec<PredictionRecord> = read_json(&preds_path)?;
    if preds.len() != report.total_count {
        return Err(CliError::Input {
            path: preds_path,
            message: format!(
                "{} predictions but the report counts {} samples",
                preds.len(),
                report.total_count
            ),
        });
    }

    create_dir(out_dir)?;
    let outputs = [
        (SCATTER_FILE, size_scatter(&preds)),
        (BARS_FILE, bucket_bars(&preds)),
        (TABLE_FILE, accuracy_table(&report, &preds)),
    ];
    let mut written = Vec::with_capacity(outputs.len());
    for (name, text) in outputs {
        let path = out_dir.join(name);
        write(&path, &text)?;
        written.push(path);
    }
    Ok(written)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Input {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Hits and totals per bucket, in [`SizeBucket::ALL`] order.
pub fn bucket_counts(preds: &[PredictionRecord]) -> [(usize, usize); 3] {
    let mut counts = [(0, 0); 3];
    for p in preds {
        let i = SizeBucket::ALL.iter().position(|&b| b == p.bucket).expect("known bucket");
        counts[i].1 += 1;
        counts[i].0 += usize::from(p.correct);
    }
    counts
}

fn percent(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * hits as f64 / total as f64
    }
}

/// Accuracy per size bucket and overall, plus recall when the report has it.
pub fn accuracy_table(report: &EvalReport, preds: &[PredictionRecord]) -> String {
    let counts = bucket_counts(preds);
    let mut s = String::new();
    writeln!(s, "{:<8} {:>7} {:>7} {:>8}", "bucket", "correct", "total", "acc50").unwrap();
    for (b, (hits, total)) in SizeBucket::ALL.iter().zip(counts) {
        writeln!(s, "{:<8} {hits:>7} {total:>7} {:>8.2}", b.name(), percent(hits, total)).unwrap();
    }
    let hits: usize = counts.iter().map(|c| c.0).sum();
    writeln!(s, "{:<8} {hits:>7} {:>7} {:>8.2}", "overall", preds.len(), percent(hits, preds.len())).unwrap();

    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
    writeln!(s).unwrap();
    writeln!(s, "{:<8} {:>7} {:>7} {:>8}", "split", "R@1", "R@5", "R@10").unwrap();
    writeln!(
        s,
        "{:<8} {:>7} {:>7} {:>8}",
        "base",
        fmt(report.base_r1),
        fmt(report.base_r5),
        fmt(report.base_r10)
    )
    .unwrap();
    writeln!(
        s,
        "{:<8} {:>7} {:>7} {:>8}",
        "novel",
        fmt(report.novel_r1),
        fmt(report.novel_r5),
        fmt(report.novel_r10)
    )
    .unwrap();
    writeln!(s).unwrap();
    writeln!(s, "predictions clipped to image: {}", if report.clip_predictions { "yes" } else { "no" }).unwrap();
    s
}

fn svg_open(s: &mut String, title: &str) {
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{SIZE}" height="{SIZE}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="14">{title}</text>"#, SIZE / 2.0).unwrap();
}

fn axes(s: &mut String, x_label: &str, y_label: &str) {
    let (lo, hi) = (MARGIN, SIZE - MARGIN);
    writeln!(s, r#"<path d="M{lo:.1} {lo:.1} V{hi:.1} H{hi:.1}" fill="none" stroke="black"/>"#).unwrap();
    writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{x_label}</text>"#, SIZE / 2.0, SIZE - 16.0).unwrap();
    writeln!(
        s,
        r#"<text x="16" y="{0:.1}" text-anchor="middle" transform="rotate(-90 16 {0:.1})">{y_label}</text>"#,
        SIZE / 2.0
    )
    .unwrap();
}

/// Axis upper bound: a multiple of 32 pixels that covers `max`.
fn axis_limit(max: f64) -> f64 {
    ((max / 32.0).ceil() * 32.0).max(32.0)
}

/// Ground-truth box width against height, colored by size bucket, with the
/// bucket area boundaries drawn as curves.
pub fn size_scatter(preds: &[PredictionRecord]) -> String {
    let dims: Vec<(f64, f64, SizeBucket)> = preds
        .iter()
        .map(|p| (p.gt_bbox[2] - p.gt_bbox[0], p.gt_bbox[3] - p.gt_bbox[1], p.bucket))
        .collect();
    let max = dims.iter().fold(0.0_f64, |m, d| m.max(d.0).max(d.1));
    let limit = axis_limit(max);
    let span = SIZE - 2.0 * MARGIN;
    let px = |v: f64| MARGIN + span * v / limit;
    let py = |v: f64| SIZE - MARGIN - span * v / limit;

    let mut s = String::new();
    svg_open(&mut s, "Ground-truth box width and height");
    axes(&mut s, "width (px)", "height (px)");
    for i in 0..=4 {
        let v = limit * i as f64 / 4.0;
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.0}</text>"#, px(v), SIZE - MARGIN + 16.0).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.0}</text>"#, MARGIN - 6.0, py(v) + 4.0).unwrap();
    }
    for area in [SMALL_AREA, LARGE_AREA] {
        // w * h = area, drawn where both sides fit the axes
        let start = area / limit;
        if start >= limit {
            continue;
        }
        let mut d = String::new();
        for i in 0..=64 {
            let w = start + (limit - start) * i as f64 / 64.0;
            write!(d, "{}{:.1} {:.1} ", if i == 0 { "M" } else { "L" }, px(w), py(area / w)).unwrap();
        }
        writeln!(s, r##"<path d="{}" fill="none" stroke="#999" stroke-dasharray="4 3"/>"##, d.trim_end()).unwrap();
    }
    for (w, h, b) in &dims {
        writeln!(
            s,
            r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{}" fill-opacity="0.7"/>"#,
            px(*w),
            py(*h),
            bucket_color(*b)
        )
        .unwrap();
    }
    legend(&mut s);
    s.push_str("</svg>\n");
    s
}

fn legend(s: &mut String) {
    for (i, b) in SizeBucket::ALL.iter().enumerate() {
        let y = MARGIN + 4.0 + 16.0 * i as f64;
        let x = SIZE - MARGIN - 70.0;
        writeln!(s, r#"<rect x="{x:.1}" y="{y:.1}" width="10" height="10" fill="{}"/>"#, bucket_color(*b)).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, x + 16.0, y + 9.0, b.name()).unwrap();
    }
}

/// Acc50 per size bucket as bars labelled with their sample counts.
pub fn bucket_bars(preds: &[PredictionRecord]) -> String {
    let counts = bucket_counts(preds);
    let span = SIZE - 2.0 * MARGIN;
    let slot = span / 3.0;
    let mut s = String::new();
    svg_open(&mut s, "Acc50 by box size");
    axes(&mut s, "ground-truth size", "Acc50 (%)");
    for v in [0.0, 25.0, 50.0, 75.0, 100.0] {
        let y = SIZE - MARGIN - span * v / 100.0;
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.0}</text>"#, MARGIN - 6.0, y + 4.0).unwrap();
    }
    for (i, (b, (hits, total))) in SizeBucket::ALL.iter().zip(counts).enumerate() {
        let acc = percent(hits, total);
        let height = span * acc / 100.0;
        let x = MARGIN + slot * i as f64 + slot * 0.2;
        let top = SIZE - MARGIN - height;
        writeln!(
            s,
            r#"<rect x="{x:.1}" y="{top:.1}" width="{:.1}" height="{height:.1}" fill="{}"/>"#,
            slot * 0.6,
            bucket_color(*b)
        )
        .unwrap();
        let cx = x + slot * 0.3;
        writeln!(s, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{acc:.1}% (n={total})</text>"#, top - 6.0).unwrap();
        writeln!(s, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, SIZE - MARGIN + 16.0, b.name()).unwrap();
    }
    s.push_str("</svg>\n");
    s
}
