//! Hand-written SVG; output depends only on the inputs, byte for byte.

use std::fmt::Write;

use super::{ConfusionMatrix, K};
use crate::error::{Error, Result};
use crate::signal::SleepStage;

const CELL: usize = 64;
const MARGIN: usize = 72;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Heatmap shaded by row-normalized counts, with the raw count in each cell.
pub fn confusion_svg(cm: &ConfusionMatrix, title: &str) -> String {
    let size = MARGIN + K * CELL + 16;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, size / 2, escape(title));
    for (i, stage) in SleepStage::ALL.iter().enumerate() {
        let c = MARGIN + i * CELL + CELL / 2;
        let _ = writeln!(s, r#"<text x="{c}" y="{}" text-anchor="middle">{}</text>"#, MARGIN - 8, stage.name());
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, MARGIN - 8, c + 4, stage.name());
    }
    let _ = writeln!(s, r#"<text x="{}" y="38" text-anchor="middle">predicted</text>"#, MARGIN + K * CELL / 2);
    let _ = writeln!(s, r#"<text x="14" y="{0}" text-anchor="middle" transform="rotate(-90 14 {0})">actual</text>"#, MARGIN + K * CELL / 2);
    for (i, row) in cm.counts.iter().enumerate() {
        let support = row.iter().sum::<u64>().max(1) as f64;
        for (j, &count) in row.iter().enumerate() {
            let frac = count as f64 / support;
            let shade = 255 - (frac * 200.0).round() as u8;
            let (x, y) = (MARGIN + j * CELL, MARGIN + i * CELL);
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({shade},{shade},255)" stroke="white"/>"#
            );
            let colour = if frac > 0.5 { "white" } else { "black" };
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" fill="{colour}">{count}</text>"#,
                x + CELL / 2,
                y + CELL / 2 + 4
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Conventional hypnogram row: wake on top, then REM, then N1 to N3.
fn level(stage: usize) -> usize {
    [0, 2, 3, 4, 1][stage]
}

/// True (black) and predicted (red) stage traces over epochs.
pub fn hypnogram_svg(truth: &[usize], pred: &[usize], title: &str) -> Result<String> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(Error::shape("hypnogram_svg", format!("{} true vs {} predicted stages", truth.len(), pred.len())));
    }
    if truth.iter().chain(pred).any(|&s| s >= K) {
        return Err(Error::invalid("hypnogram_svg", "stage index out of range"));
    }
    let n = truth.len();
    let (left, top, row_h, width) = (48.0, 32.0, 24.0, 800.0);
    let dx = width / n as f64;
    let height = top + row_h * (K as f64 - 1.0) + 32.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{height}" font-family="sans-serif" font-size="12">"#,
        left + width + 16.0
    );
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#, left + width / 2.0, escape(title));
    for stage in SleepStage::ALL {
        let y = top + row_h * level(stage.index()) as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, left - 6.0, y + 4.0, stage.name());
        let _ = writeln!(s, r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/>"##, left + width);
    }
    for (seq, colour, offset) in [(truth, "black", 0.0), (pred, "red", 3.0)] {
        let mut pts = String::new();
        for (t, &st) in seq.iter().enumerate() {
            let y = top + row_h * level(st) as f64 + offset;
            let _ = write!(pts, "{:.2},{y:.2} {:.2},{y:.2} ", left + t as f64 * dx, left + (t + 1) as f64 * dx);
        }
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{colour}" stroke-width="1.2" points="{}"/>"#, pts.trim_end());
    }
    s.push_str("</svg>\n");
    Ok(s)
}
