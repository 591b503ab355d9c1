//! Confusion matrices, agreement metrics and static report files.

mod plot;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use plot::{confusion_svg, hypnogram_svg};

use crate::error::{Error, Result};
use crate::signal::SleepStage;

const K: usize = SleepStage::COUNT;

/// Rows are actual stages, columns predicted stages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; K]; K],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        self.counts.iter().map(|r| r[class]).sum()
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().flatten().zip(other.counts.iter().flatten()) {
            *a += b;
        }
    }
}

/// Counts `(actual, predicted)` pairs of stage indices.
pub fn confusion(preds: &[usize], labels: &[usize]) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::shape("confusion", format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &a) in preds.iter().zip(labels) {
        if p >= K || a >= K {
            return Err(Error::invalid("confusion", format!("stage index out of range: actual {a}, predicted {p}")));
        }
        cm.counts[a][p] += 1;
    }
    Ok(cm)
}

/// Sums fold matrices before any metric is computed.
pub fn pooled(matrices: &[ConfusionMatrix]) -> ConfusionMatrix {
    let mut out = ConfusionMatrix::default();
    for m in matrices {
        out.add(m);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub mf1: f64,
    pub kappa: f64,
    pub per_class_f1: [f64; K],
    pub per_class_precision: [f64; K],
    pub per_class_recall: [f64; K],
    /// Chance agreement from the row and column marginals.
    pub p_e: f64,
}

/// `a / b`, or 0 when `b` is 0.
fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let n = cm.total() as f64;
    if n == 0.0 {
        return Err(Error::EmptyData("confusion matrix has no entries".into()));
    }
    let trace: u64 = (0..K).map(|i| cm.counts[i][i]).sum();
    let acc = trace as f64 / n;
    let mut f1 = [0.0; K];
    let mut precision = [0.0; K];
    let mut recall = [0.0; K];
    let mut p_e = 0.0;
    for c in 0..K {
        let tp = cm.counts[c][c] as f64;
        let (row, col) = (cm.support(c) as f64, cm.predicted(c) as f64);
        precision[c] = ratio(tp, col);
        recall[c] = ratio(tp, row);
        // 2TP / (2TP + FP + FN), equal to the harmonic mean of PR and RE
        f1[c] = ratio(2.0 * tp, row + col);
        p_e += row * col;
    }
    p_e /= n * n;
    let kappa = if p_e == 1.0 { if acc == 1.0 { 1.0 } else { 0.0 } } else { (acc - p_e) / (1.0 - p_e) };
    Ok(MetricsReport {
        acc,
        mf1: f1.iter().sum::<f64>() / K as f64,
        kappa,
        per_class_f1: f1,
        per_class_precision: precision,
        per_class_recall: recall,
        p_e,
    })
}

pub const METRICS_HEADER: &str = "fold,acc,mf1,kappa,f1_W,f1_N1,f1_N2,f1_N3,f1_REM";

pub fn metrics_csv_row(fold: &str, r: &MetricsReport) -> String {
    let mut fields = vec![fold.to_string(), r.acc.to_string(), r.mf1.to_string(), r.kappa.to_string()];
    fields.extend(r.per_class_f1.iter().map(|v| v.to_string()));
    fields.join(",")
}

/// `(fold, acc, mf1, kappa, per-class F1)` rows parsed from a metrics CSV.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<(String, f64, f64, f64, [f64; K])>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Csv(format!("metrics CSV header must be `{METRICS_HEADER}`")));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 + K {
                return Err(Error::Csv(format!("metrics row has {} fields: {line}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Csv(format!("bad number `{s}` in: {line}")));
            let mut f1 = [0.0; K];
            for (c, v) in f1.iter_mut().enumerate() {
                *v = num(f[4 + c])?;
            }
            Ok((f[0].to_string(), num(f[1])?, num(f[2])?, num(f[3])?, f1))
        })
        .collect()
}

pub fn confusion_csv(cm: &ConfusionMatrix) -> String {
    let names: Vec<&str> = SleepStage::ALL.iter().map(|s| s.name()).collect();
    let mut s = format!("actual\\predicted,{}\n", names.join(","));
    for (i, row) in cm.counts.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        s.push_str(&format!("{},{}\n", names[i], cells.join(",")));
    }
    s
}

pub fn parse_confusion_csv(text: &str) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::default();
    let rows: Vec<&str> = text.lines().skip(1).filter(|l| !l.is_empty()).collect();
    if rows.len() != K {
        return Err(Error::Csv(format!("confusion CSV needs {K} rows, found {}", rows.len())));
    }
    for (i, line) in rows.iter().enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != K + 1 {
            return Err(Error::Csv(format!("confusion row has {} fields: {line}", f.len())));
        }
        for j in 0..K {
            cm.counts[i][j] = f[j + 1].parse().map_err(|_| Error::Csv(format!("bad count `{}`", f[j + 1])))?;
        }
    }
    Ok(cm)
}

/// Scored predictions of one fold; the optional hypnogram is one test
/// subject's `(id, true stages, predicted stages)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub name: String,
    pub confusion: ConfusionMatrix,
    pub hypnogram: Option<(String, Vec<usize>, Vec<usize>)>,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    folds: Vec<FoldJson<'a>>,
    aggregate: FoldJson<'a>,
}

#[derive(Serialize)]
struct FoldJson<'a> {
    fold: &'a str,
    confusion: &'a ConfusionMatrix,
    metrics: &'a MetricsReport,
}

/// Writes `metrics.csv`, `metrics.json`, `confusion.csv` (pooled) and one
/// SVG heatmap and hypnogram per fold plus the pooled heatmap.
pub fn render_report(folds: &[FoldResult], out_dir: &Path) -> Result<MetricsReport> {
    if folds.is_empty() {
        return Err(Error::EmptyData("no fold results to report".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let write = |name: &str, text: &str| {
        let p = out_dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    let reports: Vec<MetricsReport> = folds.iter().map(|f| compute_metrics(&f.confusion)).collect::<Result<_>>()?;
    let agg_cm = pooled(&folds.iter().map(|f| f.confusion).collect::<Vec<_>>());
    let agg = compute_metrics(&agg_cm)?;

    let mut csv = format!("{METRICS_HEADER}\n");
    for (f, r) in folds.iter().zip(&reports) {
        csv.push_str(&metrics_csv_row(&f.name, r));
        csv.push('\n');
    }
    csv.push_str(&metrics_csv_row("aggregate", &agg));
    csv.push('\n');
    write("metrics.csv", &csv)?;
    write("confusion.csv", &confusion_csv(&agg_cm))?;

    let json = ReportJson {
        folds: folds
            .iter()
            .zip(&reports)
            .map(|(f, r)| FoldJson {
                fold: &f.name,
                confusion: &f.confusion,
                metrics: r,
            })
            .collect(),
        aggregate: FoldJson {
            fold: "aggregate",
            confusion: &agg_cm,
            metrics: &agg,
        },
    };
    write("metrics.json", &serde_json::to_string_pretty(&json)?)?;

    for f in folds {
        write(&format!("confusion_{}.svg", f.name), &confusion_svg(&f.confusion, &f.name))?;
        if let Some((id, truth, pred)) = &f.hypnogram {
            write(&format!("hypnogram_{}.svg", f.name), &hypnogram_svg(truth, pred, id)?)?;
        }
    }
    write("confusion_aggregate.svg", &confusion_svg(&agg_cm, "aggregate"))?;
    Ok(agg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair_lands_in_its_cell() {
        let cm = confusion(&[1], &[0]).unwrap();
        assert_eq!(cm.counts[0][1], 1);
        assert_eq!(cm.total(), 1);
        assert!(confusion(&[1, 2], &[0]).is_err());
        assert!(confusion(&[5], &[0]).is_err());
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let r = compute_metrics(&confusion(&labels, &labels).unwrap()).unwrap();
        assert_eq!((r.acc, r.mf1, r.kappa), (1.0, 1.0, 1.0));
        let r = compute_metrics(&confusion(&vec![2; 50], &labels).unwrap()).unwrap();
        assert!(r.kappa.abs() < 1e-15);
        assert!((r.p_e - r.acc).abs() < 1e-15);
        assert!(compute_metrics(&ConfusionMatrix::default()).is_err());
    }

    #[test]
    fn absent_class_scores_zero_f1() {
        let r = compute_metrics(&confusion(&[0, 1, 1], &[0, 1, 1]).unwrap()).unwrap();
        assert_eq!(r.per_class_f1, [1.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(r.mf1, 0.4);
    }

    #[test]
    fn confusion_csv_round_trips() {
        let cm = confusion(&[0, 1, 2, 3, 4, 4, 2], &[0, 1, 2, 3, 4, 0, 1]).unwrap();
        assert_eq!(parse_confusion_csv(&confusion_csv(&cm)).unwrap(), cm);
    }
}
