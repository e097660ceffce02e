//! Per-image results, aggregate metrics and their JSON/CSV renderings.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::analysis::csv_error;
use crate::certify::{CertifyResult, DetectionOutcome};
use crate::error::{Error, Result};
use crate::windows::Window;

/// Everything measured on one test image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub image_id: usize,
    pub true_label: usize,
    pub certify: CertifyResult,
    pub benign: DetectionOutcome,
    /// Detection on the patched image and the patch rectangle, when attacked.
    pub attacked: Option<(DetectionOutcome, Window)>,
    pub wall_ms: f64,
}

/// JSON line emitted per image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: usize,
    pub certified: bool,
    pub outcome: String,
    pub evaluated_count: usize,
    pub wall_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failing_window: Option<Window>,
}

impl From<&ImageResult> for ImageRecord {
    fn from(r: &ImageResult) -> Self {
        Self {
            image_id: r.image_id,
            certified: r.certify.certified && r.certify.pruned_label == r.true_label,
            outcome: r.benign.tag(),
            evaluated_count: r.certify.evaluated_count,
            wall_ms: r.wall_ms,
            failing_window: r.certify.failing_window,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Benign detection returns the true label without alert.
    pub clean_acc: f64,
    /// Certified and the pruned prediction is correct.
    pub certified_acc: f64,
    /// Patched detection returns the true label without alert.
    pub attacked_acc: Option<f64>,
    /// Patched images ending at the true label, after recovery when alerted.
    pub recovered_acc: Option<f64>,
    /// Patched images alerted on a suspect touching the patch, averaged with
    /// benign images left unalerted.
    pub detection_rate: Option<f64>,
    pub avg_windows: f64,
    pub avg_wall_ms: f64,
}

fn recovered_label(o: &DetectionOutcome) -> Option<usize> {
    match o {
        DetectionOutcome::Benign { label } => Some(*label),
        DetectionOutcome::Alert { recovered_label, .. } => *recovered_label,
    }
}

pub fn metrics(results: &[ImageResult]) -> Result<Metrics> {
    if results.is_empty() {
        return Err(Error::data("no per-image results to aggregate"));
    }
    let n = results.len() as f64;
    let frac = |f: &dyn Fn(&ImageResult) -> bool| results.iter().filter(|r| f(r)).count() as f64 / n;
    let attacked: Vec<_> = results
        .iter()
        .filter_map(|r| r.attacked.as_ref().map(|a| (r, a)))
        .collect();
    let (attacked_acc, recovered_acc, detection_rate) = if attacked.is_empty() {
        (None, None, None)
    } else {
        let m = attacked.len() as f64;
        let count = |f: &dyn Fn(&ImageResult, &(DetectionOutcome, Window)) -> bool| {
            attacked.iter().filter(|(r, a)| f(r, a)).count() as f64
        };
        let acc = count(&|r, (o, _)| o.label() == Some(r.true_label)) / m;
        let rec = count(&|r, (o, _)| recovered_label(o) == Some(r.true_label)) / m;
        let caught = count(&|_, (o, w)| match o {
            DetectionOutcome::Alert { suspects, .. } => suspects.iter().any(|s| s.intersection_area(w) > 0),
            DetectionOutcome::Benign { .. } => false,
        });
        let quiet = count(&|r, _| !r.benign.is_alert());
        (Some(acc), Some(rec), Some((caught + quiet) / (2.0 * m)))
    };
    Ok(Metrics {
        clean_acc: frac(&|r| r.benign.label() == Some(r.true_label)),
        certified_acc: frac(&|r| r.certify.certified && r.certify.pruned_label == r.true_label),
        attacked_acc,
        recovered_acc,
        detection_rate,
        avg_windows: results.iter().map(|r| r.certify.evaluated_count as f64).sum::<f64>() / n,
        avg_wall_ms: results.iter().map(|r| r.wall_ms).sum::<f64>() / n,
    })
}

impl Metrics {
    /// `(name, value)` pairs in report order; absent metrics are omitted.
    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        let mut v = vec![("clean_acc", self.clean_acc), ("certified_acc", self.certified_acc)];
        if let Some(x) = self.attacked_acc {
            v.push(("attacked_acc", x));
        }
        if let Some(x) = self.recovered_acc {
            v.push(("recovered_acc", x));
        }
        if let Some(x) = self.detection_rate {
            v.push(("detection_rate", x));
        }
        v.push(("avg_windows", self.avg_windows));
        v
    }

    /// One-line human summary, `clean=…, certified=…`.
    pub fn summary(&self) -> String {
        let mut s = format!("clean={:.4}, certified={:.4}", self.clean_acc, self.certified_acc);
        if let (Some(a), Some(r)) = (self.attacked_acc, self.recovered_acc) {
            s.push_str(&format!(", attacked={a:.4}, recovered={r:.4}"));
        }
        if let Some(d) = self.detection_rate {
            s.push_str(&format!(", detection={d:.4}"));
        }
        s.push_str(&format!(", avg_windows={:.2}", self.avg_windows));
        s
    }
}

/// A single aggregate row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: String,
    pub value: f64,
    pub config_fingerprint: String,
    pub wall_ms: f64,
}

/// Aggregate CSV: header `metric,value,config_fingerprint,wall_ms`.
pub fn write_aggregate_csv<W: Write>(rows: &[ReportRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["metric", "value", "config_fingerprint", "wall_ms"])
        .map_err(csv_error)?;
    for r in rows {
        w.write_record([
            r.metric.clone(),
            format!("{:.6}", r.value),
            r.config_fingerprint.clone(),
            format!("{:.3}", r.wall_ms),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-image CSV without timing columns, byte-stable across identical runs.
pub fn write_image_csv<W: Write>(results: &[ImageResult], fingerprint: &str, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "image_id",
        "true_label",
        "pruned_label",
        "certified",
        "evaluated_count",
        "outcome",
        "attacked_outcome",
        "config_fingerprint",
    ])
    .map_err(csv_error)?;
    for r in results {
        let attacked = r.attacked.as_ref().map(|(o, _)| o.tag()).unwrap_or_default();
        w.write_record([
            r.image_id.to_string(),
            r.true_label.to_string(),
            r.certify.pruned_label.to_string(),
            ImageRecord::from(r).certified.to_string(),
            r.certify.evaluated_count.to_string(),
            r.benign.tag(),
            attacked,
            fingerprint.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Newline-delimited JSON records.
pub fn write_json_records<W: Write>(results: &[ImageResult], mut out: W) -> Result<()> {
    for r in results {
        let line = serde_json::to_string(&ImageRecord::from(r)).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Aggregate rows for `metrics` under one fingerprint and total wall time.
pub fn metric_rows(m: &Metrics, fingerprint: &str, wall_ms: f64) -> Vec<ReportRow> {
    m.rows()
        .into_iter()
        .map(|(name, value)| ReportRow {
            metric: name.to_string(),
            value,
            config_fingerprint: fingerprint.to_string(),
            wall_ms,
        })
        .collect()
}
