use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Result};
use crate::metrics::{ClassReport, DenoiseSummary, Summary};

/// Seed and configuration hash carried by every table row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseRow {
    pub snr_bucket: f64,
    pub method: String,
    #[serde(flatten)]
    pub provenance: Provenance,
    pub metrics: DenoiseSummary,
}

/// One point of the detection, diagnosis and localization curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub snr_bucket: f64,
    /// `combined` (autoencoder then clean-trained network) or `noisy_trained`.
    pub pipeline: String,
    #[serde(flatten)]
    pub provenance: Provenance,
    pub n: usize,
    pub detection_accuracy: f64,
    pub diagnosis_accuracy: f64,
    /// Over windows that hold an event.
    pub localization_error_m: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionEntry {
    pub snr_bucket: f64,
    pub pipeline: String,
    /// `event_type` or `cause`.
    pub task: String,
    pub labels: Vec<String>,
    #[serde(flatten)]
    pub provenance: Provenance,
    pub report: ClassReport,
}

/// Peak widths on a reflective fixture, averaged over noise draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionCheck {
    pub snr_db: f64,
    pub sample_spacing_m: f64,
    pub clean_fwhm_m: f64,
    pub noisy_fwhm_m: Summary,
    pub denoised_fwhm_m: Summary,
    #[serde(flatten)]
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `depth`, `kernel_size` or `input_len`.
    pub axis: String,
    pub depth: usize,
    pub kernel_size: usize,
    pub input_len: usize,
    #[serde(flatten)]
    pub provenance: Provenance,
    /// Test reconstruction MSE; absent when the point was skipped.
    pub mse: Option<Summary>,
    pub epochs: usize,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub rows: Vec<SweepRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub window_len: usize,
    pub snr_grid: Vec<f64>,
    /// Requested buckets without test windows.
    pub gaps: Vec<f64>,
    pub denoising: Vec<DenoiseRow>,
    pub detection: Vec<DetectionRow>,
    pub confusion: Vec<ConfusionEntry>,
    pub resolution: Option<ResolutionCheck>,
    pub sweep: Option<SweepReport>,
}

const DENOISE_METRICS: [&str; 6] = ["snr_in_db", "snr_out_db", "snr_imp_db", "rmse", "prd_percent", "mse"];

fn summary_fields(s: &DenoiseSummary) -> [Summary; 6] {
    [s.snr_in_db, s.snr_out_db, s.snr_imp_db, s.rmse, s.prd_percent, s.mse]
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn write_csv(path: &Path, header: Vec<String>, rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(io_err(path))
}

/// Denoising table: one row per (bucket, method).
pub fn write_denoising_csv(path: &Path, rows: &[DenoiseRow]) -> Result<()> {
    let mut header: Vec<String> = ["snr_bucket", "method", "seed", "config_hash", "n"].map(String::from).to_vec();
    for m in DENOISE_METRICS {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    let body = rows
        .iter()
        .map(|r| {
            let mut rec = vec![
                num(r.snr_bucket),
                r.method.clone(),
                r.provenance.seed.to_string(),
                r.provenance.config_hash.clone(),
                r.metrics.rmse.n.to_string(),
            ];
            for s in summary_fields(&r.metrics) {
                rec.push(num(s.mean));
                rec.push(num(s.std));
            }
            rec
        })
        .collect();
    write_csv(path, header, body)
}

pub fn write_detection_csv(path: &Path, rows: &[DetectionRow]) -> Result<()> {
    let header = [
        "snr_bucket",
        "pipeline",
        "seed",
        "config_hash",
        "n",
        "detection_accuracy",
        "diagnosis_accuracy",
        "localization_error_m_mean",
        "localization_error_m_std",
        "localization_n",
    ]
    .map(String::from)
    .to_vec();
    let body = rows
        .iter()
        .map(|r| {
            vec![
                num(r.snr_bucket),
                r.pipeline.clone(),
                r.provenance.seed.to_string(),
                r.provenance.config_hash.clone(),
                r.n.to_string(),
                num(r.detection_accuracy),
                num(r.diagnosis_accuracy),
                num(r.localization_error_m.mean),
                num(r.localization_error_m.std),
                r.localization_error_m.n.to_string(),
            ]
        })
        .collect();
    write_csv(path, header, body)
}

/// Confusion matrices in long form: one row per (matrix, truth, prediction).
pub fn write_confusion_csv(path: &Path, entries: &[ConfusionEntry]) -> Result<()> {
    let header = ["snr_bucket", "pipeline", "task", "seed", "config_hash", "truth", "predicted", "count", "rate"]
        .map(String::from)
        .to_vec();
    let mut body = Vec::new();
    for e in entries {
        for (t, row) in e.report.confusion.iter().enumerate() {
            for (p, count) in row.iter().enumerate() {
                body.push(vec![
                    num(e.snr_bucket),
                    e.pipeline.clone(),
                    e.task.clone(),
                    e.provenance.seed.to_string(),
                    e.provenance.config_hash.clone(),
                    e.labels[t].clone(),
                    e.labels[p].clone(),
                    count.to_string(),
                    num(e.report.rate(t, p)),
                ]);
            }
        }
    }
    write_csv(path, header, body)
}

pub fn write_sweep_csv(path: &Path, report: &SweepReport) -> Result<()> {
    let header = [
        "axis",
        "depth",
        "kernel_size",
        "input_len",
        "seed",
        "config_hash",
        "mse_mean",
        "mse_std",
        "n",
        "epochs",
        "note",
    ]
    .map(String::from)
    .to_vec();
    let body = report
        .rows
        .iter()
        .map(|r| {
            let (mean, std, n) = r
                .mse
                .map(|s| (num(s.mean), num(s.std), s.n.to_string()))
                .unwrap_or_default();
            vec![
                r.axis.clone(),
                r.depth.to_string(),
                r.kernel_size.to_string(),
                r.input_len.to_string(),
                r.provenance.seed.to_string(),
                r.provenance.config_hash.clone(),
                mean,
                std,
                n,
                r.epochs.to_string(),
                r.note.clone().unwrap_or_default(),
            ]
        })
        .collect();
    write_csv(path, header, body)
}

/// Writes the JSON mirror and every CSV table of `report` into `dir`.
pub fn emit_report(dir: &Path, report: &EvalReport) -> Result<()> {
    let json = dir.join("eval.json");
    std::fs::write(&json, serde_json::to_vec_pretty(report)?).map_err(io_err(&json))?;
    write_denoising_csv(&dir.join("eval_denoising.csv"), &report.denoising)?;
    write_detection_csv(&dir.join("eval_detection.csv"), &report.detection)?;
    write_confusion_csv(&dir.join("eval_confusion.csv"), &report.confusion)?;
    if let Some(s) = &report.sweep {
        write_sweep_csv(&dir.join("sweep.csv"), s)?;
    }
    Ok(())
}
