//! Trace-level denoising and fault analysis.
//!
//! Training windows are scaled by the maximum of their clean samples, which
//! is unknown in the field. Here the scale is estimated from the noisy
//! window by a short moving average and, when an autoencoder is available,
//! refined so its output peaks at one.

use serde::{Deserialize, Serialize};

use crate::dataset::{window_starts, EventClass, WindowOpts};
use crate::dcae::Dcae;
use crate::denoiser::{predict, Denoiser, Windows};
use crate::error::{invalid, Result};
use crate::faultnet::{FaultNet, FaultPrediction};
use crate::sim::Trace;

const SMOOTH: usize = 6;
const REFINE_ROUNDS: usize = 2;

/// Largest value of a moving average over `SMOOTH` samples.
pub fn estimate_scale(noisy: &[f64]) -> f64 {
    let w = SMOOTH.min(noisy.len()).max(1);
    let mut sum: f64 = noisy[..w].iter().sum();
    let mut best = sum;
    for i in w..noisy.len() {
        sum += noisy[i] - noisy[i - w];
        best = best.max(sum);
    }
    (best / w as f64).max(1e-12)
}

/// Scale estimate of every window, refined through `dcae` when given.
fn window_scales<M: Denoiser + ?Sized>(model: Option<&M>, windows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut scales: Vec<f64> = windows.iter().map(|w| estimate_scale(w)).collect();
    let Some(model) = model else {
        return Ok(scales);
    };
    let len = model.window_len();
    for _ in 0..REFINE_ROUNDS {
        let flat = scaled(windows, &scales);
        let out = predict(model, Windows::new(&flat, len)?)?;
        for (s, y) in scales.iter_mut().zip(out.chunks(len)) {
            let peak = y.iter().copied().fold(f64::MIN, f64::max);
            *s *= peak.clamp(0.25, 4.0);
        }
    }
    Ok(scales)
}

fn scaled(windows: &[Vec<f64>], scales: &[f64]) -> Vec<f64> {
    windows
        .iter()
        .zip(scales)
        .flat_map(|(w, s)| w.iter().map(move |v| v / s))
        .collect()
}

/// Window starts with stride `stride`, plus a right-aligned window when the
/// stride leaves a tail uncovered.
fn covering_starts(n: usize, len: usize, stride: usize) -> Vec<usize> {
    let mut starts = window_starts(n, WindowOpts { len, stride });
    if let Some(&last) = starts.last() {
        if last + len < n {
            starts.push(n - len);
        }
    }
    starts
}

/// Denoises a whole trace window by window, clamping each window to `[0, 1]`
/// before undoing its scale, and averages overlaps.
pub fn denoise_trace<M: Denoiser + ?Sized>(model: &M, trace: &Trace, stride: usize) -> Result<Trace> {
    let len = model.window_len();
    let n = trace.samples.len();
    if n < len {
        return Err(invalid(format!("trace of {n} samples is shorter than one window ({len})")));
    }
    if stride == 0 || stride > len {
        return Err(invalid(format!("stride {stride} must be within 1..={len}")));
    }
    let starts = covering_starts(n, len, stride);
    let windows: Vec<Vec<f64>> = starts.iter().map(|&s| trace.samples[s..s + len].to_vec()).collect();
    let scales = window_scales(Some(model), &windows)?;
    let mut den = predict(model, Windows::new(&scaled(&windows, &scales), len)?)?;
    for v in &mut den {
        *v = v.clamp(0.0, 1.0);
    }
    let mut acc = vec![0.0; n];
    let mut hits = vec![0u32; n];
    for ((start, y), s) in starts.iter().zip(den.chunks(len)).zip(&scales) {
        for (k, v) in y.iter().enumerate() {
            acc[start + k] += v * s;
            hits[start + k] += 1;
        }
    }
    let samples = acc.iter().zip(&hits).map(|(a, h)| a / *h as f64).collect();
    Ok(Trace {
        samples,
        ..trace.clone()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub window: usize,
    pub start: usize,
    pub prediction: FaultPrediction,
    pub position_m: f64,
}

/// JSON-lines record for one reported event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub window: usize,
    #[serde(rename = "type")]
    pub event_type: String,
    pub type_conf: f64,
    pub cause: String,
    pub cause_conf: f64,
    pub position_m: f64,
}

impl From<&WindowReport> for PredictionRecord {
    fn from(r: &WindowReport) -> Self {
        PredictionRecord {
            window: r.window,
            event_type: r.prediction.event_type().name().to_string(),
            type_conf: r.prediction.type_confidence(),
            cause: r.prediction.cause().name().to_string(),
            cause_conf: r.prediction.cause_confidence(),
            position_m: r.position_m,
        }
    }
}

pub fn predictions_jsonl(reports: &[WindowReport]) -> Result<String> {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(&PredictionRecord::from(r))?);
        out.push('\n');
    }
    Ok(out)
}

/// Classifies every non-overlapping window of `trace`, denoising first when
/// `dcae` is given, and reports the windows predicted to hold an event.
pub fn analyze_trace(dcae: Option<&Dcae>, fault: &FaultNet, trace: &Trace) -> Result<Vec<WindowReport>> {
    let len = fault.arch().input_len;
    if let Some(m) = dcae {
        if m.arch().input_len != len {
            return Err(invalid("denoiser and fault network use different window lengths"));
        }
    }
    let n = trace.samples.len();
    if n < len {
        return Err(invalid(format!("trace of {n} samples is shorter than one window ({len})")));
    }
    let starts = window_starts(n, WindowOpts { len, stride: len });
    let windows: Vec<Vec<f64>> = starts.iter().map(|&s| trace.samples[s..s + len].to_vec()).collect();
    let scales = window_scales(dcae, &windows)?;
    let mut inputs = scaled(&windows, &scales);
    if let Some(m) = dcae {
        inputs = m.denoise_windows(&inputs)?;
    }
    let preds = fault.predict(Windows::new(&inputs, len)?)?;
    let span = (len - 1) as f64;
    Ok(starts
        .iter()
        .zip(preds)
        .enumerate()
        .filter(|(_, (_, p))| p.event_type() != EventClass::NoEvent)
        .map(|(window, (&start, prediction))| WindowReport {
            window,
            start,
            position_m: (start as f64 + prediction.position_norm * span) * trace.sample_spacing_m,
            prediction,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dcae::DcaeArch;

    #[test]
    fn scale_estimate_of_flat_window() {
        assert!((estimate_scale(&[0.4; 100]) - 0.4).abs() < 1e-12);
        assert!(estimate_scale(&[0.0; 10]) > 0.0);
    }

    #[test]
    fn covering_windows() {
        assert_eq!(covering_starts(300, 100, 100), vec![0, 100, 200]);
        assert_eq!(covering_starts(250, 100, 100), vec![0, 100, 150]);
        assert_eq!(covering_starts(200, 100, 50), vec![0, 50, 100]);
    }

    #[test]
    fn stitching_preserves_length() {
        let model = Dcae::new(DcaeArch::default(), 0).unwrap();
        let trace = Trace {
            samples: (0..437).map(|i| 1.0 - i as f64 / 500.0).collect(),
            sample_spacing_m: 0.8,
            events: vec![],
            is_clean: true,
            snr_db: None,
        };
        for stride in [100, 50, 33] {
            let out = denoise_trace(&model, &trace, stride).unwrap();
            assert_eq!(out.samples.len(), 437);
            assert!(out.samples.iter().all(|v| v.is_finite()));
        }
        let short = Trace {
            samples: vec![0.5; 60],
            ..trace.clone()
        };
        assert!(denoise_trace(&model, &short, 50).is_err());
    }
}
