//! Denoising, classification and localization metrics.
//!
//! Every sequence metric is computed on normalized windows. An SNR whose
//! residual is exactly zero is reported as `f64::INFINITY` rather than as an
//! error, because a perfect reconstruction is a legitimate outcome.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() {
        return Err(invalid("metric on empty vectors"));
    }
    if a.len() != b.len() {
        return Err(invalid(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    Ok(())
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn residual_energy(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `10·log10(Σx² / Σ(y − x)²)` with `x` the clean reference.
pub fn snr_db(clean: &[f64], other: &[f64]) -> Result<f64> {
    check_pair(clean, other)?;
    let signal = energy(clean);
    if signal == 0.0 {
        return Err(invalid("SNR undefined for an all-zero reference"));
    }
    let noise = residual_energy(clean, other);
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (signal / noise).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrTriple {
    pub snr_in_db: f64,
    pub snr_out_db: f64,
    pub snr_imp_db: f64,
}

pub fn snr_metrics(clean: &[f64], noisy: &[f64], denoised: &[f64]) -> Result<SnrTriple> {
    let snr_in_db = snr_db(clean, noisy)?;
    let snr_out_db = snr_db(clean, denoised)?;
    Ok(SnrTriple {
        snr_in_db,
        snr_out_db,
        snr_imp_db: snr_out_db - snr_in_db,
    })
}

/// Mean squared difference.
pub fn reconstruction_mse(clean: &[f64], estimate: &[f64]) -> Result<f64> {
    check_pair(clean, estimate)?;
    Ok(residual_energy(clean, estimate) / clean.len() as f64)
}

pub fn rmse(clean: &[f64], estimate: &[f64]) -> Result<f64> {
    Ok(reconstruction_mse(clean, estimate)?.sqrt())
}

/// Percentage root-mean-square difference.
pub fn prd(clean: &[f64], estimate: &[f64]) -> Result<f64> {
    check_pair(clean, estimate)?;
    let signal = energy(clean);
    if signal == 0.0 {
        return Err(invalid("PRD undefined for a zero-energy reference"));
    }
    Ok(100.0 * (residual_energy(clean, estimate) / signal).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiseMetrics {
    pub snr_in_db: f64,
    pub snr_out_db: f64,
    pub snr_imp_db: f64,
    pub rmse: f64,
    pub prd_percent: f64,
    pub mse: f64,
}

pub fn denoise_metrics(clean: &[f64], noisy: &[f64], denoised: &[f64]) -> Result<DenoiseMetrics> {
    let snr = snr_metrics(clean, noisy, denoised)?;
    let mse = reconstruction_mse(clean, denoised)?;
    Ok(DenoiseMetrics {
        snr_in_db: snr.snr_in_db,
        snr_out_db: snr.snr_out_db,
        snr_imp_db: snr.snr_imp_db,
        rmse: mse.sqrt(),
        prd_percent: prd(clean, denoised)?,
        mse,
    })
}

// JSON has no NaN; serde_json writes non-finite floats as null.
fn null_as_nan<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

fn nulls_as_nan<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    let v = Vec::<Option<f64>>::deserialize(d)?;
    Ok(v.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
}

/// Running mean / standard deviation of one metric.
///
/// Non-finite values (perfect reconstructions) are counted separately and
/// left out of the moments.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(deserialize_with = "null_as_nan")]
    pub mean: f64,
    #[serde(deserialize_with = "null_as_nan")]
    pub std: f64,
    pub n: usize,
    pub n_non_finite: usize,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let mut n = 0usize;
        let mut n_non_finite = 0usize;
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for v in values {
            if !v.is_finite() {
                n_non_finite += 1;
                continue;
            }
            n += 1;
            let d = v - mean;
            mean += d / n as f64;
            m2 += d * (v - mean);
        }
        let std = if n > 1 { (m2 / (n - 1) as f64).sqrt() } else { 0.0 };
        Summary {
            mean: if n > 0 { mean } else { f64::NAN },
            std,
            n,
            n_non_finite,
        }
    }
}

/// Aggregates of [`DenoiseMetrics`] over a set of windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiseSummary {
    pub snr_in_db: Summary,
    pub snr_out_db: Summary,
    pub snr_imp_db: Summary,
    pub rmse: Summary,
    pub prd_percent: Summary,
    pub mse: Summary,
}

impl DenoiseSummary {
    pub fn of(items: &[DenoiseMetrics]) -> Self {
        let col = |f: fn(&DenoiseMetrics) -> f64| Summary::of(items.iter().map(f));
        DenoiseSummary {
            snr_in_db: col(|m| m.snr_in_db),
            snr_out_db: col(|m| m.snr_out_db),
            snr_imp_db: col(|m| m.snr_imp_db),
            rmse: col(|m| m.rmse),
            prd_percent: col(|m| m.prd_percent),
            mse: col(|m| m.mse),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<u64>>,
    /// Rows scaled to sum to one; empty rows stay zero.
    pub normalized: Vec<Vec<f64>>,
    pub accuracy: f64,
    /// NaN for classes absent from the labels.
    #[serde(deserialize_with = "nulls_as_nan")]
    pub per_class_recall: Vec<f64>,
}

impl ClassReport {
    /// Fraction of class `truth` predicted as `predicted`.
    pub fn rate(&self, truth: usize, predicted: usize) -> f64 {
        self.normalized[truth][predicted]
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }
}

pub fn classification_report(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<ClassReport> {
    if preds.is_empty() {
        return Err(invalid("classification report on empty input"));
    }
    if preds.len() != labels.len() {
        return Err(invalid(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut confusion = vec![vec![0u64; n_classes]; n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= n_classes || l >= n_classes {
            return Err(invalid(format!("class index out of range 0..{n_classes}")));
        }
        confusion[l][p] += 1;
    }
    let correct: u64 = (0..n_classes).map(|i| confusion[i][i]).sum();
    let normalized: Vec<Vec<f64>> = confusion
        .iter()
        .map(|row| {
            let s: u64 = row.iter().sum();
            row.iter()
                .map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 })
                .collect()
        })
        .collect();
    let per_class_recall = (0..n_classes)
        .map(|i| {
            let s: u64 = confusion[i].iter().sum();
            if s == 0 {
                f64::NAN
            } else {
                confusion[i][i] as f64 / s as f64
            }
        })
        .collect();
    Ok(ClassReport {
        accuracy: correct as f64 / preds.len() as f64,
        confusion,
        normalized,
        per_class_recall,
    })
}

/// Distance in meters between a predicted normalized position and the true
/// sample index inside a window of `window_len` samples.
pub fn localization_error_m(pred_position_norm: f64, true_index: usize, window_len: usize, sample_spacing_m: f64) -> f64 {
    let span = window_len.saturating_sub(1) as f64;
    (pred_position_norm * span - true_index as f64).abs() * sample_spacing_m
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Left and right fractional positions where `x` crosses `level` around `peak`.
fn half_crossings(x: &[f64], peak: usize, level: f64) -> Option<(f64, f64)> {
    let mut l = peak;
    while l > 0 && x[l - 1] > level {
        l -= 1;
    }
    if l == 0 {
        return None;
    }
    let left = (l - 1) as f64 + (level - x[l - 1]) / (x[l] - x[l - 1]);
    let mut r = peak;
    while r + 1 < x.len() && x[r + 1] > level {
        r += 1;
    }
    if r + 1 == x.len() {
        return None;
    }
    let right = r as f64 + (x[r] - level) / (x[r] - x[r + 1]);
    Some((left, right))
}

/// Full width at half maximum of the dominant peak, in meters.
///
/// The baseline is the median of the samples outside the peak region, where
/// the region extends one width beyond each half-maximum crossing.
pub fn fwhm_resolution(x: &[f64], sample_spacing_m: f64) -> Result<f64> {
    if x.len() < 3 {
        return Err(invalid("FWHM needs at least three samples"));
    }
    let peak = x
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("non-empty");
    let no_peak = || invalid("no peak above the baseline");

    let mut all = x.to_vec();
    let mut baseline = median(&mut all);
    let mut crossings = None;
    for _ in 0..2 {
        if x[peak] <= baseline {
            return Err(no_peak());
        }
        let level = baseline + 0.5 * (x[peak] - baseline);
        let (l, r) = half_crossings(x, peak, level).ok_or_else(no_peak)?;
        crossings = Some((l, r));
        let w = r - l;
        let lo = (l - w).floor().max(0.0) as usize;
        let hi = ((r + w).ceil() as usize).min(x.len() - 1);
        let mut outside: Vec<f64> = x
            .iter()
            .enumerate()
            .filter(|(i, _)| *i < lo || *i > hi)
            .map(|(_, v)| *v)
            .collect();
        if outside.is_empty() {
            break;
        }
        baseline = median(&mut outside);
    }
    if x[peak] <= baseline {
        return Err(no_peak());
    }
    let level = baseline + 0.5 * (x[peak] - baseline);
    let (l, r) = half_crossings(x, peak, level).or(crossings).ok_or_else(no_peak)?;
    Ok((r - l) * sample_spacing_m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snr_out_hand_example() {
        let x = [1.0, 1.0, 1.0, 1.0];
        let y = [1.1, 0.9, 1.1, 0.9];
        assert!((snr_db(&x, &y).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(snr_db(&x, &x).unwrap(), f64::INFINITY);
        assert!(snr_db(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn identity_denoiser_has_zero_improvement() {
        let x = [0.2, 0.9, 0.4];
        let n = [0.3, 0.7, 0.5];
        assert_eq!(snr_metrics(&x, &n, &n).unwrap().snr_imp_db, 0.0);
    }

    #[test]
    fn rmse_and_prd_examples() {
        assert!((rmse(&[1.0, 0.0], &[0.0, 0.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(rmse(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 0.0);
        assert_eq!(prd(&[0.3, 0.4], &[0.0, 0.0]).unwrap(), 100.0);
        assert_eq!(prd(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 0.0);
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(prd(&[0.0], &[1.0]).is_err());
    }

    #[test]
    fn classification_examples() {
        let labels = [0, 1, 2, 3, 0, 1, 2, 3];
        let r = classification_report(&labels, &labels, 4).unwrap();
        assert_eq!(r.accuracy, 1.0);
        let r = classification_report(&[0; 8], &labels, 4).unwrap();
        assert_eq!(r.accuracy, 0.25);
        assert_eq!(r.total(), 8);
        assert!(classification_report(&[], &[], 4).is_err());
    }

    #[test]
    fn row_normalization_reproduces_published_convention() {
        // 938 / 62 split of a no-event row
        let mut preds = vec![0; 938];
        preds.extend(vec![2; 62]);
        let labels = vec![0; 1000];
        let r = classification_report(&preds, &labels, 4).unwrap();
        assert_eq!(r.normalized[0], vec![0.938, 0.0, 0.062, 0.0]);
        assert!(r.per_class_recall[1].is_nan());
        assert_eq!(r.normalized[1], vec![0.0; 4]);
    }

    #[test]
    fn localization_examples() {
        assert_eq!(localization_error_m(34.0 / 99.0, 34, 100, 0.817), 0.0);
        let e = localization_error_m(39.0 / 99.0, 34, 100, 0.817);
        assert!((e - 4.085).abs() < 1e-9);
    }

    #[test]
    fn fwhm_of_triangle() {
        // half-height width of 6 samples on a flat baseline
        let mut x = vec![0.1; 40];
        for k in 0..=6 {
            let v = 0.1 + (6 - k) as f64 / 6.0;
            x[20 - k] = v;
            x[20 + k] = v;
        }
        let w = fwhm_resolution(&x, 0.8).unwrap();
        assert!((w - 6.0 * 0.8).abs() < 1e-12, "{w}");
    }

    #[test]
    fn fwhm_of_gaussian() {
        let sigma = 2.5;
        let x: Vec<f64> = (0..100)
            .map(|i| 0.2 + (-0.5 * ((i as f64 - 47.3) / sigma).powi(2)).exp())
            .collect();
        let w = fwhm_resolution(&x, 1.0).unwrap();
        let expected = 2.0 * (2.0 * 2f64.ln()).sqrt() * sigma;
        assert!((w / expected - 1.0).abs() < 0.02, "{w} vs {expected}");
    }

    #[test]
    fn fwhm_rejects_flat_or_edge_peaks() {
        assert!(fwhm_resolution(&[0.5; 20], 1.0).is_err());
        let ramp: Vec<f64> = (0..20).map(|i| i as f64).collect();
        assert!(fwhm_resolution(&ramp, 1.0).is_err());
    }

    #[test]
    fn summary_skips_non_finite() {
        let s = Summary::of([1.0, 3.0, f64::INFINITY]);
        assert_eq!(s.n, 2);
        assert_eq!(s.n_non_finite, 1);
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 2f64.sqrt()).abs() < 1e-15);
    }
}
