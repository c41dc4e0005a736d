//! Classical denoisers and their per-SNR tuning.

pub mod butterworth;
pub mod reference;
pub mod wavelet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use butterworth::{butterworth_lowpass, IirFilter};
pub use wavelet::{wavelet_denoise, Extension, WaveletFamily, WaveletSpec};

use crate::error::{invalid, Result};
use crate::metrics::rmse;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassicalMethod {
    Butterworth,
    Wavelet,
}

impl ClassicalMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::Butterworth => "butterworth",
            Self::Wavelet => "wavelet",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassicalParams {
    Butterworth { cutoff_norm: f64 },
    Wavelet(WaveletSpec),
}

impl ClassicalParams {
    pub fn method(&self) -> ClassicalMethod {
        match self {
            Self::Butterworth { .. } => ClassicalMethod::Butterworth,
            Self::Wavelet(_) => ClassicalMethod::Wavelet,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        match *self {
            Self::Butterworth { cutoff_norm } => {
                butterworth_lowpass(x, &IirFilter::butterworth3(cutoff_norm)?)
            }
            Self::Wavelet(spec) => wavelet_denoise(x, spec),
        }
    }
}

/// Candidate points searched by [`tune_baseline`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneGrid {
    pub cutoffs: Vec<f64>,
    pub wavelets: Vec<WaveletSpec>,
}

impl TuneGrid {
    /// Cutoffs 0.01..=0.45 in steps of 0.02 and every admissible wavelet depth
    /// for windows of `signal_len` samples.
    pub fn standard(signal_len: usize) -> Self {
        let cutoffs = (0..23).map(|i| 0.01 + 0.02 * i as f64).collect();
        let wavelets = WaveletFamily::ALL
            .iter()
            .flat_map(|&family| {
                let max = wavelet::max_level(signal_len, family.filter_len());
                (1..=max).map(move |levels| WaveletSpec { family, levels })
            })
            .collect();
        TuneGrid { cutoffs, wavelets }
    }

    fn candidates(&self, method: ClassicalMethod) -> Vec<ClassicalParams> {
        match method {
            ClassicalMethod::Butterworth => self
                .cutoffs
                .iter()
                .map(|&cutoff_norm| ClassicalParams::Butterworth { cutoff_norm })
                .collect(),
            ClassicalMethod::Wavelet => {
                self.wavelets.iter().map(|&s| ClassicalParams::Wavelet(s)).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub params: ClassicalParams,
    pub mean_rmse: f64,
    /// Every grid point with its validation score, in grid order.
    pub scores: Vec<(ClassicalParams, f64)>,
}

/// Grid search minimizing mean RMSE against the clean references.
/// Ties keep the earliest grid point.
pub fn tune_baseline(
    method: ClassicalMethod,
    noisy: &[&[f64]],
    clean: &[&[f64]],
    grid: &TuneGrid,
) -> Result<TuneOutcome> {
    if noisy.is_empty() {
        return Err(invalid("cannot tune on an empty bucket"));
    }
    if noisy.len() != clean.len() {
        return Err(invalid("noisy and clean sets differ in size"));
    }
    let candidates = grid.candidates(method);
    if candidates.is_empty() {
        return Err(invalid(format!("empty {} grid", method.name())));
    }
    let scores = candidates
        .par_iter()
        .map(|p| {
            let mut total = 0.0;
            for (x, c) in noisy.iter().zip(clean) {
                total += rmse(c, &p.apply(x)?)?;
            }
            Ok((*p, total / noisy.len() as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, (_, s)) in scores.iter().enumerate() {
        if *s < scores[best].1 {
            best = i;
        }
    }
    Ok(TuneOutcome {
        params: scores[best].0,
        mean_rmse: scores[best].1,
        scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunedEntry {
    pub method: ClassicalMethod,
    pub snr_bucket: f64,
    pub params: ClassicalParams,
    pub validation_rmse: f64,
}

/// Winners per (method, bucket), as persisted next to the other artifacts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TunedBaselines {
    pub config_hash: String,
    pub entries: Vec<TunedEntry>,
}

impl TunedBaselines {
    pub fn get(&self, method: ClassicalMethod, snr_bucket: f64) -> Option<&TunedEntry> {
        self.entries
            .iter()
            .find(|e| e.method == method && (e.snr_bucket - snr_bucket).abs() < 1e-9)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let clean: Vec<Vec<f64>> = (0..6)
            .map(|k| (0..100).map(|i| 0.5 + 0.3 * ((i + k) as f64 * 0.05).sin()).collect())
            .collect();
        let noisy = clean
            .iter()
            .enumerate()
            .map(|(k, c)| {
                c.iter()
                    .enumerate()
                    .map(|(i, v)| v + 0.1 * (((i * 7919 + k * 104729) % 97) as f64 / 48.0 - 1.0))
                    .collect()
            })
            .collect();
        (noisy, clean)
    }

    fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(Vec::as_slice).collect()
    }

    #[test]
    fn standard_grid_shape() {
        let g = TuneGrid::standard(100);
        assert_eq!(g.cutoffs.len(), 23);
        assert!((g.cutoffs[22] - 0.45).abs() < 1e-12);
        // 5 + 4 + 2 + 3 admissible depths
        assert_eq!(g.wavelets.len(), 14);
    }

    #[test]
    fn one_point_grid_returns_that_point() {
        let (n, c) = fixture();
        let grid = TuneGrid { cutoffs: vec![0.17], wavelets: vec![] };
        let out = tune_baseline(ClassicalMethod::Butterworth, &refs(&n), &refs(&c), &grid).unwrap();
        assert_eq!(out.params, ClassicalParams::Butterworth { cutoff_norm: 0.17 });
    }

    #[test]
    fn winner_is_argmin_and_deterministic() {
        let (n, c) = fixture();
        let grid = TuneGrid::standard(100);
        for method in [ClassicalMethod::Butterworth, ClassicalMethod::Wavelet] {
            let a = tune_baseline(method, &refs(&n), &refs(&c), &grid).unwrap();
            let b = tune_baseline(method, &refs(&n), &refs(&c), &grid).unwrap();
            assert_eq!(a, b);
            assert!(a.scores.iter().all(|(_, s)| a.mean_rmse <= *s));
        }
    }

    #[test]
    fn empty_bucket_rejected() {
        let grid = TuneGrid::standard(100);
        assert!(tune_baseline(ClassicalMethod::Wavelet, &[], &[], &grid).is_err());
    }

    #[test]
    fn tuned_json_round_trip() {
        let t = TunedBaselines {
            config_hash: "abc".into(),
            entries: vec![TunedEntry {
                method: ClassicalMethod::Wavelet,
                snr_bucket: -3.0,
                params: ClassicalParams::Wavelet(WaveletSpec { family: WaveletFamily::Bior4_4, levels: 2 }),
                validation_rmse: 0.1,
            }],
        };
        let s = serde_json::to_string(&t).unwrap();
        let back: TunedBaselines = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
        assert!(back.get(ClassicalMethod::Wavelet, -3.0).is_some());
        assert!(back.get(ClassicalMethod::Butterworth, -3.0).is_none());
    }
}
