//! Third-order Butterworth low-pass filter with zero-phase application.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IirFilter {
    pub b: [f64; 4],
    pub a: [f64; 4],
    /// Cutoff as a fraction of the sampling rate.
    pub cutoff_norm: f64,
}

impl IirFilter {
    /// Designs the analog prototype at the prewarped cutoff and maps it to
    /// the z-plane with the bilinear transform (sample period 1).
    pub fn butterworth3(cutoff_norm: f64) -> Result<Self> {
        if !(cutoff_norm > 0.0 && cutoff_norm < 0.5) {
            return Err(invalid(format!("cutoff {cutoff_norm} outside (0, 0.5)")));
        }
        let w = 2.0 * (std::f64::consts::PI * cutoff_norm).tan();
        // H(s) = w³ / ((s + w)(s² + w s + w²)) with s = 2(1 − z⁻¹)/(1 + z⁻¹)
        let first = [2.0 + w, w - 2.0];
        let second = [4.0 + 2.0 * w + w * w, 2.0 * w * w - 8.0, 4.0 - 2.0 * w + w * w];
        let mut a = [0.0; 4];
        for (i, f) in first.iter().enumerate() {
            for (j, s) in second.iter().enumerate() {
                a[i + j] += f * s;
            }
        }
        let g = w * w * w;
        let mut b = [g, 3.0 * g, 3.0 * g, g];
        let a0 = a[0];
        for v in a.iter_mut().chain(b.iter_mut()) {
            *v /= a0;
        }
        let f = IirFilter { b, a, cutoff_norm };
        if !f.is_stable() {
            return Err(invalid(format!("unstable filter at cutoff {cutoff_norm}")));
        }
        Ok(f)
    }

    /// Jury-style check that every pole lies strictly inside the unit circle.
    pub fn is_stable(&self) -> bool {
        // Schur–Cohn recursion on the denominator polynomial
        let mut p: Vec<f64> = self.a.to_vec();
        while p.len() > 1 {
            let n = p.len() - 1;
            let k = p[n] / p[0];
            if !k.is_finite() || k.abs() >= 1.0 {
                return false;
            }
            p = (0..n).map(|i| (p[i] - k * p[n - i]) / (1.0 - k * k)).collect();
        }
        true
    }

    /// Magnitude response at normalized frequency `f` (cycles per sample).
    pub fn gain(&self, f: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * f;
        let eval = |c: &[f64; 4]| {
            let (mut re, mut im) = (0.0, 0.0);
            for (k, v) in c.iter().enumerate() {
                re += v * (w * k as f64).cos();
                im -= v * (w * k as f64).sin();
            }
            (re * re + im * im).sqrt()
        };
        eval(&self.b) / eval(&self.a)
    }

    /// Single causal pass (transposed direct form II) from state `zi`.
    pub fn lfilter(&self, x: &[f64], zi: [f64; 3]) -> Vec<f64> {
        let (b, a) = (&self.b, &self.a);
        let mut z = zi;
        x.iter()
            .map(|&xi| {
                let y = b[0] * xi + z[0];
                z[0] = b[1] * xi - a[1] * y + z[1];
                z[1] = b[2] * xi - a[2] * y + z[2];
                z[2] = b[3] * xi - a[3] * y;
                y
            })
            .collect()
    }

    /// Filter state after an infinitely long unit-step input.
    fn step_state(&self) -> [f64; 3] {
        let g = self.b.iter().sum::<f64>() / self.a.iter().sum::<f64>();
        let z2 = self.b[3] - self.a[3] * g;
        let z1 = self.b[2] - self.a[2] * g + z2;
        let z0 = self.b[1] - self.a[1] * g + z1;
        [z0, z1, z2]
    }

    /// Zero-phase forward-backward filtering.
    ///
    /// The signal is extended at both ends by odd reflection over 12 samples
    /// and each pass starts from the steady state of its first sample, so a
    /// constant input passes unchanged.
    pub fn filtfilt(&self, x: &[f64]) -> Result<Vec<f64>> {
        const PAD: usize = 12;
        if x.len() <= PAD {
            return Err(invalid(format!("filtfilt needs more than {PAD} samples")));
        }
        let n = x.len();
        let mut ext = Vec::with_capacity(n + 2 * PAD);
        ext.extend((1..=PAD).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=PAD).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

        let zi = self.step_state();
        let scaled = |s: f64| zi.map(|v| v * s);
        let mut y = self.lfilter(&ext, scaled(ext[0]));
        y.reverse();
        let mut y = self.lfilter(&y, scaled(y[0]));
        y.reverse();
        Ok(y[PAD..PAD + n].to_vec())
    }
}

pub fn butterworth_lowpass(x: &[f64], filter: &IirFilter) -> Result<Vec<f64>> {
    filter.filtfilt(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    // scipy.signal.butter(3, 0.2) and filtfilt on sin(0.3 i) + 0.1 i
    const B: [f64; 4] = [
        0.018098933007514428,
        0.05429679902254328,
        0.05429679902254328,
        0.018098933007514428,
    ];
    const A: [f64; 4] = [1.0, -1.7600418803431688, 1.182893262037831, -0.27805991763454646];
    const FILTFILT: [f64; 6] = [
        -0.0016371083397359529,
        0.39226924147420034,
        0.7595050397606742,
        1.0762673620578136,
        1.323376948217044,
        1.4878899179048735,
    ];

    #[test]
    fn coefficients_match_reference_design() {
        let f = IirFilter::butterworth3(0.1).unwrap();
        for i in 0..4 {
            assert!((f.b[i] - B[i]).abs() < 1e-12);
            assert!((f.a[i] - A[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn filtfilt_matches_reference() {
        let x: Vec<f64> = (0..30).map(|i| (0.3 * i as f64).sin() + 0.1 * i as f64).collect();
        let y = IirFilter::butterworth3(0.1).unwrap().filtfilt(&x).unwrap();
        for (a, b) in y.iter().zip(FILTFILT) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        assert!((y[29] - 3.544477678873309).abs() < 1e-10);
    }

    #[test]
    fn dc_passes_unchanged() {
        let f = IirFilter::butterworth3(0.07).unwrap();
        let y = f.filtfilt(&[0.42; 64]).unwrap();
        assert!(y.iter().all(|v| (v - 0.42).abs() < 1e-12));
    }

    #[test]
    fn cutoff_gain_is_minus_three_db() {
        for fc in [0.01, 0.05, 0.2, 0.45] {
            let g = IirFilter::butterworth3(fc).unwrap().gain(fc);
            assert!((g - 0.5f64.sqrt()).abs() < 0.01 * 0.5f64.sqrt(), "{fc}: {g}");
        }
    }

    #[test]
    fn sinusoid_at_cutoff_is_attenuated_by_gain_squared() {
        let fc = 0.1;
        let f = IirFilter::butterworth3(fc).unwrap();
        let n = 2000;
        let x: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * fc * i as f64).sin())
            .collect();
        let y = f.filtfilt(&x).unwrap();
        let rms = |v: &[f64]| (v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64).sqrt();
        let ratio = rms(&y[500..1500]) / rms(&x[500..1500]);
        assert!((ratio - 0.5).abs() < 0.01, "{ratio}");
    }

    #[test]
    fn nyquist_is_rejected() {
        let f = IirFilter::butterworth3(0.05).unwrap();
        let x: Vec<f64> = (0..200).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let y = f.filtfilt(&x).unwrap();
        // the odd extension adds a DC step whose transient has decayed by sample 40
        let peak = y[40..160].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak < 0.01, "{peak}");
    }

    #[test]
    fn invalid_cutoffs_are_rejected() {
        assert!(IirFilter::butterworth3(0.0).is_err());
        assert!(IirFilter::butterworth3(0.5).is_err());
        let mut f = IirFilter::butterworth3(0.1).unwrap();
        assert!(f.is_stable());
        f.a = [1.0, -3.0, 3.0, -1.0];
        assert!(!f.is_stable());
    }
}
