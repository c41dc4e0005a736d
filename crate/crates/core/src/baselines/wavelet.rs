//! Discrete wavelet transform and universal-threshold shrinkage.
//!
//! Conventions follow PyWavelets: with [`Extension::Symmetric`] each level
//! reflects `L − 1` samples at both borders (edge sample repeated) and keeps
//! `floor((N + L − 1) / 2)` coefficients; [`Extension::Periodic`] wraps the
//! signal and halves its length, which makes the orthogonal banks exactly
//! energy preserving.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaveletFamily {
    Sym2,
    Sym3,
    Sym7,
    Bior4_4,
}

impl WaveletFamily {
    pub const ALL: [WaveletFamily; 4] = [Self::Sym2, Self::Sym3, Self::Sym7, Self::Bior4_4];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sym2 => "sym2",
            Self::Sym3 => "sym3",
            Self::Sym7 => "sym7",
            Self::Bior4_4 => "bior4.4",
        }
    }

    pub fn is_orthogonal(self) -> bool {
        !matches!(self, Self::Bior4_4)
    }

    pub fn filters(self) -> FilterBank {
        match self {
            Self::Sym2 => FilterBank::orthogonal(&SYM2),
            Self::Sym3 => FilterBank::orthogonal(&SYM3),
            Self::Sym7 => FilterBank::orthogonal(&SYM7),
            Self::Bior4_4 => FilterBank {
                dec_lo: BIOR44_DEC_LO.to_vec(),
                dec_hi: BIOR44_DEC_HI.to_vec(),
                rec_lo: BIOR44_REC_LO.to_vec(),
                rec_hi: BIOR44_REC_HI.to_vec(),
            },
        }
    }

    pub fn filter_len(self) -> usize {
        match self {
            Self::Sym2 => 4,
            Self::Sym3 => 6,
            Self::Sym7 => 14,
            Self::Bior4_4 => 10,
        }
    }
}

impl std::fmt::Display for WaveletFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

// Scaling filters of the least-asymmetric Daubechies (symlet) family and the
// CDF 9/7 ("bior4.4") pair, as tabulated by PyWavelets 1.x.
const SYM2: [f64; 4] = [
    -0.12940952255092145,
    0.22414386804185735,
    0.836516303737469,
    0.48296291314469025,
];
const SYM3: [f64; 6] = [
    0.035226291882100656,
    -0.08544127388224149,
    -0.13501102001039084,
    0.4598775021193313,
    0.8068915093133388,
    0.3326705529509569,
];
const SYM7: [f64; 14] = [
    0.002681814568257878,
    -0.0010473848886829163,
    -0.01263630340325193,
    0.03051551316596357,
    0.0678926935013727,
    -0.049552834937127255,
    0.017441255086855827,
    0.5361019170917628,
    0.767764317003164,
    0.2886296317515146,
    -0.14004724044296152,
    -0.10780823770381774,
    0.004010244871533663,
    0.010268176708511255,
];
const BIOR44_DEC_LO: [f64; 10] = [
    0.0,
    0.03782845550726404,
    -0.023849465019556843,
    -0.11062440441843718,
    0.37740285561283066,
    0.8526986790088938,
    0.37740285561283066,
    -0.11062440441843718,
    -0.023849465019556843,
    0.03782845550726404,
];
const BIOR44_DEC_HI: [f64; 10] = [
    0.0,
    -0.06453888262869706,
    0.04068941760916406,
    0.41809227322161724,
    -0.7884856164055829,
    0.41809227322161724,
    0.04068941760916406,
    -0.06453888262869706,
    0.0,
    0.0,
];
const BIOR44_REC_LO: [f64; 10] = [
    0.0,
    -0.06453888262869706,
    -0.04068941760916406,
    0.41809227322161724,
    0.7884856164055829,
    0.41809227322161724,
    -0.04068941760916406,
    -0.06453888262869706,
    0.0,
    0.0,
];
const BIOR44_REC_HI: [f64; 10] = [
    0.0,
    -0.03782845550726404,
    -0.023849465019556843,
    0.11062440441843718,
    0.37740285561283066,
    -0.8526986790088938,
    0.37740285561283066,
    0.11062440441843718,
    -0.023849465019556843,
    -0.03782845550726404,
];

#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub dec_lo: Vec<f64>,
    pub dec_hi: Vec<f64>,
    pub rec_lo: Vec<f64>,
    pub rec_hi: Vec<f64>,
}

impl FilterBank {
    /// Quadrature-mirror bank generated from an orthogonal scaling filter.
    fn orthogonal(dec_lo: &[f64]) -> Self {
        let rec_lo: Vec<f64> = dec_lo.iter().rev().copied().collect();
        let rec_hi: Vec<f64> = dec_lo
            .iter()
            .enumerate()
            .map(|(i, v)| if i % 2 == 0 { *v } else { -v })
            .collect();
        let dec_hi = rec_hi.iter().rev().copied().collect();
        FilterBank {
            dec_lo: dec_lo.to_vec(),
            dec_hi,
            rec_lo,
            rec_hi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extension {
    #[default]
    Symmetric,
    Periodic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WaveletSpec {
    pub family: WaveletFamily,
    pub levels: usize,
}

/// Deepest decomposition for which the coarsest level still spans more than
/// one filter length.
pub fn max_level(signal_len: usize, filter_len: usize) -> usize {
    if filter_len < 2 || signal_len < filter_len - 1 {
        return 0;
    }
    (signal_len as f64 / (filter_len - 1) as f64).log2().floor() as usize
}

/// Coefficients ordered coarsest first: `[cA_n, cD_n, …, cD_1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid {
    pub approx: Vec<f64>,
    /// Details from the coarsest level to the finest.
    pub details: Vec<Vec<f64>>,
    pub signal_len: usize,
}

impl Pyramid {
    pub fn energy(&self) -> f64 {
        self.approx
            .iter()
            .chain(self.details.iter().flatten())
            .map(|v| v * v)
            .sum()
    }
}

fn symmetric_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut k = i.rem_euclid(period);
    if k >= n {
        k = period - 1 - k;
    }
    k as usize
}

fn analyze(x: &[f64], lo: &[f64], hi: &[f64], ext: Extension) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = x.len();
    let l = lo.len();
    match ext {
        Extension::Symmetric => {
            let out = (n + l - 1) / 2;
            let mut a = vec![0.0; out];
            let mut d = vec![0.0; out];
            for k in 0..out {
                // full convolution of the padded signal, sampled at L + 2k
                let c = (2 * k + 1) as isize;
                for j in 0..l {
                    let v = x[symmetric_index(c - j as isize, n)];
                    a[k] += lo[j] * v;
                    d[k] += hi[j] * v;
                }
            }
            Ok((a, d))
        }
        Extension::Periodic => {
            if !n.is_multiple_of(2) {
                return Err(invalid("periodic extension needs an even length at every level"));
            }
            let out = n / 2;
            let mut a = vec![0.0; out];
            let mut d = vec![0.0; out];
            for k in 0..out {
                for j in 0..l {
                    let idx = (2 * k + l / 2) as isize - j as isize;
                    let v = x[idx.rem_euclid(n as isize) as usize];
                    a[k] += lo[j] * v;
                    d[k] += hi[j] * v;
                }
            }
            Ok((a, d))
        }
    }
}

fn synthesize(a: &[f64], d: &[f64], lo: &[f64], hi: &[f64], ext: Extension) -> Vec<f64> {
    let m = a.len();
    let l = lo.len();
    match ext {
        Extension::Symmetric => {
            let out = 2 * m + 2 - l;
            let mut x = vec![0.0; out];
            for (n, xn) in x.iter_mut().enumerate() {
                // upsampled convolution, shifted by L − 2
                let t = n + l - 2;
                for (k, (ak, dk)) in a.iter().zip(d).enumerate() {
                    if 2 * k <= t && t - 2 * k < l {
                        *xn += lo[t - 2 * k] * ak + hi[t - 2 * k] * dk;
                    }
                }
            }
            x
        }
        Extension::Periodic => {
            let n = 2 * m;
            let mut x = vec![0.0; n];
            for k in 0..m {
                for j in 0..l {
                    let idx = ((2 * k + l / 2) as isize - j as isize).rem_euclid(n as isize) as usize;
                    x[idx] += lo[l - 1 - j] * a[k] + hi[l - 1 - j] * d[k];
                }
            }
            x
        }
    }
}

pub fn dwt(x: &[f64], spec: WaveletSpec, ext: Extension) -> Result<Pyramid> {
    let bank = spec.family.filters();
    let max = max_level(x.len(), spec.family.filter_len());
    if spec.levels == 0 || spec.levels > max {
        return Err(invalid(format!(
            "{} levels of {} on {} samples (maximum {max})",
            spec.levels,
            spec.family,
            x.len()
        )));
    }
    let mut approx = x.to_vec();
    let mut details = Vec::with_capacity(spec.levels);
    for _ in 0..spec.levels {
        let (a, d) = analyze(&approx, &bank.dec_lo, &bank.dec_hi, ext)?;
        approx = a;
        details.push(d);
    }
    details.reverse();
    Ok(Pyramid {
        approx,
        details,
        signal_len: x.len(),
    })
}

pub fn idwt(p: &Pyramid, family: WaveletFamily, ext: Extension) -> Result<Vec<f64>> {
    let bank = family.filters();
    let mut a = p.approx.clone();
    for d in &p.details {
        // an odd-length level leaves one extra approximation coefficient
        if a.len() == d.len() + 1 {
            a.pop();
        }
        if a.len() != d.len() {
            return Err(invalid(format!(
                "coefficient lengths {} and {} do not match",
                a.len(),
                d.len()
            )));
        }
        a = synthesize(&a, d, &bank.rec_lo, &bank.rec_hi, ext);
    }
    a.truncate(p.signal_len);
    Ok(a)
}

fn median_abs(x: &[f64]) -> f64 {
    let mut v: Vec<f64> = x.iter().map(|a| a.abs()).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn soft_threshold(c: f64, t: f64) -> f64 {
    c.signum() * (c.abs() - t).max(0.0)
}

/// Universal threshold `σ·sqrt(2 ln N)` with `σ = median(|cD_1|) / 0.6745`.
pub fn universal_threshold(finest: &[f64], signal_len: usize) -> f64 {
    let sigma = median_abs(finest) / 0.6745;
    sigma * (2.0 * (signal_len as f64).ln()).sqrt()
}

/// Soft-thresholds every detail band and reconstructs.
pub fn wavelet_denoise(x: &[f64], spec: WaveletSpec) -> Result<Vec<f64>> {
    let mut p = dwt(x, spec, Extension::Symmetric)?;
    let finest = p.details.last().expect("at least one level");
    let t = universal_threshold(finest, x.len());
    for band in &mut p.details {
        for c in band.iter_mut() {
            *c = soft_threshold(*c, t);
        }
    }
    idwt(&p, spec.family, Extension::Symmetric)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe() -> Vec<f64> {
        (0..20).map(|i| (0.3 * i as f64).sin() + 0.1 * i as f64).collect()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < tol, "{x} vs {y}");
        }
    }

    // PyWavelets 1.8 wavedec(probe, 'sym3', mode='symmetric', level=2)
    #[test]
    fn sym3_matches_reference() {
        let p = dwt(&probe(), WaveletSpec { family: WaveletFamily::Sym3, levels: 2 }, Extension::Symmetric).unwrap();
        close(
            &p.approx,
            &[
                0.6261143044719824,
                1.508066767652007,
                0.3476010593999163,
                1.8757414178356517,
                3.129246134309313,
                2.0398938346219486,
                0.9883163498085197,
                2.539621961500558,
            ],
            1e-12,
        );
        close(
            &p.details[0],
            &[
                0.4742720484306779,
                -0.19138163664922334,
                0.25568136664705715,
                -0.07380569240371411,
                -0.15118069482021557,
                -0.05599572976354217,
                0.25708049291499857,
                -0.2409860523595436,
            ],
            1e-12,
        );
        assert_eq!(p.details[1].len(), 12);
        assert!((p.details[1][0] + 0.08148389547576101).abs() < 1e-12);
        assert!((p.details[1][11] + 0.07929667266362395).abs() < 1e-12);
    }

    #[test]
    fn bior_matches_reference() {
        let spec = WaveletSpec { family: WaveletFamily::Bior4_4, levels: 2 };
        // 20 samples allow only one level of a 10-tap bank
        assert!(dwt(&probe(), spec, Extension::Symmetric).is_err());
        let one = WaveletSpec { levels: 1, ..spec };
        let p = dwt(&probe(), one, Extension::Symmetric).unwrap();
        assert_eq!(p.approx.len(), 14);
        assert!((p.details[0][0] + 0.027061797905198415).abs() < 1e-12);
        assert!((p.details[0][13] - 0.0027087529766746804).abs() < 1e-12);
    }

    #[test]
    fn sym7_matches_reference() {
        // 20 samples are below the admissible depth, so call one stage directly
        let bank = WaveletFamily::Sym7.filters();
        let (a, d) = analyze(&probe(), &bank.dec_lo, &bank.dec_hi, Extension::Symmetric).unwrap();
        assert_eq!(a.len(), 16);
        assert!((a[0] - 2.1614512652611686).abs() < 1e-12);
        assert!((a[3] + 0.02217341857349756).abs() < 1e-12);
        assert!((a[15] - 0.7409896626779956).abs() < 1e-12);
        assert!((d[0] + 0.010358472643440704).abs() < 1e-12);
    }

    #[test]
    fn periodic_sym2_matches_reference() {
        let spec = WaveletSpec { family: WaveletFamily::Sym2, levels: 2 };
        let p = dwt(&probe(), spec, Extension::Periodic).unwrap();
        close(
            &p.approx,
            &[
                1.251165840639505,
                2.1315093169337307,
                3.084736589783514,
                1.8644304039278543,
                1.3038959590199475,
            ],
            1e-12,
        );
        close(
            &p.details[0],
            &[
                -0.4432859241942935,
                0.29337229706105566,
                0.10633120186974443,
                -0.21631242598075984,
                0.6954439579443402,
            ],
            1e-12,
        );
        assert!((p.details[1][9] - 0.798288049010691).abs() < 1e-12);
    }

    #[test]
    fn max_level_bound() {
        assert_eq!(max_level(100, 14), 2);
        assert_eq!(max_level(100, 4), 5);
        assert_eq!(max_level(100, 10), 3);
        assert_eq!(max_level(100, 6), 4);
        let spec = WaveletSpec { family: WaveletFamily::Sym7, levels: 3 };
        assert!(dwt(&[0.0; 100], spec, Extension::Symmetric).is_err());
    }

    #[test]
    fn constant_input_has_no_detail() {
        for family in WaveletFamily::ALL {
            let spec = WaveletSpec { family, levels: 2 };
            let p = dwt(&[0.7; 100], spec, Extension::Symmetric).unwrap();
            for band in &p.details {
                assert!(band.iter().all(|c| c.abs() < 1e-10), "{family}");
            }
        }
    }

    #[test]
    fn soft_threshold_shrinks() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
        assert_eq!(soft_threshold(0.5, 1.0), 0.0);
    }
}
