//! Finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::ParamSet;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor of the relative error, so entries whose true
    /// gradient is zero are judged by absolute error instead.
    pub floor: f64,
    /// Checks at most this many randomly chosen entries per parameter.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    /// Set when the loss or any gradient was NaN or infinite.
    pub non_finite: bool,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        !self.non_finite && self.max_rel_error < tolerance
    }
}

/// Relative discrepancy between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the gradients that `loss` produces for every trainable
/// parameter against central finite differences.
///
/// `loss` must build a scalar from the parameters and be a pure function of
/// their values.
pub fn grad_check<F>(params: &mut ParamSet, loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamSet) -> Result<Var>,
{
    let eval = |params: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(&mut g, params)?;
        Ok(g.value(l).item())
    };

    params.zero_grad();
    let mut g = Graph::new();
    let l = loss(&mut g, params)?;
    let mut non_finite = !g.value(l).item().is_finite();
    g.backward(l, params)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = Vec::new();
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        if !params.get(id).requires_grad {
            continue;
        }
        let n = params.get(id).value.numel();
        let analytic = match &params.get(id).grad {
            Some(t) => t.data().to_vec(),
            // unreachable from the loss: the true gradient is zero
            None => vec![0.0; n],
        };
        non_finite |= analytic.iter().any(|v| !v.is_finite());
        let entries: Vec<usize> = match opts.max_entries {
            Some(k) if k < n => {
                let mut e = sample(&mut rng, n, k).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        for &i in &entries {
            let orig = params.get(id).value.data()[i];
            params.get_mut(id).value.data_mut()[i] = orig + opts.step;
            let up = eval(params)?;
            params.get_mut(id).value.data_mut()[i] = orig - opts.step;
            let down = eval(params)?;
            params.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            if !numeric.is_finite() {
                non_finite = true;
                continue;
            }
            worst = worst.max(relative_error(analytic[i], numeric, opts.floor));
        }
        report.push(ParamCheck {
            name: params.get(id).name.clone(),
            checked: entries.len(),
            max_rel_error: worst,
        });
    }
    params.zero_grad();
    let max_rel_error = report.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params: report,
        max_rel_error,
        non_finite,
    })
}
