use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::param::ParamSet;

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with bias correction.
///
/// Moment buffers are keyed by parameter name, so an optimizer can follow a
/// model across checkpoint reloads. With `store_f32` set, every updated
/// weight is rounded to the nearest `f32` so the in-memory model and its
/// 32-bit checkpoint agree exactly.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub store_f32: bool,
    t: u64,
    state: HashMap<String, Moments>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            store_f32: false,
            t: 0,
            state: HashMap::new(),
        }
    }

    pub fn with_f32_storage(mut self) -> Self {
        self.store_f32 = true;
        self
    }

    /// Number of steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to every trainable parameter.
    ///
    /// All gradients are checked before anything is modified, so a missing
    /// gradient leaves both the parameters and the optimizer state untouched.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.requires_grad && p.grad.is_none()) {
            return Err(TensorError::MissingGrad(p.name.clone()));
        }
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for p in params.iter_mut().filter(|p| p.requires_grad) {
            let g = p.grad.as_ref().expect("checked above").data();
            let n = g.len();
            let st = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let w = p.value.data_mut();
            for i in 0..n {
                st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * g[i];
                st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                w[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                if self.store_f32 {
                    w[i] = w[i] as f32 as f64;
                }
            }
        }
        Ok(())
    }
}
