//! Layer bookkeeping shared by the denoisers and the fault network.
//!
//! Layers only hold parameter handles; weights live in a [`ParamSet`] and
//! running statistics in a second, non-trainable set called `buffers`.

use otdr_tensor::init::glorot_uniform;
use otdr_tensor::{BatchStats, BnMode, Graph, ParamId, ParamSet, Tensor, Var};
use rand::Rng;

use crate::error::Result;

/// Torch-style running-average weight for batch statistics.
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, n_in: usize, n_out: usize, rng: &mut R) -> Result<Self> {
        let w = ps.add(format!("{name}.w"), glorot_uniform(&[n_out, n_in], n_in, n_out, rng))?;
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[n_out]))?;
        Ok(Dense { w, b })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, x: Var) -> Result<Var> {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        Ok(g.dense(x, w, Some(b))?)
    }
}

/// Convolution with "same" padding, or its transpose when up-sampling.
#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub transposed: bool,
}

impl Conv {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        (c_in, c_out, kernel): (usize, usize, usize),
        stride: usize,
        transposed: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let shape = if transposed {
            [c_in, c_out, kernel]
        } else {
            [c_out, c_in, kernel]
        };
        let w = glorot_uniform(&shape, c_in * kernel, c_out * kernel, rng);
        let w = ps.add(format!("{name}.w"), w)?;
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[c_out]))?;
        Ok(Conv {
            w,
            b,
            stride,
            transposed,
        })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, x: Var) -> Result<Var> {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        let y = if self.transposed {
            g.conv1d_transpose(x, w, Some(b), self.stride)?
        } else {
            g.conv1d(x, w, Some(b), self.stride)?
        };
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

impl BatchNorm {
    pub fn new(ps: &mut ParamSet, buffers: &mut ParamSet, name: &str, channels: usize) -> Result<Self> {
        let gamma = ps.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0))?;
        let beta = ps.add(format!("{name}.beta"), Tensor::zeros(&[channels]))?;
        let mean = buffers.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]))?;
        let var = buffers.add(format!("{name}.running_var"), Tensor::full(&[channels], 1.0))?;
        Ok(BatchNorm {
            gamma,
            beta,
            mean,
            var,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        buffers: &ParamSet,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        let bn = match mode {
            Mode::Train => BnMode::Train { eps: BN_EPS },
            Mode::Eval => BnMode::Eval {
                mean: buffers.get(self.mean).value.data(),
                var: buffers.get(self.var).value.data(),
                eps: BN_EPS,
            },
        };
        Ok(g.batch_norm(x, gamma, beta, bn)?)
    }

    /// Folds one batch's statistics into the running averages.
    pub fn update(&self, buffers: &mut ParamSet, stats: &BatchStats) {
        for (id, batch) in [(self.mean, &stats.mean), (self.var, &stats.var)] {
            let t = &mut buffers.get_mut(id).value;
            for (r, b) in t.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
}

/// One LSTM direction with gate-packed weights.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl Lstm {
    /// Uniform `±1/sqrt(hidden)` initialization, forget-gate bias 1.
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, input: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let a = 1.0 / (hidden as f64).sqrt();
        let w_ih = ps.add(format!("{name}.w_ih"), Tensor::uniform(&[4 * hidden, input], -a, a, rng))?;
        let w_hh = ps.add(format!("{name}.w_hh"), Tensor::uniform(&[4 * hidden, hidden], -a, a, rng))?;
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].fill(1.0);
        let b = ps.add(format!("{name}.b"), Tensor::new(vec![4 * hidden], b)?)?;
        Ok(Lstm { w_ih, w_hh, b, hidden })
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamSet, x: Var, reverse: bool) -> Result<Var> {
        let w_ih = g.param(ps, self.w_ih);
        let w_hh = g.param(ps, self.w_hh);
        let b = g.param(ps, self.b);
        Ok(g.lstm(x, w_ih, w_hh, b, reverse)?)
    }
}

/// Rounds freshly initialized weights so float32 checkpoints are exact.
pub fn finalize_init(ps: &mut ParamSet, buffers: &mut ParamSet) {
    ps.round_to_f32();
    buffers.round_to_f32();
}
