//! Window-to-window denoisers: common interface, training objective and
//! batched inference.

use otdr_tensor::{BatchStats, Graph, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::nn::Mode;
use crate::train::{Network, Objective};

/// Inference runs in chunks of this many windows.
const CHUNK: usize = 256;

pub trait Denoiser: Network + Sync {
    fn window_len(&self) -> usize;

    /// Maps `x[B, L]` to `[B, L]`. In train mode also returns the batch
    /// statistics of every batch-norm layer in forward order.
    fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<(Var, Vec<BatchStats>)>;
}

/// Flat row-major window matrix.
#[derive(Debug, Clone, Copy)]
pub struct Windows<'a> {
    pub data: &'a [f64],
    pub len: usize,
}

impl<'a> Windows<'a> {
    pub fn new(data: &'a [f64], len: usize) -> Result<Self> {
        if len == 0 || !data.len().is_multiple_of(len) {
            return Err(invalid(format!("{} values do not split into windows of {len}", data.len())));
        }
        Ok(Windows { data, len })
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.len
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.len..(i + 1) * self.len]
    }

    pub fn gather(&self, idx: &[usize]) -> Tensor {
        let mut out = Vec::with_capacity(idx.len() * self.len);
        for &i in idx {
            out.extend_from_slice(self.row(i));
        }
        Tensor::from_vec(out)
            .and_then(|t| t.reshape(vec![idx.len(), self.len]))
            .expect("sizes agree")
    }
}

/// Noisy inputs paired with clean targets.
#[derive(Debug, Clone, Copy)]
pub struct PairSet<'a> {
    pub noisy: Windows<'a>,
    pub clean: Windows<'a>,
}

impl<'a> PairSet<'a> {
    pub fn new(noisy: &'a [f64], clean: &'a [f64], len: usize) -> Result<Self> {
        if noisy.len() != clean.len() {
            return Err(invalid("noisy and clean sets differ in size"));
        }
        Ok(PairSet {
            noisy: Windows::new(noisy, len)?,
            clean: Windows::new(clean, len)?,
        })
    }

    pub fn count(&self) -> usize {
        self.noisy.count()
    }
}

/// Mean-squared reconstruction of clean windows from noisy ones.
pub struct DenoiseObjective<'a> {
    pub train: PairSet<'a>,
    pub val: PairSet<'a>,
}

impl<'a, M: Denoiser> Objective<M> for DenoiseObjective<'a> {
    fn n_train(&self) -> usize {
        self.train.count()
    }

    fn train_batch(&self, model: &mut M, batch: &[usize], _rng: &mut ChaCha8Rng) -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(self.train.noisy.gather(batch));
        let y = g.constant(self.train.clean.gather(batch));
        let (out, stats) = model.forward(&mut g, x, Mode::Train)?;
        let loss = g.mse(out, y)?;
        let value = g.value(loss).item();
        g.backward(loss, model.params_mut())?;
        model.apply_batch_stats(&stats);
        Ok(value)
    }

    fn validation_loss(&self, model: &M) -> Result<f64> {
        let pred = predict(model, self.val.noisy)?;
        let se: f64 = pred
            .iter()
            .zip(self.val.clean.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(se / pred.len() as f64)
    }
}

/// Eval-mode forward over every window; output has the input's layout.
pub fn predict<M: Denoiser + ?Sized>(model: &M, inputs: Windows<'_>) -> Result<Vec<f64>> {
    if inputs.len != model.window_len() {
        return Err(invalid(format!(
            "model expects windows of {}, got {}",
            model.window_len(),
            inputs.len
        )));
    }
    let n = inputs.count();
    let chunks: Vec<Vec<usize>> = (0..n)
        .collect::<Vec<_>>()
        .chunks(CHUNK)
        .map(<[usize]>::to_vec)
        .collect();
    let parts = chunks
        .par_iter()
        .map(|idx| {
            let mut g = Graph::new();
            let x = g.constant(inputs.gather(idx));
            let (y, _) = model.forward(&mut g, x, Mode::Eval)?;
            Ok(g.value(y).data().to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.concat())
}
