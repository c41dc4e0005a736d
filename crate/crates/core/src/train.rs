//! Mini-batch Adam training with early stopping.

use otdr_tensor::{Adam, BatchStats, ParamSet};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};
use crate::nn::BatchNorm;

/// A model whose weights and running statistics can be snapshotted.
pub trait Network {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn buffers(&self) -> &ParamSet;
    fn buffers_mut(&mut self) -> &mut ParamSet;
    /// Batch-norm layers in forward order; empty for models without any.
    fn batch_norms(&self) -> &[BatchNorm] {
        &[]
    }

    /// Folds the statistics of one training forward pass into the running averages.
    fn apply_batch_stats(&mut self, stats: &[BatchStats]) {
        let bns = self.batch_norms().to_vec();
        for (bn, s) in bns.iter().zip(stats) {
            bn.update(self.buffers_mut(), s);
        }
    }
}

/// What a training run optimizes. Implementations compute gradients into
/// the model's parameters for one batch and report the mean batch loss.
pub trait Objective<M: Network> {
    fn n_train(&self) -> usize;
    fn train_batch(&self, model: &mut M, batch: &[usize], rng: &mut ChaCha8Rng) -> Result<f64>;
    fn validation_loss(&self, model: &M) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOpts {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts {
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 40,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainOpts {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(invalid("batch size and epoch budget must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Zero-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

struct Snapshot {
    params: Vec<Vec<f64>>,
    buffers: Vec<Vec<f64>>,
}

fn snapshot<M: Network>(m: &M) -> Snapshot {
    let grab = |ps: &ParamSet| ps.iter().map(|p| p.value.data().to_vec()).collect();
    Snapshot {
        params: grab(m.params()),
        buffers: grab(m.buffers()),
    }
}

fn restore<M: Network>(m: &mut M, s: Snapshot) {
    for (p, v) in m.params_mut().iter_mut().zip(s.params) {
        p.value.data_mut().copy_from_slice(&v);
    }
    for (p, v) in m.buffers_mut().iter_mut().zip(s.buffers) {
        p.value.data_mut().copy_from_slice(&v);
    }
}

/// Runs epochs until the budget is spent or validation loss has not
/// improved for `patience` epochs, then restores the best weights.
///
/// Weights are rounded to float32 after every update so the kept model
/// survives a checkpoint round trip exactly.
pub fn fit<M: Network, O: Objective<M>>(model: &mut M, objective: &O, opts: &TrainOpts) -> Result<TrainLog> {
    opts.validate()?;
    let n = objective.n_train();
    if n == 0 {
        return Err(invalid("empty training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = Adam::new(opts.lr).with_f32_storage();
    model.params_mut().round_to_f32();
    model.buffers_mut().round_to_f32();

    let mut order: Vec<usize> = (0..n).collect();
    let mut epochs = Vec::new();
    let mut best = (f64::INFINITY, 0usize, snapshot(model));
    let mut stale = 0;
    let mut stopped_early = false;
    for epoch in 0..opts.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(opts.batch_size) {
            model.params_mut().zero_grad();
            let loss = objective.train_batch(model, batch, &mut rng)?;
            if !loss.is_finite() {
                return Err(CoreError::Diverged { epoch, loss });
            }
            adam.step(model.params_mut())?;
            model.buffers_mut().round_to_f32();
            total += loss * batch.len() as f64;
        }
        model.params_mut().zero_grad();
        let val_loss = objective.validation_loss(model)?;
        if !val_loss.is_finite() {
            return Err(CoreError::Diverged { epoch, loss: val_loss });
        }
        epochs.push(EpochLog {
            epoch,
            train_loss: total / n as f64,
            val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, epoch, snapshot(model));
            stale = 0;
        } else {
            stale += 1;
            if stale >= opts.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_val_loss, best_epoch, snap) = best;
    restore(model, snap);
    Ok(TrainLog {
        epochs,
        best_epoch,
        best_val_loss,
        stopped_early,
    })
}
