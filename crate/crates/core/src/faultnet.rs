//! Multitask bidirectional LSTM: event type, position and cause per window.

use otdr_tensor::{softmax_rows, Graph, ParamSet, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Cause, EventClass, LabeledSequence};
use crate::denoiser::Windows;
use crate::error::{invalid, Result};
use crate::nn::{finalize_init, Dense, Lstm};
use crate::train::{Network, Objective};

const CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaultNetArch {
    pub hidden: usize,
    /// Hidden widths of the type, position and cause heads.
    pub head_widths: (usize, usize, usize),
    pub n_types: usize,
    pub n_causes: usize,
    pub input_len: usize,
}

impl Default for FaultNetArch {
    fn default() -> Self {
        FaultNetArch {
            hidden: 32,
            head_widths: (16, 20, 16),
            n_types: 4,
            n_causes: 4,
            input_len: 100,
        }
    }
}

/// Weights of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub event_type: f64,
    pub position: f64,
    pub cause: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            event_type: 1.0,
            position: 1.0,
            cause: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultLabel {
    pub event_type: EventClass,
    pub position: Option<u8>,
    pub cause: Cause,
}

impl From<&LabeledSequence> for FaultLabel {
    fn from(s: &LabeledSequence) -> Self {
        FaultLabel {
            event_type: s.event_type,
            position: s.position,
            cause: s.cause,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultPrediction {
    pub type_probs: Vec<f64>,
    /// Event position as a fraction of the window, in `[0, 1]`.
    pub position_norm: f64,
    pub cause_probs: Vec<f64>,
}

fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

impl FaultPrediction {
    pub fn event_type(&self) -> EventClass {
        EventClass::from_index(argmax(&self.type_probs)).unwrap_or(EventClass::NoEvent)
    }

    pub fn cause(&self) -> Cause {
        Cause::from_index(argmax(&self.cause_probs)).unwrap_or(Cause::NoEvent)
    }

    pub fn type_confidence(&self) -> f64 {
        self.type_probs[argmax(&self.type_probs)]
    }

    pub fn cause_confidence(&self) -> f64 {
        self.cause_probs[argmax(&self.cause_probs)]
    }
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct FaultOutputs {
    pub type_logits: Var,
    /// Sigmoid position, shape `[B, 1]`.
    pub position: Var,
    pub cause_logits: Var,
    /// Concatenated final forward and backward states, `[B, 2·hidden]`.
    pub shared: Var,
}

/// One step of the LSTM recurrence assembled from elementary operations.
///
/// `x[B, I]`, `h, c[B, H]`, gate-packed weights in (input, forget, cell,
/// output) order. Returns the new `(h, c)`.
pub fn lstm_cell_step(
    g: &mut Graph,
    x: Var,
    (h, c): (Var, Var),
    w_ih: Var,
    w_hh: Var,
    b: Var,
) -> Result<(Var, Var)> {
    let hidden = g.shape(h)[1];
    if g.shape(w_hh) != [4 * hidden, hidden] {
        return Err(invalid(format!("w_hh {:?} for hidden size {hidden}", g.shape(w_hh))));
    }
    let zx = g.dense(x, w_ih, Some(b))?;
    let zh = g.dense(h, w_hh, None)?;
    let z = g.add(zx, zh)?;
    let gate = |g: &mut Graph, k: usize| g.slice_last(z, k * hidden, hidden);
    let (zi, zf, zg, zo) = (gate(g, 0)?, gate(g, 1)?, gate(g, 2)?, gate(g, 3)?);
    let i = g.sigmoid(zi);
    let f = g.sigmoid(zf);
    let cand = g.tanh(zg);
    let o = g.sigmoid(zo);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_new = g.add(keep, write)?;
    let squashed = g.tanh(c_new);
    let h_new = g.mul(o, squashed)?;
    Ok((h_new, c_new))
}

#[derive(Debug, Clone)]
pub struct FaultNet {
    arch: FaultNetArch,
    params: ParamSet,
    buffers: ParamSet,
    forward_lstm: Lstm,
    backward_lstm: Lstm,
    heads: [(Dense, Dense); 3],
}

impl FaultNet {
    pub fn new(arch: FaultNetArch, seed: u64) -> Result<Self> {
        if arch.hidden == 0 || arch.input_len == 0 || arch.n_types < 2 || arch.n_causes < 2 {
            return Err(invalid(format!("invalid fault-network architecture {arch:?}")));
        }
        let (wt, wp, wc) = arch.head_widths;
        if wt == 0 || wp == 0 || wc == 0 {
            return Err(invalid("head widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut buffers = ParamSet::new();
        let h = arch.hidden;
        let forward_lstm = Lstm::new(&mut params, "lstm_fwd", 1, h, &mut rng)?;
        let backward_lstm = Lstm::new(&mut params, "lstm_bwd", 1, h, &mut rng)?;
        let mut head = |name: &str, width: usize, out: usize| -> Result<(Dense, Dense)> {
            Ok((
                Dense::new(&mut params, &format!("{name}.hidden"), 2 * h, width, &mut rng)?,
                Dense::new(&mut params, &format!("{name}.out"), width, out, &mut rng)?,
            ))
        };
        let heads = [
            head("type", wt, arch.n_types)?,
            head("position", wp, 1)?,
            head("cause", wc, arch.n_causes)?,
        ];
        finalize_init(&mut params, &mut buffers);
        Ok(FaultNet {
            arch,
            params,
            buffers,
            forward_lstm,
            backward_lstm,
            heads,
        })
    }

    pub fn arch(&self) -> &FaultNetArch {
        &self.arch
    }

    /// Per-step outputs of both directions, `[B, T, 2·hidden]`.
    pub fn bilstm_forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (f, b) = self.directions(g, x)?;
        Ok(g.concat_last(&[f, b])?)
    }

    fn directions(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let f = self.forward_lstm.forward(g, &self.params, x, false)?;
        let b = self.backward_lstm.forward(g, &self.params, x, true)?;
        Ok((f, b))
    }

    /// Forward pass over `x[B, input_len]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<FaultOutputs> {
        let s = g.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.arch.input_len {
            return Err(invalid(format!(
                "fault network expects [batch, {}], got {s:?}",
                self.arch.input_len
            )));
        }
        let seq = g.reshape(x, &[s[0], s[1], 1])?;
        let (f, b) = self.directions(g, seq)?;
        let last = g.select_time(f, s[1] - 1)?;
        let first = g.select_time(b, 0)?;
        let shared = g.concat_last(&[last, first])?;
        let mut outs = Vec::with_capacity(3);
        for (hidden, out) in &self.heads {
            let z = hidden.forward(g, &self.params, shared)?;
            let z = g.elu(z);
            outs.push(out.forward(g, &self.params, z)?);
        }
        let position = g.sigmoid(outs[1]);
        Ok(FaultOutputs {
            type_logits: outs[0],
            position,
            cause_logits: outs[2],
            shared,
        })
    }

    fn run_chunks<T: Send>(
        &self,
        inputs: Windows<'_>,
        read: impl Fn(&Graph, &FaultOutputs, usize) -> T + Sync,
    ) -> Result<Vec<T>> {
        if inputs.len != self.arch.input_len {
            return Err(invalid(format!(
                "windows of {} samples, model expects {}",
                inputs.len, self.arch.input_len
            )));
        }
        let idx: Vec<usize> = (0..inputs.count()).collect();
        let parts = idx
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = Graph::new();
                let x = g.constant(inputs.gather(chunk));
                let o = self.forward(&mut g, x)?;
                Ok((0..chunk.len()).map(|r| read(&g, &o, r)).collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.into_iter().flatten().collect())
    }

    pub fn predict(&self, inputs: Windows<'_>) -> Result<Vec<FaultPrediction>> {
        let (nt, nc) = (self.arch.n_types, self.arch.n_causes);
        self.run_chunks(inputs, |g, o, r| {
            let t = &g.value(o.type_logits).data()[r * nt..(r + 1) * nt];
            let c = &g.value(o.cause_logits).data()[r * nc..(r + 1) * nc];
            FaultPrediction {
                type_probs: softmax_rows(t, nt),
                position_norm: g.value(o.position).data()[r],
                cause_probs: softmax_rows(c, nc),
            }
        })
    }

    /// The shared representation of every window, one row each.
    pub fn export_shared_features(&self, inputs: Windows<'_>) -> Result<Vec<Vec<f64>>> {
        let w = 2 * self.arch.hidden;
        self.run_chunks(inputs, |g, o, r| g.value(o.shared).data()[r * w..(r + 1) * w].to_vec())
    }
}

impl Network for FaultNet {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    fn buffers(&self) -> &ParamSet {
        &self.buffers
    }
    fn buffers_mut(&mut self) -> &mut ParamSet {
        &mut self.buffers
    }
}

/// Individual loss terms and their weighted total, as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct MultitaskLoss {
    pub total: Var,
    pub type_ce: Var,
    pub position_se: Var,
    pub cause_ce: Var,
}

/// Cross-entropy on type and cause plus squared position error, the latter
/// masked out for event-free windows.
pub fn multitask_loss(
    g: &mut Graph,
    out: &FaultOutputs,
    labels: &[FaultLabel],
    input_len: usize,
    w: LossWeights,
) -> Result<MultitaskLoss> {
    if [w.event_type, w.position, w.cause].iter().any(|v| *v < 0.0) {
        return Err(invalid("loss weights must be non-negative"));
    }
    let mut types = Vec::with_capacity(labels.len());
    let mut causes = Vec::with_capacity(labels.len());
    let mut target = Vec::with_capacity(labels.len());
    let mut mask = Vec::with_capacity(labels.len());
    for l in labels {
        match (l.event_type, l.position) {
            (EventClass::NoEvent, Some(_)) => {
                return Err(invalid("event-free window carries a position"));
            }
            (EventClass::NoEvent, None) => {
                target.push(0.0);
                mask.push(0.0);
            }
            (_, Some(p)) => {
                target.push(p as f64 / (input_len - 1).max(1) as f64);
                mask.push(1.0);
            }
            (_, None) => return Err(invalid("event window without a position")),
        }
        types.push(l.event_type.index());
        causes.push(l.cause.index());
    }
    let type_ce = g.softmax_cross_entropy(out.type_logits, &types)?;
    let position_se = g.masked_sq_error(out.position, &target, &mask)?;
    let cause_ce = g.softmax_cross_entropy(out.cause_logits, &causes)?;
    let a = g.scale(type_ce, w.event_type);
    let b = g.scale(position_se, w.position);
    let c = g.scale(cause_ce, w.cause);
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(MultitaskLoss {
        total,
        type_ce,
        position_se,
        cause_ce,
    })
}

/// Training data for [`FaultNet`]. With `remask` set, training inputs get
/// fresh random zeros in every batch at a rate drawn from that range.
pub struct FaultObjective<'a> {
    pub train_x: Windows<'a>,
    pub train_y: &'a [FaultLabel],
    pub val_x: Windows<'a>,
    pub val_y: &'a [FaultLabel],
    pub weights: LossWeights,
    pub remask: Option<(f64, f64)>,
}

fn remask(t: &mut Tensor, len: usize, (lo, hi): (f64, f64), rng: &mut ChaCha8Rng) {
    for row in t.data_mut().chunks_mut(len) {
        let p = if hi > lo { rng.random_range(lo..hi) } else { lo };
        for v in row {
            if rng.random_bool(p) {
                *v = 0.0;
            }
        }
    }
}

impl<'a> Objective<FaultNet> for FaultObjective<'a> {
    fn n_train(&self) -> usize {
        self.train_x.count()
    }

    fn train_batch(&self, model: &mut FaultNet, batch: &[usize], rng: &mut ChaCha8Rng) -> Result<f64> {
        let mut xb = self.train_x.gather(batch);
        if let Some(range) = self.remask {
            remask(&mut xb, self.train_x.len, range, rng);
        }
        let labels: Vec<FaultLabel> = batch.iter().map(|&i| self.train_y[i]).collect();
        let mut g = Graph::new();
        let x = g.constant(xb);
        let out = model.forward(&mut g, x)?;
        let loss = multitask_loss(&mut g, &out, &labels, model.arch.input_len, self.weights)?;
        let value = g.value(loss.total).item();
        g.backward(loss.total, model.params_mut())?;
        Ok(value)
    }

    fn validation_loss(&self, model: &FaultNet) -> Result<f64> {
        let idx: Vec<usize> = (0..self.val_x.count()).collect();
        if idx.is_empty() {
            return Err(invalid("empty validation set"));
        }
        let sums = idx
            .par_chunks(CHUNK)
            .map(|chunk| {
                let labels: Vec<FaultLabel> = chunk.iter().map(|&i| self.val_y[i]).collect();
                let mut g = Graph::new();
                let x = g.constant(self.val_x.gather(chunk));
                let out = model.forward(&mut g, x)?;
                let loss = multitask_loss(&mut g, &out, &labels, model.arch.input_len, self.weights)?;
                Ok(g.value(loss.total).item() * chunk.len() as f64)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(sums.iter().sum::<f64>() / idx.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_cell_step() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1]));
        let h = g.constant(Tensor::zeros(&[1, 1]));
        let c = g.constant(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let w_ih = g.constant(Tensor::zeros(&[4, 1]));
        let w_hh = g.constant(Tensor::zeros(&[4, 1]));
        let b = g.constant(Tensor::zeros(&[4]));
        let (h1, c1) = lstm_cell_step(&mut g, x, (h, c), w_ih, w_hh, b).unwrap();
        assert!((g.value(c1).item() - 1.0).abs() < 1e-12);
        assert!((g.value(h1).item() - 0.5 * 1f64.tanh()).abs() < 1e-12);
        assert!((g.value(h1).item() - 0.3808).abs() < 1e-4);

        let c0 = g.constant(Tensor::zeros(&[1, 1]));
        let (h2, c2) = lstm_cell_step(&mut g, x, (h, c0), w_ih, w_hh, b).unwrap();
        assert_eq!(g.value(c2).item(), 0.0);
        assert_eq!(g.value(h2).item(), 0.0);
    }

    #[test]
    fn shapes_and_simplexes() {
        let m = FaultNet::new(FaultNetArch::default(), 0).unwrap();
        let data: Vec<f64> = (0..300).map(|i| (i as f64 * 0.05).cos().abs()).collect();
        let preds = m.predict(Windows::new(&data, 100).unwrap()).unwrap();
        assert_eq!(preds.len(), 3);
        for p in &preds {
            assert!((p.type_probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!((p.cause_probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!((0.0..=1.0).contains(&p.position_norm));
        }
        let feats = m.export_shared_features(Windows::new(&data, 100).unwrap()).unwrap();
        assert_eq!(feats.len(), 3);
        assert!(feats.iter().all(|r| r.len() == 64 && r.iter().all(|v| v.is_finite())));
        assert!(m.predict(Windows::new(&data[..150], 50).unwrap()).is_err());
    }

    #[test]
    fn uniform_type_logits_cost_ln4() {
        let mut g = Graph::new();
        let out = FaultOutputs {
            type_logits: g.constant(Tensor::zeros(&[1, 4])),
            position: g.constant(Tensor::new(vec![1, 1], vec![33.0 / 99.0]).unwrap()),
            cause_logits: g.constant(Tensor::new(vec![1, 4], vec![0.0, 0.0, 60.0, 0.0]).unwrap()),
            shared: g.constant(Tensor::zeros(&[1, 2])),
        };
        let label = FaultLabel {
            event_type: EventClass::NonReflective,
            position: Some(33),
            cause: Cause::FiberBend,
        };
        let l = multitask_loss(&mut g, &out, &[label], 100, LossWeights::default()).unwrap();
        assert!((g.value(l.total).item() - 4f64.ln()).abs() < 1e-9);
        let only_type = LossWeights {
            position: 0.0,
            cause: 0.0,
            ..LossWeights::default()
        };
        let l2 = multitask_loss(&mut g, &out, &[label], 100, only_type).unwrap();
        assert_eq!(g.value(l2.total).item(), g.value(l2.type_ce).item());

        let bad = FaultLabel {
            event_type: EventClass::NoEvent,
            position: Some(3),
            cause: Cause::NoEvent,
        };
        assert!(multitask_loss(&mut g, &out, &[bad], 100, LossWeights::default()).is_err());
    }
}
