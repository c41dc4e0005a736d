//! Naive neural denoisers used as comparison points for the autoencoder.

use otdr_tensor::{BatchStats, Graph, ParamSet, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{invalid, Result};
use crate::nn::{finalize_init, BatchNorm, Conv, Dense, Lstm, Mode};
use crate::train::Network;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    Dae,
    Cnn,
    Lstm,
}

impl ReferenceKind {
    pub const ALL: [ReferenceKind; 3] = [Self::Dae, Self::Cnn, Self::Lstm];

    pub fn name(self) -> &'static str {
        match self {
            Self::Dae => "dae",
            Self::Cnn => "cnn",
            Self::Lstm => "lstm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid(format!("unknown reference denoiser '{s}'")))
    }
}

#[derive(Debug, Clone)]
enum Body {
    /// Fully connected 100→64→32→64→100.
    Dae(Vec<Dense>),
    /// Four stride-1 convolutions, the last with a single filter.
    Cnn(Vec<Conv>),
    /// Two stacked LSTM layers and a per-step linear read-out.
    Lstm(Vec<Lstm>, Dense),
}

#[derive(Debug, Clone)]
pub struct ReferenceDenoiser {
    kind: ReferenceKind,
    len: usize,
    params: ParamSet,
    buffers: ParamSet,
    bns: Vec<BatchNorm>,
    body: Body,
}

const DAE_WIDTHS: [usize; 3] = [64, 32, 64];
const CNN_FILTERS: [usize; 4] = [32, 32, 16, 1];
const CNN_KERNEL: usize = 16;
const LSTM_UNITS: usize = 64;

impl ReferenceDenoiser {
    pub fn new(kind: ReferenceKind, window_len: usize, seed: u64) -> Result<Self> {
        if window_len == 0 {
            return Err(invalid("window length must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut buffers = ParamSet::new();
        let mut bns = Vec::new();
        let body = match kind {
            ReferenceKind::Dae => {
                let mut widths = vec![window_len];
                widths.extend(DAE_WIDTHS);
                widths.push(window_len);
                let layers = widths
                    .windows(2)
                    .enumerate()
                    .map(|(i, w)| Dense::new(&mut params, &format!("fc{i}"), w[0], w[1], &mut rng))
                    .collect::<Result<_>>()?;
                Body::Dae(layers)
            }
            ReferenceKind::Cnn => {
                let mut c_in = 1;
                let mut convs = Vec::new();
                for (i, &f) in CNN_FILTERS.iter().enumerate() {
                    let name = format!("conv{i}");
                    convs.push(Conv::new(&mut params, &name, (c_in, f, CNN_KERNEL), 1, false, &mut rng)?);
                    if i + 1 < CNN_FILTERS.len() {
                        bns.push(BatchNorm::new(&mut params, &mut buffers, &format!("{name}.bn"), f)?);
                    }
                    c_in = f;
                }
                Body::Cnn(convs)
            }
            ReferenceKind::Lstm => {
                let l0 = Lstm::new(&mut params, "lstm0", 1, LSTM_UNITS, &mut rng)?;
                let l1 = Lstm::new(&mut params, "lstm1", LSTM_UNITS, LSTM_UNITS, &mut rng)?;
                let head = Dense::new(&mut params, "readout", LSTM_UNITS, 1, &mut rng)?;
                Body::Lstm(vec![l0, l1], head)
            }
        };
        finalize_init(&mut params, &mut buffers);
        Ok(ReferenceDenoiser {
            kind,
            len: window_len,
            params,
            buffers,
            bns,
            body,
        })
    }

    pub fn kind(&self) -> ReferenceKind {
        self.kind
    }
}

impl Network for ReferenceDenoiser {
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
    fn batch_norms(&self) -> &[BatchNorm] {
        &self.bns
    }
}

impl Denoiser for ReferenceDenoiser {
    fn window_len(&self) -> usize {
        self.len
    }

    fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<(Var, Vec<BatchStats>)> {
        let b = g.shape(x)[0];
        let mut stats = Vec::new();
        let ps = &self.params;
        let y = match &self.body {
            Body::Dae(layers) => {
                let mut h = x;
                for (i, layer) in layers.iter().enumerate() {
                    h = layer.forward(g, ps, h)?;
                    if i + 1 < layers.len() {
                        h = g.elu(h);
                    }
                }
                h
            }
            Body::Cnn(convs) => {
                let mut h = g.reshape(x, &[b, 1, self.len])?;
                for (i, conv) in convs.iter().enumerate() {
                    h = conv.forward(g, ps, h)?;
                    if let Some(bn) = self.bns.get(i) {
                        h = g.elu(h);
                        let (y, s) = bn.forward(g, ps, &self.buffers, h, mode)?;
                        h = y;
                        stats.extend(s);
                    }
                }
                g.reshape(h, &[b, self.len])?
            }
            Body::Lstm(layers, head) => {
                let mut h = g.reshape(x, &[b, self.len, 1])?;
                for layer in layers {
                    h = layer.forward(g, ps, h, false)?;
                }
                let flat = g.reshape(h, &[b * self.len, LSTM_UNITS])?;
                let out = head.forward(g, ps, flat)?;
                g.reshape(out, &[b, self.len])?
            }
        };
        Ok((y, stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use otdr_tensor::Tensor;

    #[test]
    fn every_kind_preserves_shape() {
        for kind in ReferenceKind::ALL {
            let m = ReferenceDenoiser::new(kind, 100, 0).unwrap();
            let mut g = Graph::new();
            let x = g.constant(Tensor::full(&[3, 100], 0.4));
            let (y, _) = m.forward(&mut g, x, Mode::Train).unwrap();
            assert_eq!(g.shape(y), &[3, 100], "{}", kind.name());
        }
    }

    #[test]
    fn names_round_trip() {
        for kind in ReferenceKind::ALL {
            assert_eq!(ReferenceKind::parse(kind.name()).unwrap(), kind);
        }
        assert!(ReferenceKind::parse("gru").is_err());
    }
}
