//! Denoising convolutional autoencoder.

use otdr_tensor::{BatchStats, Graph, ParamSet, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{predict, Denoiser, Windows};
use crate::error::{invalid, Result};
use crate::nn::{finalize_init, BatchNorm, Conv, Mode};
use crate::train::Network;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DcaeArch {
    pub encoder_filters: Vec<usize>,
    pub encoder_strides: Vec<usize>,
    pub kernel_size: usize,
    pub decoder_filters: Vec<usize>,
    pub decoder_strides: Vec<usize>,
    pub output_kernel: usize,
    pub input_len: usize,
}

impl Default for DcaeArch {
    fn default() -> Self {
        DcaeArch {
            encoder_filters: vec![64, 32, 16, 64, 32],
            encoder_strides: vec![2, 2, 1, 1, 1],
            kernel_size: 16,
            decoder_filters: vec![32, 64, 16, 32, 64],
            decoder_strides: vec![1, 1, 1, 2, 2],
            output_kernel: 16,
            input_len: 100,
        }
    }
}

impl DcaeArch {
    /// Shallower or equal variant of the default with `depth` layers in
    /// total: the first `k` encoder and last `k` decoder layers, `k = (depth − 1) / 2`.
    pub fn with_depth(depth: usize) -> Result<Self> {
        let full = Self::default();
        let max = full.depth();
        if depth < 3 || depth.is_multiple_of(2) || depth > max {
            return Err(invalid(format!("depth {depth} must be odd and within 3..={max}")));
        }
        let k = (depth - 1) / 2;
        let n = full.decoder_filters.len();
        Ok(DcaeArch {
            encoder_filters: full.encoder_filters[..k].to_vec(),
            encoder_strides: full.encoder_strides[..k].to_vec(),
            decoder_filters: full.decoder_filters[n - k..].to_vec(),
            decoder_strides: full.decoder_strides[n - k..].to_vec(),
            ..full
        })
    }

    pub fn depth(&self) -> usize {
        self.encoder_filters.len() + self.decoder_filters.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_filters.len() != self.encoder_strides.len()
            || self.decoder_filters.len() != self.decoder_strides.len()
        {
            return Err(invalid("every layer needs exactly one filter count and one stride"));
        }
        let all = self.encoder_filters.iter().chain(&self.decoder_filters);
        if all.chain(&self.encoder_strides).chain(&self.decoder_strides).any(|&v| v == 0) {
            return Err(invalid("filter counts and strides must be positive"));
        }
        if self.kernel_size == 0 || self.output_kernel == 0 || self.input_len == 0 {
            return Err(invalid("kernel sizes and input length must be positive"));
        }
        let down: usize = self.encoder_strides.iter().product();
        let up: usize = self.decoder_strides.iter().product();
        if down != up {
            return Err(invalid(format!(
                "encoder down-samples by {down} but decoder up-samples by {up}"
            )));
        }
        Ok(())
    }

    /// Sequence length after each encoder layer.
    pub fn encoder_lengths(&self) -> Vec<usize> {
        let mut len = self.input_len;
        self.encoder_strides
            .iter()
            .map(|s| {
                len = len.div_ceil(*s);
                len
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct Block {
    conv: Conv,
    bn: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Dcae {
    arch: DcaeArch,
    params: ParamSet,
    buffers: ParamSet,
    blocks: Vec<Block>,
    bns: Vec<BatchNorm>,
}

impl Dcae {
    pub fn new(arch: DcaeArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut buffers = ParamSet::new();
        let mut blocks = Vec::new();
        let mut bns = Vec::new();
        let mut c_in = 1;
        let layers = arch
            .encoder_filters
            .iter()
            .zip(&arch.encoder_strides)
            .map(|(f, s)| (*f, *s, false))
            .chain(
                arch.decoder_filters
                    .iter()
                    .zip(&arch.decoder_strides)
                    .map(|(f, s)| (*f, *s, true)),
            );
        for (i, (filters, stride, transposed)) in layers.enumerate() {
            let name = if transposed {
                format!("dec{}", i - arch.encoder_filters.len())
            } else {
                format!("enc{i}")
            };
            let conv = Conv::new(
                &mut params,
                &name,
                (c_in, filters, arch.kernel_size),
                stride,
                transposed,
                &mut rng,
            )?;
            bns.push(BatchNorm::new(&mut params, &mut buffers, &format!("{name}.bn"), filters)?);
            blocks.push(Block {
                conv,
                bn: Some(bns.len() - 1),
            });
            c_in = filters;
        }
        let out = Conv::new(&mut params, "out", (c_in, 1, arch.output_kernel), 1, true, &mut rng)?;
        blocks.push(Block { conv: out, bn: None });
        finalize_init(&mut params, &mut buffers);
        Ok(Dcae {
            arch,
            params,
            buffers,
            blocks,
            bns,
        })
    }

    pub fn arch(&self) -> &DcaeArch {
        &self.arch
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Denoises one normalized window; output clamped to `[0, 1]`.
    pub fn denoise_window(&self, noisy: &[f64]) -> Result<Vec<f64>> {
        if noisy.len() != self.arch.input_len {
            return Err(invalid(format!(
                "window has {} samples, model expects {}",
                noisy.len(),
                self.arch.input_len
            )));
        }
        self.denoise_windows(noisy)
    }

    /// Clamped denoising of many windows stored back to back.
    pub fn denoise_windows(&self, noisy: &[f64]) -> Result<Vec<f64>> {
        let mut out = predict(self, Windows::new(noisy, self.arch.input_len)?)?;
        for v in &mut out {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(out)
    }
}

impl Network for Dcae {
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

impl Denoiser for Dcae {
    fn window_len(&self) -> usize {
        self.arch.input_len
    }

    fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<(Var, Vec<BatchStats>)> {
        let b = g.shape(x)[0];
        let len = self.arch.input_len;
        let mut h = g.reshape(x, &[b, 1, len])?;
        let mut stats = Vec::new();
        for block in &self.blocks {
            h = block.conv.forward(g, &self.params, h)?;
            if let Some(i) = block.bn {
                h = g.elu(h);
                let (y, s) = self.bns[i].forward(g, &self.params, &self.buffers, h, mode)?;
                h = y;
                stats.extend(s);
            }
        }
        // inputs whose length is not a multiple of the stride product come back padded
        if g.shape(h)[2] != len {
            h = g.slice_last(h, 0, len)?;
        }
        Ok((g.reshape(h, &[b, len])?, stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use otdr_tensor::Tensor;

    #[test]
    fn default_shapes() {
        let arch = DcaeArch::default();
        assert_eq!(arch.depth(), 11);
        assert_eq!(arch.encoder_lengths(), vec![50, 25, 25, 25, 25]);
        let m = Dcae::new(arch, 3).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[8, 100]));
        let (y, stats) = m.forward(&mut g, x, Mode::Train).unwrap();
        assert_eq!(g.shape(y), &[8, 100]);
        assert_eq!(stats.len(), 10);
    }

    #[test]
    fn init_is_seeded() {
        let a = Dcae::new(DcaeArch::default(), 7).unwrap();
        let b = Dcae::new(DcaeArch::default(), 7).unwrap();
        let c = Dcae::new(DcaeArch::default(), 8).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn mismatched_strides_rejected() {
        let arch = DcaeArch {
            decoder_strides: vec![1, 1, 1, 1, 2],
            ..DcaeArch::default()
        };
        assert!(Dcae::new(arch, 0).is_err());
    }

    #[test]
    fn depth_variants() {
        for d in [3, 5, 7, 9, 11] {
            let arch = DcaeArch::with_depth(d).unwrap();
            assert_eq!(arch.depth(), d);
            arch.validate().unwrap();
        }
        assert!(DcaeArch::with_depth(4).is_err());
        assert!(DcaeArch::with_depth(13).is_err());
    }

    #[test]
    fn odd_lengths_are_cropped() {
        let arch = DcaeArch {
            input_len: 50,
            ..DcaeArch::default()
        };
        let m = Dcae::new(arch, 0).unwrap();
        let out = m.denoise_window(&[0.5; 50]).unwrap();
        assert_eq!(out.len(), 50);
        assert!(m.denoise_window(&[0.5; 100]).is_err());
    }

    #[test]
    fn eval_is_idempotent_and_clamped() {
        let m = Dcae::new(DcaeArch::default(), 1).unwrap();
        let x: Vec<f64> = (0..100).map(|i| (i as f64 * 0.1).sin().abs()).collect();
        let a = m.denoise_window(&x).unwrap();
        let b = m.denoise_window(&x).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
