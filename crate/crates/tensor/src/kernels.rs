//! Raw numeric kernels shared by the graph ops: GEMM, im2col/col2im for
//! 1-D convolution, and the fused LSTM sequence recurrence.

/// `C = op(A)·op(B) + beta·C` for row-major operands, where `op(A)` is `m×k`
/// and `op(B)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds of all three operands were asserted above and the
    // strides describe exactly the row-major layouts of those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a "same"-padded strided 1-D convolution.
///
/// Output length is `ceil(in_len / stride)`. The total zero padding is split
/// with the smaller half on the left, so odd totals put the extra sample on
/// the right.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_len: usize,
    pub out_len: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl ConvGeom {
    pub fn same(in_len: usize, kernel: usize, stride: usize) -> Self {
        let out_len = in_len.div_ceil(stride);
        let needed = (out_len - 1) * stride + kernel;
        let total = needed.saturating_sub(in_len);
        let pad_left = total / 2;
        Self {
            in_len,
            out_len,
            kernel,
            stride,
            pad_left,
            pad_right: total - pad_left,
        }
    }

    /// Input index read by output position `t` at kernel tap `kk`, if it
    /// falls inside the unpadded signal.
    #[inline]
    fn source(&self, t: usize, kk: usize) -> Option<usize> {
        let pos = (t * self.stride + kk) as isize - self.pad_left as isize;
        (pos >= 0 && (pos as usize) < self.in_len).then_some(pos as usize)
    }
}

/// Lays `x[B, C, in_len]` out as a `[C·k, B·out_len]` column matrix.
pub(crate) fn im2col(x: &[f64], batch: usize, channels: usize, g: &ConvGeom) -> Vec<f64> {
    let cols = batch * g.out_len;
    let mut col = vec![0.0; channels * g.kernel * cols];
    for c in 0..channels {
        for kk in 0..g.kernel {
            let row = (c * g.kernel + kk) * cols;
            for b in 0..batch {
                let xb = &x[(b * channels + c) * g.in_len..][..g.in_len];
                let dst = &mut col[row + b * g.out_len..][..g.out_len];
                for (t, d) in dst.iter_mut().enumerate() {
                    if let Some(p) = g.source(t, kk) {
                        *d = xb[p];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds a column matrix back to `[B, C, in_len]`.
pub(crate) fn col2im(col: &[f64], batch: usize, channels: usize, g: &ConvGeom) -> Vec<f64> {
    let cols = batch * g.out_len;
    let mut x = vec![0.0; batch * channels * g.in_len];
    for c in 0..channels {
        for kk in 0..g.kernel {
            let row = (c * g.kernel + kk) * cols;
            for b in 0..batch {
                let xb = &mut x[(b * channels + c) * g.in_len..][..g.in_len];
                let src = &col[row + b * g.out_len..][..g.out_len];
                for (t, s) in src.iter().enumerate() {
                    if let Some(p) = g.source(t, kk) {
                        xb[p] += s;
                    }
                }
            }
        }
    }
    x
}

/// `[B, C, L]` -> `[C, B·L]`.
pub(crate) fn bcl_to_cbl(x: &[f64], batch: usize, channels: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            out[(c * batch + b) * len..][..len].copy_from_slice(&x[(b * channels + c) * len..][..len]);
        }
    }
    out
}

/// `[C, B·L]` -> `[B, C, L]`.
pub(crate) fn cbl_to_bcl(x: &[f64], batch: usize, channels: usize, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            out[(b * channels + c) * len..][..len].copy_from_slice(&x[(c * batch + b) * len..][..len]);
        }
    }
    out
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LstmDims {
    pub batch: usize,
    pub steps: usize,
    pub input: usize,
    pub hidden: usize,
    pub reverse: bool,
}

impl LstmDims {
    #[inline]
    fn time(&self, s: usize) -> usize {
        if self.reverse {
            self.steps - 1 - s
        } else {
            s
        }
    }
}

/// Activations saved by the forward recurrence, indexed by scan step.
#[derive(Debug, Clone)]
pub(crate) struct LstmCache {
    /// `[steps, B, 4H]` post-activation gates in (i, f, g, o) order.
    gates: Vec<f64>,
    /// `[steps + 1, B, H]`; entry `s` is the state entering step `s`.
    c: Vec<f64>,
    h: Vec<f64>,
    /// `[steps, B, H]`.
    tanh_c: Vec<f64>,
}

fn gather_step(x: &[f64], d: &LstmDims, t: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; d.batch * width];
    for b in 0..d.batch {
        out[b * width..][..width].copy_from_slice(&x[(b * d.steps + t) * width..][..width]);
    }
    out
}

/// Runs one LSTM direction over `x[B, T, I]` from zero initial state and
/// returns per-step hidden outputs `[B, T, H]` placed at their original time
/// index.
pub(crate) fn lstm_forward(
    x: &[f64],
    w_ih: &[f64],
    w_hh: &[f64],
    bias: &[f64],
    d: &LstmDims,
) -> (Vec<f64>, LstmCache) {
    let (bs, hd) = (d.batch, d.hidden);
    let g4 = 4 * hd;
    let mut cache = LstmCache {
        gates: vec![0.0; d.steps * bs * g4],
        c: vec![0.0; (d.steps + 1) * bs * hd],
        h: vec![0.0; (d.steps + 1) * bs * hd],
        tanh_c: vec![0.0; d.steps * bs * hd],
    };
    let mut out = vec![0.0; bs * d.steps * hd];
    let mut pre = vec![0.0; bs * g4];
    for s in 0..d.steps {
        let t = d.time(s);
        let xt = gather_step(x, d, t, d.input);
        for b in 0..bs {
            pre[b * g4..][..g4].copy_from_slice(bias);
        }
        gemm(bs, g4, d.input, &xt, false, w_ih, true, 1.0, &mut pre);
        let (h_prev, h_rest) = cache.h.split_at_mut((s + 1) * bs * hd);
        let h_prev = &h_prev[s * bs * hd..];
        gemm(bs, g4, hd, h_prev, false, w_hh, true, 1.0, &mut pre);

        let gates = &mut cache.gates[s * bs * g4..][..bs * g4];
        let (c_prev, c_rest) = cache.c.split_at_mut((s + 1) * bs * hd);
        let c_prev = &c_prev[s * bs * hd..];
        let c_new = &mut c_rest[..bs * hd];
        let h_new = &mut h_rest[..bs * hd];
        let tanh_c = &mut cache.tanh_c[s * bs * hd..][..bs * hd];
        for b in 0..bs {
            let p = &pre[b * g4..][..g4];
            let gt = &mut gates[b * g4..][..g4];
            for j in 0..hd {
                let i = sigmoid(p[j]);
                let f = sigmoid(p[hd + j]);
                let g = p[2 * hd + j].tanh();
                let o = sigmoid(p[3 * hd + j]);
                gt[j] = i;
                gt[hd + j] = f;
                gt[2 * hd + j] = g;
                gt[3 * hd + j] = o;
                let c = f * c_prev[b * hd + j] + i * g;
                let tc = c.tanh();
                c_new[b * hd + j] = c;
                tanh_c[b * hd + j] = tc;
                let h = o * tc;
                h_new[b * hd + j] = h;
                out[(b * d.steps + t) * hd + j] = h;
            }
        }
    }
    (out, cache)
}

pub(crate) struct LstmGrads {
    pub dx: Vec<f64>,
    pub dw_ih: Vec<f64>,
    pub dw_hh: Vec<f64>,
    pub dbias: Vec<f64>,
}

/// Backpropagation through time for [`lstm_forward`].
pub(crate) fn lstm_backward(
    x: &[f64],
    w_ih: &[f64],
    w_hh: &[f64],
    dout: &[f64],
    cache: &LstmCache,
    d: &LstmDims,
) -> LstmGrads {
    let (bs, hd, id) = (d.batch, d.hidden, d.input);
    let g4 = 4 * hd;
    let mut grads = LstmGrads {
        dx: vec![0.0; bs * d.steps * id],
        dw_ih: vec![0.0; g4 * id],
        dw_hh: vec![0.0; g4 * hd],
        dbias: vec![0.0; g4],
    };
    let mut dh_next = vec![0.0; bs * hd];
    let mut dc_next = vec![0.0; bs * hd];
    let mut dpre = vec![0.0; bs * g4];
    let mut dxt = vec![0.0; bs * id];
    for s in (0..d.steps).rev() {
        let t = d.time(s);
        let gates = &cache.gates[s * bs * g4..][..bs * g4];
        let c_prev = &cache.c[s * bs * hd..][..bs * hd];
        let h_prev = &cache.h[s * bs * hd..][..bs * hd];
        let tanh_c = &cache.tanh_c[s * bs * hd..][..bs * hd];
        for b in 0..bs {
            let gt = &gates[b * g4..][..g4];
            let dp = &mut dpre[b * g4..][..g4];
            for j in 0..hd {
                let k = b * hd + j;
                let (i, f, g, o) = (gt[j], gt[hd + j], gt[2 * hd + j], gt[3 * hd + j]);
                let dh = dout[(b * d.steps + t) * hd + j] + dh_next[k];
                let tc = tanh_c[k];
                let d_o = dh * tc;
                let dc = dh * o * (1.0 - tc * tc) + dc_next[k];
                dp[j] = dc * g * i * (1.0 - i);
                dp[hd + j] = dc * c_prev[k] * f * (1.0 - f);
                dp[2 * hd + j] = dc * i * (1.0 - g * g);
                dp[3 * hd + j] = d_o * o * (1.0 - o);
                dc_next[k] = dc * f;
            }
        }
        let xt = gather_step(x, d, t, id);
        gemm(g4, id, bs, &dpre, true, &xt, false, 1.0, &mut grads.dw_ih);
        gemm(g4, hd, bs, &dpre, true, h_prev, false, 1.0, &mut grads.dw_hh);
        for b in 0..bs {
            for (acc, v) in grads.dbias.iter_mut().zip(&dpre[b * g4..][..g4]) {
                *acc += v;
            }
        }
        gemm(bs, id, g4, &dpre, false, w_ih, false, 0.0, &mut dxt);
        for b in 0..bs {
            grads.dx[(b * d.steps + t) * id..][..id].copy_from_slice(&dxt[b * id..][..id]);
        }
        gemm(bs, hd, g4, &dpre, false, w_hh, false, 0.0, &mut dh_next);
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_geometry_matches_ceil_division() {
        let g = ConvGeom::same(100, 16, 2);
        assert_eq!(g.out_len, 50);
        assert_eq!(g.pad_left + g.pad_right, 49 * 2 + 16 - 100);
        assert!(g.pad_right >= g.pad_left);
        let g = ConvGeom::same(25, 16, 1);
        assert_eq!((g.out_len, g.pad_left, g.pad_right), (25, 7, 8));
        let g = ConvGeom::same(3, 2, 1);
        assert_eq!((g.pad_left, g.pad_right), (0, 1));
    }

    #[test]
    fn gemm_handles_transposes() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::same(11, 4, 3);
        let x: Vec<f64> = (0..2 * 3 * 11).map(|i| (i as f64 * 0.37).sin()).collect();
        let col = im2col(&x, 2, 3, &g);
        let y: Vec<f64> = (0..col.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let back = col2im(&y, 2, 3, &g);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
