//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar loss walks the tape in reverse, accumulates
//! gradients into the [`ParamSet`] the parameters were read from and returns
//! gradients of any leaf created with [`Graph::variable`]. The graph is
//! consumed by the backward pass.

use std::collections::HashMap;

use crate::error::{invalid, shape_err, Result, TensorError};
use crate::kernels::{self, ConvGeom, LstmCache, LstmDims};
use crate::param::{ParamId, ParamSet};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Sigmoid,
    Tanh,
}

/// Batch normalization mode.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train { eps: f64 },
    /// Normalize with externally tracked running statistics.
    Eval {
        mean: &'a [f64],
        var: &'a [f64],
        eps: f64,
    },
}

/// Per-channel statistics of one training batch, used to update running
/// averages. `var` is the unbiased estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Act(Var, Activation),
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        col: Vec<f64>,
    },
    ConvT {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    SliceLast {
        x: Var,
        start: usize,
    },
    ConcatLast(Vec<Var>),
    Reshape(Var),
    SelectTime {
        x: Var,
        t: usize,
    },
    StackTime(Vec<Var>),
    Mse(Var, Var),
    MaskedSq {
        pred: Var,
        target: Vec<f64>,
        mask: Vec<f64>,
    },
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Lstm {
        x: Var,
        w_ih: Var,
        w_hh: Var,
        b: Var,
        dims: LstmDims,
        cache: Box<LstmCache>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients of the non-parameter leaves that requested them.
#[derive(Debug, Default)]
pub struct LeafGrads {
    grads: HashMap<Var, Tensor>,
}

impl LeafGrads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that does not take part in differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let p = params.get(id);
        self.push(p.value.clone(), p.requires_grad, Op::Param(id))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(t, rg, Op::Scale(x, c))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Activation::Elu => |v| if v >= 0.0 { v } else { v.exp_m1() },
            Activation::Sigmoid => kernels::sigmoid,
            Activation::Tanh => f64::tanh,
        };
        let t = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(t, rg, Op::Act(x, kind))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Elu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    /// Affine map `x·Wᵀ + b` for `x[B, n]`, `W[m, n]`, `b[m]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err("dense", format!("x {xs:?}, W {ws:?}")));
        }
        let (bs, n, m) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; bs * m];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [m] {
                return Err(shape_err("dense", format!("bias {:?} for {m} outputs", bv.shape())));
            }
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bv.data());
            }
        }
        kernels::gemm(
            bs,
            m,
            n,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            1.0,
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::from_parts(vec![bs, m], out), rg, Op::Dense { x, w, b }))
    }

    fn conv_shapes(
        &self,
        op: &'static str,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        transposed: bool,
    ) -> Result<(usize, usize, usize, usize, usize)> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 3 || ws.len() != 3 {
            return Err(shape_err(op, format!("x {xs:?}, w {ws:?}; expected rank 3")));
        }
        if stride == 0 {
            return Err(invalid(op, "stride must be >= 1"));
        }
        // conv1d: w[out, in, k]; transposed: w[in, out, k]
        let (w_in, w_out) = if transposed { (ws[0], ws[1]) } else { (ws[1], ws[0]) };
        if xs[1] != w_in {
            return Err(shape_err(
                op,
                format!("input has {} channels, kernel expects {w_in}", xs[1]),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [w_out] {
                return Err(shape_err(op, format!("bias {:?} for {w_out} channels", self.shape(b))));
            }
        }
        Ok((xs[0], xs[1], xs[2], w_out, ws[2]))
    }

    fn add_channel_bias(&self, out: &mut [f64], b: Option<Var>, channels: usize, len: usize) {
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (i, chunk) in out.chunks_mut(len).enumerate() {
                let c = bv[i % channels];
                for v in chunk {
                    *v += c;
                }
            }
        }
    }

    /// Strided cross-correlation with "same" zero padding.
    ///
    /// `x[B, C_in, L]`, `w[C_out, C_in, k]`, `b[C_out]` -> `[B, C_out, ceil(L/stride)]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (bs, cin, len, cout, k) = self.conv_shapes("conv1d", x, w, b, stride, false)?;
        let geom = ConvGeom::same(len, k, stride);
        let col = kernels::im2col(self.value(x).data(), bs, cin, &geom);
        let cols = bs * geom.out_len;
        let mut y = vec![0.0; cout * cols];
        kernels::gemm(cout, cols, cin * k, self.value(w).data(), false, &col, false, 0.0, &mut y);
        let mut out = kernels::cbl_to_bcl(&y, bs, cout, geom.out_len);
        self.add_channel_bias(&mut out, b, cout, geom.out_len);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::from_parts(vec![bs, cout, geom.out_len], out);
        Ok(self.push(t, rg, Op::Conv { x, w, b, geom, col }))
    }

    /// Adjoint of [`Graph::conv1d`]: up-samples `x[B, C_in, L]` to
    /// `[B, C_out, L·stride]` with `w[C_in, C_out, k]`.
    pub fn conv1d_transpose(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (bs, cin, len, cout, k) = self.conv_shapes("conv1d_transpose", x, w, b, stride, true)?;
        let geom = ConvGeom::same(len * stride, k, stride);
        debug_assert_eq!(geom.out_len, len);
        let xr = kernels::bcl_to_cbl(self.value(x).data(), bs, cin, len);
        let cols = bs * len;
        let mut dcol = vec![0.0; cout * k * cols];
        kernels::gemm(cout * k, cols, cin, self.value(w).data(), true, &xr, false, 0.0, &mut dcol);
        let mut out = kernels::col2im(&dcol, bs, cout, &geom);
        self.add_channel_bias(&mut out, b, cout, geom.in_len);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::from_parts(vec![bs, cout, geom.in_len], out);
        Ok(self.push(t, rg, Op::ConvT { x, w, b, geom }))
    }

    /// Per-channel batch normalization of `x[B, C, L]`.
    ///
    /// In train mode also returns the batch statistics so the caller can
    /// update its running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(shape_err("batch_norm", format!("expected [B, C, L], got {xs:?}")));
        }
        let (bs, ch, len) = (xs[0], xs[1], xs[2]);
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(shape_err(
                "batch_norm",
                format!("gamma {:?} / beta {:?} for {ch} channels", self.shape(gamma), self.shape(beta)),
            ));
        }
        let n = bs * len;
        let xd = self.value(x).data();
        let (mean, var, stats, train) = match mode {
            BnMode::Train { .. } => {
                if n < 2 {
                    return Err(invalid(
                        "batch_norm",
                        "train mode needs more than one value per channel",
                    ));
                }
                let mut mean = vec![0.0; ch];
                let mut var = vec![0.0; ch];
                for c in 0..ch {
                    let mut s = 0.0;
                    for b in 0..bs {
                        s += xd[(b * ch + c) * len..][..len].iter().sum::<f64>();
                    }
                    let m = s / n as f64;
                    let mut ss = 0.0;
                    for b in 0..bs {
                        ss += xd[(b * ch + c) * len..][..len]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    mean[c] = m;
                    var[c] = ss / n as f64;
                }
                let unbiased = var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats), true)
            }
            BnMode::Eval { mean, var, .. } => {
                if mean.len() != ch || var.len() != ch {
                    return Err(shape_err("batch_norm", "running statistics length"));
                }
                (mean.to_vec(), var.to_vec(), None, false)
            }
        };
        let eps = match mode {
            BnMode::Train { eps } | BnMode::Eval { eps, .. } => eps,
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..bs {
            for c in 0..ch {
                let off = (b * ch + c) * len;
                for i in off..off + len {
                    let h = (xd[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = g[c] * h + be[c];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor::from_parts(xs, out),
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        );
        Ok((v, stats))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().expect("rank >= 1");
        if len == 0 || start + len > d {
            return Err(shape_err("slice_last", format!("{start}+{len} of {d}")));
        }
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = xs;
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, data), rg, Op::SliceLast { x, start }))
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| invalid("concat_last", "no inputs"))?)
            .to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(shape_err("concat_last", format!("{first:?} vs {s:?}")));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..][..w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(shape, data), rg, Op::ConcatLast(parts.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::Reshape(x)))
    }

    /// `x[B, T, H]` -> `x[:, t, :]` as `[B, H]`.
    pub fn select_time(&mut self, x: Var, t: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || t >= xs[1] {
            return Err(shape_err("select_time", format!("t={t} of {xs:?}")));
        }
        let (bs, steps, h) = (xs[0], xs[1], xs[2]);
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(bs * h);
        for b in 0..bs {
            data.extend_from_slice(&xd[(b * steps + t) * h..][..h]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![bs, h], data), rg, Op::SelectTime { x, t }))
    }

    /// Stacks `T` tensors of shape `[B, H]` into `[B, T, H]`.
    pub fn stack_time(&mut self, steps: &[Var]) -> Result<Var> {
        let s0 = self
            .shape(*steps.first().ok_or_else(|| invalid("stack_time", "no inputs"))?)
            .to_vec();
        if s0.len() != 2 || steps.iter().any(|&s| self.shape(s) != s0.as_slice()) {
            return Err(shape_err("stack_time", "all steps must share one [B, H] shape"));
        }
        let (bs, h, tl) = (s0[0], s0[1], steps.len());
        let mut data = vec![0.0; bs * tl * h];
        for (t, &s) in steps.iter().enumerate() {
            let sd = self.value(s).data();
            for b in 0..bs {
                data[(b * tl + t) * h..][..h].copy_from_slice(&sd[b * h..][..h]);
            }
        }
        let rg = steps.iter().any(|&s| self.rg(s));
        Ok(self.push(Tensor::from_parts(vec![bs, tl, h], data), rg, Op::StackTime(steps.to_vec())))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse", pred, target)?;
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let n = p.len() as f64;
        let loss = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::scalar(loss), rg, Op::Mse(pred, target)))
    }

    /// `Σ mask_i·(pred_i − target_i)² / B` for a `[B]` or `[B, 1]` prediction.
    pub fn masked_sq_error(&mut self, pred: Var, target: &[f64], mask: &[f64]) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != target.len() || p.len() != mask.len() {
            return Err(shape_err(
                "masked_sq_error",
                format!("pred {}, target {}, mask {}", p.len(), target.len(), mask.len()),
            ));
        }
        let loss = p
            .iter()
            .zip(target)
            .zip(mask)
            .map(|((a, b), m)| m * (a - b) * (a - b))
            .sum::<f64>()
            / p.len() as f64;
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::MaskedSq {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
            },
        ))
    }

    /// Mean over the batch of `−log softmax(logits)[target]` for `logits[B, C]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != targets.len() {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("logits {ls:?} with {} targets", targets.len()),
            ));
        }
        let c = ls[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(invalid("softmax_cross_entropy", format!("class {bad} >= {c}")));
        }
        let probs = softmax_rows(self.value(logits).data(), c);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(b, &t)| {
                let row = &self.value(logits).data()[b * c..][..c];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                lse - row[t]
            })
            .sum::<f64>()
            / targets.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// One LSTM direction over `x[B, T, I]` from zero initial state.
    ///
    /// Weights are packed gate-major in (input, forget, cell, output) order:
    /// `w_ih[4H, I]`, `w_hh[4H, H]`, `b[4H]`. With `reverse` the sequence is
    /// scanned from the last step to the first; outputs `[B, T, H]` keep the
    /// original time indexing either way.
    pub fn lstm(&mut self, x: Var, w_ih: Var, w_hh: Var, b: Var, reverse: bool) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let wi = self.shape(w_ih).to_vec();
        let wh = self.shape(w_hh).to_vec();
        if xs.len() != 3 || wi.len() != 2 || wh.len() != 2 {
            return Err(shape_err("lstm", format!("x {xs:?}, w_ih {wi:?}, w_hh {wh:?}")));
        }
        let hidden = wh[1];
        if wi[0] != 4 * hidden || wh[0] != 4 * hidden || wi[1] != xs[2] || self.shape(b) != [4 * hidden] {
            return Err(shape_err(
                "lstm",
                format!("x {xs:?}, w_ih {wi:?}, w_hh {wh:?}, b {:?}", self.shape(b)),
            ));
        }
        let dims = LstmDims {
            batch: xs[0],
            steps: xs[1],
            input: xs[2],
            hidden,
            reverse,
        };
        let (out, cache) = kernels::lstm_forward(
            self.value(x).data(),
            self.value(w_ih).data(),
            self.value(w_hh).data(),
            self.value(b).data(),
            &dims,
        );
        let rg = self.rg(x) || self.rg(w_ih) || self.rg(w_hh) || self.rg(b);
        let t = Tensor::from_parts(vec![dims.batch, dims.steps, hidden], out);
        Ok(self.push(
            t,
            rg,
            Op::Lstm {
                x,
                w_ih,
                w_hh,
                b,
                dims,
                cache: Box::new(cache),
            },
        ))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Parameter gradients are added to any gradient already stored in
    /// `params` (callers zero between steps). Returns gradients of leaves
    /// created with [`Graph::variable`].
    pub fn backward(self, loss: Var, params: &mut ParamSet) -> Result<LeafGrads> {
        let ls = self.shape(loss);
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        let mut leaves = LeafGrads::default();
        if !nodes[loss.0].requires_grad {
            return Ok(leaves);
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let mut acc = Accum {
                nodes: &nodes,
                grads: &mut grads,
            };
            match &node.op {
                Op::Leaf => {
                    leaves
                        .grads
                        .insert(Var(i), Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                Op::Param(id) => params.accumulate(*id, &g),
                Op::Add(a, b) => {
                    acc.add(*a, |d| axpy(d, 1.0, &g));
                    acc.add(*b, |d| axpy(d, 1.0, &g));
                }
                Op::Sub(a, b) => {
                    acc.add(*a, |d| axpy(d, 1.0, &g));
                    acc.add(*b, |d| axpy(d, -1.0, &g));
                }
                Op::Mul(a, b) => {
                    let va = nodes[a.0].value.data();
                    let vb = nodes[b.0].value.data();
                    acc.add(*a, |d| {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(vb) {
                            *d += g * y;
                        }
                    });
                    acc.add(*b, |d| {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(va) {
                            *d += g * x;
                        }
                    });
                }
                Op::Scale(x, c) => acc.add(*x, |d| axpy(d, *c, &g)),
                Op::Sum(x) => acc.add(*x, |d| {
                    for v in d {
                        *v += g[0];
                    }
                }),
                Op::Act(x, kind) => {
                    let y = node.value.data();
                    let xv = nodes[x.0].value.data();
                    acc.add(*x, |d| {
                        for i in 0..d.len() {
                            let dy = match kind {
                                Activation::Elu => {
                                    if xv[i] >= 0.0 {
                                        1.0
                                    } else {
                                        y[i] + 1.0
                                    }
                                }
                                Activation::Sigmoid => y[i] * (1.0 - y[i]),
                                Activation::Tanh => 1.0 - y[i] * y[i],
                            };
                            d[i] += g[i] * dy;
                        }
                    });
                }
                Op::Dense { x, w, b } => {
                    let xv = &nodes[x.0].value;
                    let wv = &nodes[w.0].value;
                    let (bs, n) = (xv.shape()[0], xv.shape()[1]);
                    let m = wv.shape()[0];
                    acc.add(*x, |d| kernels::gemm(bs, n, m, &g, false, wv.data(), false, 1.0, d));
                    acc.add(*w, |d| kernels::gemm(m, n, bs, &g, true, xv.data(), false, 1.0, d));
                    if let Some(b) = b {
                        acc.add(*b, |d| {
                            for row in g.chunks(m) {
                                axpy(d, 1.0, row);
                            }
                        });
                    }
                }
                Op::Conv { x, w, b, geom, col } => {
                    let xs = nodes[x.0].value.shape();
                    let wv = &nodes[w.0].value;
                    let (bs, cin) = (xs[0], xs[1]);
                    let cout = wv.shape()[0];
                    let cols = bs * geom.out_len;
                    let gr = kernels::bcl_to_cbl(&g, bs, cout, geom.out_len);
                    acc.add(*w, |d| {
                        kernels::gemm(cout, cin * geom.kernel, cols, &gr, false, col, true, 1.0, d)
                    });
                    acc.add(*x, |d| {
                        let mut dcol = vec![0.0; cin * geom.kernel * cols];
                        kernels::gemm(cin * geom.kernel, cols, cout, wv.data(), true, &gr, false, 0.0, &mut dcol);
                        axpy(d, 1.0, &kernels::col2im(&dcol, bs, cin, geom));
                    });
                    if let Some(b) = b {
                        acc.add(*b, |d| channel_sums(d, &g, cout, geom.out_len));
                    }
                }
                Op::ConvT { x, w, b, geom } => {
                    let xv = &nodes[x.0].value;
                    let wv = &nodes[w.0].value;
                    let (bs, cin, len) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                    let cout = wv.shape()[1];
                    let cols = bs * len;
                    let gcol = kernels::im2col(&g, bs, cout, geom);
                    acc.add(*x, |d| {
                        let mut dy = vec![0.0; cin * cols];
                        kernels::gemm(cin, cols, cout * geom.kernel, wv.data(), false, &gcol, false, 0.0, &mut dy);
                        axpy(d, 1.0, &kernels::cbl_to_bcl(&dy, bs, cin, len));
                    });
                    acc.add(*w, |d| {
                        let xr = kernels::bcl_to_cbl(xv.data(), bs, cin, len);
                        kernels::gemm(cin, cout * geom.kernel, cols, &xr, false, &gcol, true, 1.0, d);
                    });
                    if let Some(b) = b {
                        acc.add(*b, |d| channel_sums(d, &g, cout, geom.in_len));
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let s = node.value.shape();
                    let (bs, ch, len) = (s[0], s[1], s[2]);
                    let n = (bs * len) as f64;
                    let gv = nodes[gamma.0].value.data();
                    let mut sum_g = vec![0.0; ch];
                    let mut sum_gx = vec![0.0; ch];
                    for b in 0..bs {
                        for c in 0..ch {
                            let off = (b * ch + c) * len;
                            for i in off..off + len {
                                sum_g[c] += g[i];
                                sum_gx[c] += g[i] * xhat[i];
                            }
                        }
                    }
                    acc.add(*beta, |d| axpy(d, 1.0, &sum_g));
                    acc.add(*gamma, |d| axpy(d, 1.0, &sum_gx));
                    acc.add(*x, |d| {
                        for b in 0..bs {
                            for c in 0..ch {
                                let k = gv[c] * inv_std[c];
                                let off = (b * ch + c) * len;
                                for i in off..off + len {
                                    d[i] += if *train {
                                        k * (g[i] - sum_g[c] / n - xhat[i] * sum_gx[c] / n)
                                    } else {
                                        k * g[i]
                                    };
                                }
                            }
                        }
                    });
                }
                Op::SliceLast { x, start } => {
                    let d_in = *nodes[x.0].value.shape().last().unwrap();
                    let w = *node.value.shape().last().unwrap();
                    acc.add(*x, |d| {
                        for (row, grow) in d.chunks_mut(d_in).zip(g.chunks(w)) {
                            axpy(&mut row[*start..*start + w], 1.0, grow);
                        }
                    });
                }
                Op::ConcatLast(parts) => {
                    let total = *node.value.shape().last().unwrap();
                    let mut offset = 0;
                    for p in parts {
                        let w = *nodes[p.0].value.shape().last().unwrap();
                        acc.add(*p, |d| {
                            for (row, grow) in d.chunks_mut(w).zip(g.chunks(total)) {
                                axpy(row, 1.0, &grow[offset..offset + w]);
                            }
                        });
                        offset += w;
                    }
                }
                Op::Reshape(x) => acc.add(*x, |d| axpy(d, 1.0, &g)),
                Op::SelectTime { x, t } => {
                    let s = nodes[x.0].value.shape();
                    let (bs, steps, h) = (s[0], s[1], s[2]);
                    acc.add(*x, |d| {
                        for b in 0..bs {
                            axpy(&mut d[(b * steps + t) * h..][..h], 1.0, &g[b * h..][..h]);
                        }
                    });
                }
                Op::StackTime(steps) => {
                    let s = node.value.shape();
                    let (bs, tl, h) = (s[0], s[1], s[2]);
                    for (t, st) in steps.iter().enumerate() {
                        acc.add(*st, |d| {
                            for b in 0..bs {
                                axpy(&mut d[b * h..][..h], 1.0, &g[(b * tl + t) * h..][..h]);
                            }
                        });
                    }
                }
                Op::Mse(p, t) => {
                    let pv = nodes[p.0].value.data();
                    let tv = nodes[t.0].value.data();
                    let k = 2.0 * g[0] / pv.len() as f64;
                    acc.add(*p, |d| {
                        for i in 0..d.len() {
                            d[i] += k * (pv[i] - tv[i]);
                        }
                    });
                    acc.add(*t, |d| {
                        for i in 0..d.len() {
                            d[i] -= k * (pv[i] - tv[i]);
                        }
                    });
                }
                Op::MaskedSq { pred, target, mask } => {
                    let pv = nodes[pred.0].value.data();
                    let k = 2.0 * g[0] / pv.len() as f64;
                    acc.add(*pred, |d| {
                        for i in 0..d.len() {
                            d[i] += k * mask[i] * (pv[i] - target[i]);
                        }
                    });
                }
                Op::SoftmaxCe {
                    logits,
                    targets,
                    probs,
                } => {
                    let c = nodes[logits.0].value.shape()[1];
                    let k = g[0] / targets.len() as f64;
                    acc.add(*logits, |d| {
                        for (b, &t) in targets.iter().enumerate() {
                            for j in 0..c {
                                let onehot = if j == t { 1.0 } else { 0.0 };
                                d[b * c + j] += k * (probs[b * c + j] - onehot);
                            }
                        }
                    });
                }
                Op::Lstm {
                    x,
                    w_ih,
                    w_hh,
                    b,
                    dims,
                    cache,
                } => {
                    let lg = kernels::lstm_backward(
                        nodes[x.0].value.data(),
                        nodes[w_ih.0].value.data(),
                        nodes[w_hh.0].value.data(),
                        &g,
                        cache,
                        dims,
                    );
                    acc.add(*x, |d| axpy(d, 1.0, &lg.dx));
                    acc.add(*w_ih, |d| axpy(d, 1.0, &lg.dw_ih));
                    acc.add(*w_hh, |d| axpy(d, 1.0, &lg.dw_hh));
                    acc.add(*b, |d| axpy(d, 1.0, &lg.dbias));
                }
            }
        }
        Ok(leaves)
    }
}

struct Accum<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl Accum<'_> {
    fn add(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]);
        f(slot);
    }
}

fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn channel_sums(dst: &mut [f64], g: &[f64], channels: usize, len: usize) {
    for (i, chunk) in g.chunks(len).enumerate() {
        dst[i % channels] += chunk.iter().sum::<f64>();
    }
}

/// Row-wise numerically stable softmax of a `[rows, c]` matrix.
pub fn softmax_rows(logits: &[f64], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_matches_hand_convolution() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 3], &[1.0, 2.0, 3.0]));
        let w = g.constant(t(&[1, 1, 2], &[1.0, 1.0]));
        let y = g.conv1d(x, w, None, 1).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 5.0, 3.0]);
    }

    #[test]
    fn single_tap_kernels_are_identities() {
        let data: Vec<f64> = (0..10).map(|i| i as f64 * 0.3 - 1.0).collect();
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 1, 5], &data));
        let w = g.constant(t(&[1, 1, 1], &[1.0]));
        let y = g.conv1d(x, w, None, 1).unwrap();
        let z = g.conv1d_transpose(x, w, None, 1).unwrap();
        assert_eq!(g.value(y).data(), data.as_slice());
        assert_eq!(g.value(z).data(), data.as_slice());
    }

    #[test]
    fn strided_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3, 100]));
        let w = g.constant(Tensor::zeros(&[4, 3, 16]));
        let y = g.conv1d(x, w, None, 2).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 50]);
        let x = g.constant(Tensor::zeros(&[2, 4, 25]));
        let w = g.constant(Tensor::zeros(&[4, 3, 16]));
        let y = g.conv1d_transpose(x, w, None, 2).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 50]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 10]));
        let w = g.constant(Tensor::zeros(&[1, 3, 4]));
        assert!(matches!(g.conv1d(x, w, None, 1), Err(TensorError::Shape { .. })));
        assert!(g.conv1d_transpose(x, w, None, 1).is_err());
    }

    #[test]
    fn activations_closed_forms() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[0.0, -1.0, 3f64.ln()]));
        let e = g.elu(x);
        let s = g.sigmoid(x);
        let th = g.tanh(x);
        assert_eq!(g.value(e).data()[0], 0.0);
        assert!((g.value(e).data()[1] - (f64::exp(-1.0) - 1.0)).abs() < 1e-15);
        assert_eq!(g.value(s).data()[0], 0.5);
        assert!((g.value(s).data()[2] - 0.75).abs() < 1e-15);
        assert_eq!(g.value(th).data()[0], 0.0);
        let big = g.constant(t(&[1], &[-800.0]));
        let e = g.elu(big);
        assert_eq!(g.value(e).data()[0], -1.0);
    }

    #[test]
    fn dense_hand_example() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = g.constant(t(&[2, 2], &[1.0, 1.0, 0.0, 1.0]));
        let b = g.constant(t(&[2], &[1.0, 0.0]));
        let y = g.dense(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 2.0]);
        let bad = g.constant(Tensor::zeros(&[1, 3]));
        assert!(g.dense(bad, w, None).is_err());
    }

    #[test]
    fn dense_rows_are_independent() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3, 2], &[0.5, -1.0, 0.5, -1.0, 0.5, -1.0]));
        let w = g.constant(t(&[3, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let y = g.dense(x, w, None).unwrap();
        let rows: Vec<_> = g.value(y).data().chunks(3).collect();
        assert_eq!(rows[0], rows[1]);
        assert_eq!(rows[1], rows[2]);
    }

    #[test]
    fn loss_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2]));
        let b = g.constant(Tensor::full(&[2], 1.0));
        let l = g.mse(a, b).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
        let l = g.mse(b, b).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let logits = g.constant(Tensor::zeros(&[1, 4]));
        let ce = g.softmax_cross_entropy(logits, &[2]).unwrap();
        assert!((g.value(ce).item() - 4f64.ln()).abs() < 1e-15);
        assert!(g.softmax_cross_entropy(logits, &[4]).is_err());
    }

    #[test]
    fn cross_entropy_is_stable_for_large_logits() {
        let mut g = Graph::new();
        let logits = g.constant(t(&[1, 3], &[1000.0, 0.0, -1000.0]));
        let ce = g.softmax_cross_entropy(logits, &[0]).unwrap();
        assert_eq!(g.value(ce).item(), 0.0);
    }

    #[test]
    fn batch_norm_train_statistics() {
        let data: Vec<f64> = (0..24).map(|i| ((i * 7) % 11) as f64 * 0.4 - 1.3).collect();
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3, 4], &data));
        let gamma = g.constant(Tensor::full(&[3], 1.0));
        let beta = g.constant(Tensor::zeros(&[3]));
        let (y, stats) = g.batch_norm(x, gamma, beta, BnMode::Train { eps: 1e-5 }).unwrap();
        assert!(stats.is_some());
        let yd = g.value(y).data();
        for c in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|b| yd[(b * 3 + c) * 4..][..4].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-7);
        }
    }

    #[test]
    fn batch_norm_affine_and_constant_channel() {
        // standardized input: mean 0, population variance 1
        let x = [-1.0, 1.0, -1.0, 1.0];
        let mut g = Graph::new();
        let xv = g.constant(t(&[2, 1, 2], &x));
        let gamma = g.constant(t(&[1], &[2.0]));
        let beta = g.constant(t(&[1], &[3.0]));
        let (y, _) = g.batch_norm(xv, gamma, beta, BnMode::Train { eps: 0.0 }).unwrap();
        let yd = g.value(y).data();
        let mean = yd.iter().sum::<f64>() / 4.0;
        let std = (yd.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!((mean - 3.0).abs() < 1e-6 && (std - 2.0).abs() < 1e-6);

        let c = g.constant(Tensor::full(&[2, 1, 2], 4.2));
        let (y, _) = g.batch_norm(c, gamma, beta, BnMode::Train { eps: 1e-5 }).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn batch_norm_rejects_single_value_in_train_mode() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 1]));
        let one = g.constant(Tensor::full(&[1], 1.0));
        let zero = g.constant(Tensor::zeros(&[1]));
        assert!(g.batch_norm(x, one, zero, BnMode::Train { eps: 1e-5 }).is_err());
        let (y, stats) = g
            .batch_norm(x, one, zero, BnMode::Eval { mean: &[0.0], var: &[1.0], eps: 0.0 })
            .unwrap();
        assert!(stats.is_none());
        assert_eq!(g.value(y).data(), &[0.0]);
    }

    #[test]
    fn backward_of_sum_is_ones_and_accumulates() {
        let mut ps = ParamSet::new();
        let id = ps.add("w", t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 0.0, 1.0])).unwrap();
        for pass in 1..=2 {
            let mut g = Graph::new();
            let w = g.param(&ps, id);
            let s = g.sum(w);
            g.backward(s, &mut ps).unwrap();
            let grad = ps.get(id).grad.as_ref().unwrap();
            assert!(grad.data().iter().all(|&v| v == pass as f64));
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut ps = ParamSet::new();
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(&[3]));
        assert_eq!(g.backward(x, &mut ps).unwrap_err(), TensorError::NonScalarLoss(vec![3]));
    }

    #[test]
    fn variable_leaves_receive_gradients() {
        let mut ps = ParamSet::new();
        let mut g = Graph::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s, &mut ps).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn slicing_and_concatenation_round_trip() {
        let data: Vec<f64> = (0..12).map(f64::from).collect();
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 6], &data));
        let a = g.slice_last(x, 0, 2).unwrap();
        let b = g.slice_last(x, 2, 4).unwrap();
        let c = g.concat_last(&[a, b]).unwrap();
        assert_eq!(g.value(c), g.value(x));
        assert!(g.slice_last(x, 5, 2).is_err());
    }

    #[test]
    fn time_select_and_stack_are_inverse() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3, 4], &data));
        let steps: Vec<Var> = (0..3).map(|s| g.select_time(x, s).unwrap()).collect();
        let y = g.stack_time(&steps).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn masked_error_ignores_masked_rows() {
        let mut g = Graph::new();
        let p = g.constant(t(&[2, 1], &[0.5, 0.9]));
        let l = g.masked_sq_error(p, &[0.5, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }
}
