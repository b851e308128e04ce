//! Forward kernels and reverse-mode rules for every tensor operation.
//!
//! Design notes that matter for reproducibility:
//!
//! * Convolution lowers each sample to a column matrix (`im2col`) and runs a
//!   row-major matrix multiply whose inner accumulation walks the kernel
//!   positions in `(channel, ky, kx)` order. That is exactly the order a
//!   direct sliding-window loop uses, so the lowered kernel is bit-identical
//!   to the naive one.
//! * Reductions accumulate sequentially in a fixed order; nothing in the
//!   crate reassociates floating-point sums behind your back.
//! * [`mean_combine`] uses a compensated sum and a correction term for the
//!   final division so that averaging `k` copies of a tensor returns the
//!   tensor unchanged, bit for bit, and averaging a single tensor is the
//!   identity. Residual aggregation relies on this.
//! * Operations never check for non-finite values; divergence detection is
//!   the training loop's responsibility (it watches the loss).

use crate::error::{Error, Result};
use crate::tensor::{wants_grad, Scalar, Shape, Tensor};
use crate::tensor::params::{BatchNormState, ConvParams, LinearParams};

/// Recorded provenance of an op output: the operands plus whatever forward
/// byproducts the backward rule needs.
pub(crate) enum Op<S: Scalar> {
    Conv2d {
        input: Tensor<S>,
        weight: Tensor<S>,
        bias: Option<Tensor<S>>,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        input: Tensor<S>,
        gamma: Tensor<S>,
        beta: Tensor<S>,
        /// Normalized activations, same layout as the input.
        x_hat: Vec<S>,
        /// Per-channel `1 / sqrt(var + eps)` actually used by the forward.
        inv_std: Vec<S>,
        /// Whether batch statistics (true) or running statistics (false)
        /// were used; the input gradient differs between the two.
        training: bool,
    },
    Relu {
        input: Tensor<S>,
    },
    AvgPool2d {
        input: Tensor<S>,
        window: usize,
        stride: usize,
    },
    MeanCombine {
        inputs: Vec<Tensor<S>>,
    },
    ChannelConcat {
        inputs: Vec<Tensor<S>>,
    },
    ChannelSlice {
        input: Tensor<S>,
        start: usize,
    },
    Linear {
        input: Tensor<S>,
        weight: Tensor<S>,
        bias: Option<Tensor<S>>,
    },
    SoftmaxCrossEntropy {
        logits: Tensor<S>,
        /// Row-wise softmax probabilities saved by the forward pass.
        probs: Vec<S>,
        labels: Vec<usize>,
    },
    Add {
        lhs: Tensor<S>,
        rhs: Tensor<S>,
    },
    Reshape {
        input: Tensor<S>,
    },
    Scale {
        input: Tensor<S>,
        factor: S,
    },
    Sum {
        input: Tensor<S>,
    },
}

impl<S: Scalar> Op<S> {
    /// The operand tensors, in a fixed order (drives the tape traversal).
    pub(crate) fn inputs(&self) -> Vec<Tensor<S>> {
        match self {
            Op::Conv2d { input, weight, bias, .. } => {
                let mut v = vec![input.clone(), weight.clone()];
                v.extend(bias.iter().cloned());
                v
            }
            Op::BatchNorm { input, gamma, beta, .. } => {
                vec![input.clone(), gamma.clone(), beta.clone()]
            }
            Op::Relu { input }
            | Op::ChannelSlice { input, .. }
            | Op::Reshape { input }
            | Op::Scale { input, .. }
            | Op::Sum { input }
            | Op::AvgPool2d { input, .. } => vec![input.clone()],
            Op::MeanCombine { inputs } | Op::ChannelConcat { inputs } => inputs.clone(),
            Op::Linear { input, weight, bias } => {
                let mut v = vec![input.clone(), weight.clone()];
                v.extend(bias.iter().cloned());
                v
            }
            Op::SoftmaxCrossEntropy { logits, .. } => vec![logits.clone()],
            Op::Add { lhs, rhs } => vec![lhs.clone(), rhs.clone()],
        }
    }

    /// Routes `grad` (the gradient at `node`, the op's output) to the
    /// operands via `sink`. Contributions for operands that cannot receive
    /// gradients are skipped entirely.
    pub(crate) fn backward(
        &self,
        node: &Tensor<S>,
        grad: &[S],
        sink: &mut dyn FnMut(&Tensor<S>, Vec<S>),
    ) -> Result<()> {
        match self {
            Op::Conv2d { input, weight, bias, stride, padding } => {
                conv2d_backward(node, grad, input, weight, bias.as_ref(), *stride, *padding, sink)
            }
            Op::BatchNorm { input, gamma, beta, x_hat, inv_std, training } => {
                batch_norm_backward(input, gamma, beta, x_hat, inv_std, *training, grad, sink)
            }
            Op::Relu { input } => {
                if wants_grad(input) {
                    let x = input.data();
                    let dx = grad
                        .iter()
                        .zip(x.iter())
                        .map(|(&g, &v)| if v > S::zero() { g } else { S::zero() })
                        .collect();
                    sink(input, dx);
                }
                Ok(())
            }
            Op::AvgPool2d { input, window, stride } => {
                avg_pool_backward(node, grad, input, *window, *stride, sink)
            }
            Op::MeanCombine { inputs } => {
                let k = S::from_usize(inputs.len());
                let share: Vec<S> = grad.iter().map(|&g| g / k).collect();
                for input in inputs {
                    if wants_grad(input) {
                        sink(input, share.clone());
                    }
                }
                Ok(())
            }
            Op::ChannelConcat { inputs } => channel_concat_backward(node, grad, inputs, sink),
            Op::ChannelSlice { input, start } => {
                if wants_grad(input) {
                    let (b, c, h, w) = input.shape().nchw()?;
                    let (_, sc, _, _) = node.shape().nchw()?;
                    let hw = h * w;
                    let mut dx = vec![S::zero(); b * c * hw];
                    for bi in 0..b {
                        let src = bi * sc * hw;
                        let dst = (bi * c + start) * hw;
                        dx[dst..dst + sc * hw].copy_from_slice(&grad[src..src + sc * hw]);
                    }
                    sink(input, dx);
                }
                Ok(())
            }
            Op::Linear { input, weight, bias } => {
                linear_backward(grad, input, weight, bias.as_ref(), sink)
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                if wants_grad(logits) {
                    let (rows, classes) = logits.shape().rows_cols()?;
                    let g0 = grad[0];
                    let scale = g0 / S::from_usize(rows);
                    let mut dx = vec![S::zero(); rows * classes];
                    for r in 0..rows {
                        for k in 0..classes {
                            let indicator = if labels[r] == k { S::one() } else { S::zero() };
                            dx[r * classes + k] = (probs[r * classes + k] - indicator) * scale;
                        }
                    }
                    sink(logits, dx);
                }
                Ok(())
            }
            Op::Add { lhs, rhs } => {
                if wants_grad(lhs) {
                    sink(lhs, grad.to_vec());
                }
                if wants_grad(rhs) {
                    sink(rhs, grad.to_vec());
                }
                Ok(())
            }
            Op::Reshape { input } => {
                if wants_grad(input) {
                    sink(input, grad.to_vec());
                }
                Ok(())
            }
            Op::Scale { input, factor } => {
                if wants_grad(input) {
                    sink(input, grad.iter().map(|&g| g * *factor).collect());
                }
                Ok(())
            }
            Op::Sum { input } => {
                if wants_grad(input) {
                    sink(input, vec![grad[0]; input.numel()]);
                }
                Ok(())
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Dense kernels shared by forward and backward passes.
// ---------------------------------------------------------------------------

/// `out += a * b` for row-major `a: m x k`, `b: k x n`, `out: m x n`.
///
/// The inner accumulation order for each output element is the `k` index in
/// increasing order, one multiply and one add per term (never fused), which
/// is the contract the convolution oracle tests rely on.
fn matmul_acc<S: Scalar>(a: &[S], m: usize, k: usize, b: &[S], n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Transposes row-major `src: rows x cols` into `dst: cols x rows`.
fn transpose_into<S: Scalar>(src: &[S], rows: usize, cols: usize, dst: &mut [S]) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(dst.len(), rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// Output spatial size of a convolution or pooling window.
fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::InvalidInput(format!(
            "window of size {kernel} does not fit input extent {input} with padding {padding}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Lowers one sample to columns: `cols[(c*kh+ky)*kw+kx][oy*wo+ox]` holds the
/// input value under kernel cell `(ky, kx)` at output position `(oy, ox)`,
/// or zero where the window hangs over the padding. Writes every cell, so
/// the buffer can be reused across samples.
#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    x: &[S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    cols: &mut [S],
) {
    let ow = ho * wo;
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * ow;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(S::zero());
                        continue;
                    }
                    let src_row = &x[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        *d = if ix >= 0 && ix < w as isize { src_row[ix as usize] } else { S::zero() };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input,
/// accumulating where windows overlap.
#[allow(clippy::too_many_arguments)]
fn col2im_acc<S: Scalar>(
    cols: &[S],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    dx: &mut [S],
) {
    let ow = ho * wo;
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * ow;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[(c * h + iy as usize) * w + ix as usize] += cols[row + oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Mean of `values` with a compensated (Neumaier) sum and a corrected final
/// division: the division error `e = s - q*k` is recovered with a fused
/// multiply-add and folded back in. Averaging `k` copies of the same value
/// returns that value exactly, and `k = 1` is the identity.
fn compensated_mean<S: Scalar>(values: impl Iterator<Item = S>, k: usize) -> S {
    let mut sum = S::zero();
    let mut comp = S::zero();
    for x in values {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    let count = S::from_usize(k);
    let q = sum / count;
    let division_error = q.neg().mul_add(count, sum);
    q + (division_error + comp) / count
}

// ---------------------------------------------------------------------------
// Forward implementations.
// ---------------------------------------------------------------------------

impl<S: Scalar> Tensor<S> {
    /// 2-D convolution over a `(batch, channels, height, width)` tensor.
    pub fn conv2d(&self, params: &ConvParams<S>) -> Result<Tensor<S>> {
        let (b, cin, h, w) = self.shape().nchw()?;
        if cin != params.in_channels() {
            return Err(Error::InvalidInput(format!(
                "convolution expects {} input channels, got {cin}",
                params.in_channels()
            )));
        }
        let (cout, kernel) = (params.out_channels(), params.kernel());
        let (stride, padding) = (params.stride(), params.padding());
        let ho = conv_out_dim(h, kernel, stride, padding)?;
        let wo = conv_out_dim(w, kernel, stride, padding)?;
        let k = cin * kernel * kernel;
        let ow = ho * wo;

        let x = self.data();
        let wdata = params.weight().data();
        let mut out = vec![S::zero(); b * cout * ow];
        let mut cols = vec![S::zero(); k * ow];
        for bi in 0..b {
            im2col(
                &x[bi * cin * h * w..(bi + 1) * cin * h * w],
                cin, h, w, kernel, kernel, stride, padding, ho, wo, &mut cols,
            );
            matmul_acc(&wdata, cout, k, &cols, ow, &mut out[bi * cout * ow..(bi + 1) * cout * ow]);
            if let Some(bias) = params.bias() {
                let bdata = bias.data();
                for (co, &bv) in bdata.iter().enumerate() {
                    for o in &mut out[bi * cout * ow + co * ow..bi * cout * ow + (co + 1) * ow] {
                        *o += bv;
                    }
                }
            }
        }
        drop(x);
        drop(wdata);

        Ok(Tensor::from_op(
            Shape::new(&[b, cout, ho, wo])?,
            out,
            Op::Conv2d {
                input: self.clone(),
                weight: params.weight().clone(),
                bias: params.bias().cloned(),
                stride,
                padding,
            },
        ))
    }

    /// Batch normalization over the channel axis of a rank-4 tensor.
    ///
    /// In training mode the batch mean and biased variance normalize the
    /// activations and update `state`'s running statistics; in inference
    /// mode the running statistics are used and nothing is mutated.
    pub fn batch_norm(&self, state: &BatchNormState<S>) -> Result<Tensor<S>> {
        let (b, c, h, w) = self.shape().nchw()?;
        if c != state.channels() {
            return Err(Error::InvalidInput(format!(
                "batch norm expects {} channels, got {c}",
                state.channels()
            )));
        }
        let hw = h * w;
        let m = b * hw;
        let x = self.data();
        let gamma = state.gamma().data();
        let beta = state.beta().data();

        let mut x_hat = vec![S::zero(); x.len()];
        let mut inv_std = vec![S::zero(); c];
        let mut out = vec![S::zero(); x.len()];
        let training = state.is_training();

        for ch in 0..c {
            let (mean, var) = if training {
                let mean = compensated_mean(
                    (0..b).flat_map(|bi| {
                        let base = (bi * c + ch) * hw;
                        x[base..base + hw].iter().copied()
                    }),
                    m,
                );
                let var = compensated_mean(
                    (0..b).flat_map(|bi| {
                        let base = (bi * c + ch) * hw;
                        x[base..base + hw].iter().map(move |&v| {
                            let d = v - mean;
                            d * d
                        })
                    }),
                    m,
                );
                let momentum = state.momentum();
                let blend = S::one() - momentum;
                let prior_mean = state.running_mean().data()[ch];
                state.running_mean().data_mut()[ch] = momentum * prior_mean + blend * mean;
                let prior_var = state.running_var().data()[ch];
                state.running_var().data_mut()[ch] = momentum * prior_var + blend * var;
                (mean, var)
            } else {
                (state.running_mean().data()[ch], state.running_var().data()[ch])
            };
            let istd = (var + state.eps()).sqrt().recip();
            inv_std[ch] = istd;
            for bi in 0..b {
                let base = (bi * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (x[i] - mean) * istd;
                    x_hat[i] = xh;
                    out[i] = gamma[ch] * xh + beta[ch];
                }
            }
        }
        drop(x);
        drop(gamma);
        drop(beta);

        Ok(Tensor::from_op(
            self.shape().clone(),
            out,
            Op::BatchNorm {
                input: self.clone(),
                gamma: state.gamma().clone(),
                beta: state.beta().clone(),
                x_hat,
                inv_std,
                training,
            },
        ))
    }

    /// Elementwise `max(0, x)`.
    pub fn relu(&self) -> Tensor<S> {
        let out = self
            .data()
            .iter()
            .map(|&v| if v > S::zero() { v } else { S::zero() })
            .collect();
        Tensor::from_op(self.shape().clone(), out, Op::Relu { input: self.clone() })
    }

    /// Average pooling with a square window. Trailing rows or columns that
    /// do not fill a window are dropped (floor semantics).
    pub fn avg_pool2d(&self, window: usize, stride: usize) -> Result<Tensor<S>> {
        let (b, c, h, w) = self.shape().nchw()?;
        if window == 0 || stride == 0 {
            return Err(Error::InvalidInput("pooling window and stride must be at least 1".into()));
        }
        if window > h || window > w {
            return Err(Error::InvalidInput(format!(
                "pooling window {window} does not fit input {h}x{w}"
            )));
        }
        let ho = (h - window) / stride + 1;
        let wo = (w - window) / stride + 1;
        let x = self.data();
        let norm = S::from_usize(window * window);
        let mut out = vec![S::zero(); b * c * ho * wo];
        for bc in 0..b * c {
            let src = &x[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * ho * wo..(bc + 1) * ho * wo];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = S::zero();
                    for ky in 0..window {
                        let row = (oy * stride + ky) * w + ox * stride;
                        for kx in 0..window {
                            acc += src[row + kx];
                        }
                    }
                    dst[oy * wo + ox] = acc / norm;
                }
            }
        }
        drop(x);
        Ok(Tensor::from_op(
            Shape::new(&[b, c, ho, wo])?,
            out,
            Op::AvgPool2d { input: self.clone(), window, stride },
        ))
    }

    /// Pools each channel's full spatial extent down to 1x1.
    pub fn global_avg_pool(&self) -> Result<Tensor<S>> {
        let (_, _, h, w) = self.shape().nchw()?;
        if h != w {
            return Err(Error::InvalidInput(format!(
                "global pooling expects square feature maps, got {h}x{w}"
            )));
        }
        self.avg_pool2d(h, h)
    }

    /// Splits the channel axis into the given `(start, len)` bands, each
    /// returned as its own tensor. Bands may not exceed the channel count.
    pub fn channel_slice(&self, ranges: &[(usize, usize)]) -> Result<Vec<Tensor<S>>> {
        let (b, c, h, w) = self.shape().nchw()?;
        let hw = h * w;
        let x = self.data();
        let mut out = Vec::with_capacity(ranges.len());
        for &(start, len) in ranges {
            if len == 0 {
                return Err(Error::InvalidInput("channel slice length must be at least 1".into()));
            }
            if start + len > c {
                return Err(Error::InvalidInput(format!(
                    "channel slice {start}..{} exceeds {c} channels",
                    start + len
                )));
            }
            let mut data = vec![S::zero(); b * len * hw];
            for bi in 0..b {
                let src = (bi * c + start) * hw;
                let dst = bi * len * hw;
                data[dst..dst + len * hw].copy_from_slice(&x[src..src + len * hw]);
            }
            out.push(Tensor::from_op(
                Shape::new(&[b, len, h, w])?,
                data,
                Op::ChannelSlice { input: self.clone(), start },
            ));
        }
        Ok(out)
    }

    /// Fully connected map of a `(batch, features)` tensor.
    pub fn linear(&self, params: &LinearParams<S>) -> Result<Tensor<S>> {
        let (rows, cols) = self.shape().rows_cols()?;
        if cols != params.in_features() {
            return Err(Error::InvalidInput(format!(
                "linear layer expects {} input features, got {cols}",
                params.in_features()
            )));
        }
        let out_features = params.out_features();
        let x = self.data();
        let wdata = params.weight().data();
        let mut out = vec![S::zero(); rows * out_features];
        for r in 0..rows {
            let x_row = &x[r * cols..(r + 1) * cols];
            for o in 0..out_features {
                let w_row = &wdata[o * cols..(o + 1) * cols];
                let mut acc = S::zero();
                for (&xv, &wv) in x_row.iter().zip(w_row) {
                    acc += xv * wv;
                }
                out[r * out_features + o] = acc;
            }
        }
        if let Some(bias) = params.bias() {
            let bdata = bias.data();
            for r in 0..rows {
                for (o, &bv) in bdata.iter().enumerate() {
                    out[r * out_features + o] += bv;
                }
            }
        }
        drop(x);
        drop(wdata);
        Ok(Tensor::from_op(
            Shape::new(&[rows, out_features])?,
            out,
            Op::Linear {
                input: self.clone(),
                weight: params.weight().clone(),
                bias: params.bias().cloned(),
            },
        ))
    }

    /// Mean softmax cross-entropy of `(batch, classes)` logits against
    /// integer labels. Rows are shifted by their maximum before
    /// exponentiation, so arbitrarily large logits stay finite.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Tensor<S>> {
        let (rows, classes) = self.shape().rows_cols()?;
        if labels.len() != rows {
            return Err(Error::InvalidInput(format!(
                "expected {rows} labels for {rows} logit rows, got {}",
                labels.len()
            )));
        }
        let x = self.data();
        let mut probs = vec![S::zero(); rows * classes];
        let mut total = S::zero();
        for r in 0..rows {
            let label = labels[r];
            if label >= classes {
                return Err(Error::InvalidInput(format!(
                    "label {label} out of range for {classes} classes (row {r})"
                )));
            }
            let row = &x[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for (k, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[r * classes + k] = e;
                z += e;
            }
            for p in &mut probs[r * classes..(r + 1) * classes] {
                *p = *p / z;
            }
            total += z.ln() - (row[label] - max);
        }
        drop(x);
        let loss = total / S::from_usize(rows);
        Ok(Tensor::from_op(
            Shape::new(&[1])?,
            vec![loss],
            Op::SoftmaxCrossEntropy { logits: self.clone(), probs, labels: labels.to_vec() },
        ))
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        if self.shape() != other.shape() {
            return Err(Error::InvalidInput(format!(
                "cannot add tensors of shapes {} and {}",
                self.shape(),
                other.shape()
            )));
        }
        let a = self.data();
        let b = other.data();
        let out = a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect();
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            self.shape().clone(),
            out,
            Op::Add { lhs: self.clone(), rhs: other.clone() },
        ))
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor<S>> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.numel() {
            return Err(Error::InvalidInput(format!(
                "cannot reshape {} into {shape}",
                self.shape()
            )));
        }
        Ok(Tensor::from_op(shape, self.to_vec(), Op::Reshape { input: self.clone() }))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&self, factor: f64) -> Tensor<S> {
        let factor = S::from_f64(factor);
        let out = self.data().iter().map(|&v| v * factor).collect();
        Tensor::from_op(self.shape().clone(), out, Op::Scale { input: self.clone(), factor })
    }

    /// Sums every element into a one-element tensor.
    pub fn sum(&self) -> Tensor<S> {
        let mut acc = S::zero();
        for &v in self.data().iter() {
            acc += v;
        }
        Tensor::from_op(
            Shape::new(&[1]).expect("static shape"),
            vec![acc],
            Op::Sum { input: self.clone() },
        )
    }
}

/// Elementwise mean of equally shaped tensors.
///
/// The aggregation combining a unit's incoming signals. Exactness
/// guarantees: one input is returned value-identical, and `k` identical
/// inputs average to themselves bit for bit (see [`compensated_mean`]).
pub fn mean_combine<S: Scalar>(inputs: &[Tensor<S>]) -> Result<Tensor<S>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::InvalidInput("mean_combine needs at least one tensor".into()))?;
    for t in inputs {
        if t.shape() != first.shape() {
            return Err(Error::InvalidInput(format!(
                "mean_combine operands disagree on shape: {} vs {}",
                first.shape(),
                t.shape()
            )));
        }
    }
    let k = inputs.len();
    let buffers: Vec<_> = inputs.iter().map(|t| t.data()).collect();
    let mut out = vec![S::zero(); first.numel()];
    for (i, o) in out.iter_mut().enumerate() {
        *o = compensated_mean(buffers.iter().map(|b| b[i]), k);
    }
    drop(buffers);
    Ok(Tensor::from_op(
        first.shape().clone(),
        out,
        Op::MeanCombine { inputs: inputs.to_vec() },
    ))
}

/// Concatenates rank-4 tensors along the channel axis.
pub fn channel_concat<S: Scalar>(inputs: &[Tensor<S>]) -> Result<Tensor<S>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::InvalidInput("channel_concat needs at least one tensor".into()))?;
    let (b, _, h, w) = first.shape().nchw()?;
    let mut total_c = 0;
    for t in inputs {
        let (tb, tc, th, tw) = t.shape().nchw()?;
        if (tb, th, tw) != (b, h, w) {
            return Err(Error::InvalidInput(format!(
                "channel_concat operands disagree on batch or spatial dims: {} vs {}",
                first.shape(),
                t.shape()
            )));
        }
        total_c += tc;
    }
    let hw = h * w;
    let mut out = vec![S::zero(); b * total_c * hw];
    for bi in 0..b {
        let mut offset = 0;
        for t in inputs {
            let tc = t.dims()[1];
            let src = t.data();
            let dst = (bi * total_c + offset) * hw;
            out[dst..dst + tc * hw].copy_from_slice(&src[bi * tc * hw..(bi + 1) * tc * hw]);
            offset += tc;
        }
    }
    Ok(Tensor::from_op(
        Shape::new(&[b, total_c, h, w])?,
        out,
        Op::ChannelConcat { inputs: inputs.to_vec() },
    ))
}

// ---------------------------------------------------------------------------
// Backward implementations that are too large to inline in the match.
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<S: Scalar>(
    node: &Tensor<S>,
    grad: &[S],
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    padding: usize,
    sink: &mut dyn FnMut(&Tensor<S>, Vec<S>),
) -> Result<()> {
    let (b, cout, ho, wo) = node.shape().nchw()?;
    let (_, cin, h, w) = input.shape().nchw()?;
    let kernel = weight.dims()[2];
    let k = cin * kernel * kernel;
    let ow = ho * wo;

    let need_dx = wants_grad(input);
    let need_dw = wants_grad(weight);
    let need_db = bias.map(wants_grad).unwrap_or(false);

    let mut dx = if need_dx { vec![S::zero(); input.numel()] } else { Vec::new() };
    let mut dw = if need_dw { vec![S::zero(); weight.numel()] } else { Vec::new() };
    let mut db = if need_db { vec![S::zero(); cout] } else { Vec::new() };

    let x = input.data();
    let wdata = weight.data();
    let mut w_t = Vec::new();
    if need_dx {
        w_t = vec![S::zero(); k * cout];
        transpose_into(&wdata, cout, k, &mut w_t);
    }
    let mut cols = vec![S::zero(); k * ow];
    let mut cols_t = if need_dw { vec![S::zero(); k * ow] } else { Vec::new() };
    let mut cols_grad = if need_dx { vec![S::zero(); k * ow] } else { Vec::new() };

    for bi in 0..b {
        let g = &grad[bi * cout * ow..(bi + 1) * cout * ow];
        if need_dw {
            im2col(
                &x[bi * cin * h * w..(bi + 1) * cin * h * w],
                cin, h, w, kernel, kernel, stride, padding, ho, wo, &mut cols,
            );
            transpose_into(&cols, k, ow, &mut cols_t);
            matmul_acc(g, cout, ow, &cols_t, k, &mut dw);
        }
        if need_dx {
            cols_grad.fill(S::zero());
            matmul_acc(&w_t, k, cout, g, ow, &mut cols_grad);
            col2im_acc(
                &cols_grad,
                cin, h, w, kernel, kernel, stride, padding, ho, wo,
                &mut dx[bi * cin * h * w..(bi + 1) * cin * h * w],
            );
        }
        if need_db {
            for co in 0..cout {
                for &gv in &g[co * ow..(co + 1) * ow] {
                    db[co] += gv;
                }
            }
        }
    }
    drop(x);
    drop(wdata);

    if need_dx {
        sink(input, dx);
    }
    if need_dw {
        sink(weight, dw);
    }
    if let Some(bias) = bias {
        if need_db {
            sink(bias, db);
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn batch_norm_backward<S: Scalar>(
    input: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    x_hat: &[S],
    inv_std: &[S],
    training: bool,
    grad: &[S],
    sink: &mut dyn FnMut(&Tensor<S>, Vec<S>),
) -> Result<()> {
    let (b, c, h, w) = input.shape().nchw()?;
    let hw = h * w;
    let m = S::from_usize(b * hw);
    let gamma_data = gamma.data();

    let need_dx = wants_grad(input);
    let mut dx = if need_dx { vec![S::zero(); input.numel()] } else { Vec::new() };
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];

    for ch in 0..c {
        let mut sum_g = S::zero();
        let mut sum_g_xhat = S::zero();
        for bi in 0..b {
            let base = (bi * c + ch) * hw;
            for i in base..base + hw {
                sum_g += grad[i];
                sum_g_xhat += grad[i] * x_hat[i];
            }
        }
        dgamma[ch] = sum_g_xhat;
        dbeta[ch] = sum_g;
        if need_dx {
            let scale = gamma_data[ch] * inv_std[ch];
            if training {
                let mean_g = sum_g / m;
                let mean_g_xhat = sum_g_xhat / m;
                for bi in 0..b {
                    let base = (bi * c + ch) * hw;
                    for i in base..base + hw {
                        dx[i] = scale * (grad[i] - mean_g - x_hat[i] * mean_g_xhat);
                    }
                }
            } else {
                for bi in 0..b {
                    let base = (bi * c + ch) * hw;
                    for i in base..base + hw {
                        dx[i] = scale * grad[i];
                    }
                }
            }
        }
    }
    drop(gamma_data);

    if need_dx {
        sink(input, dx);
    }
    if wants_grad(gamma) {
        sink(gamma, dgamma);
    }
    if wants_grad(beta) {
        sink(beta, dbeta);
    }
    Ok(())
}

fn avg_pool_backward<S: Scalar>(
    node: &Tensor<S>,
    grad: &[S],
    input: &Tensor<S>,
    window: usize,
    stride: usize,
    sink: &mut dyn FnMut(&Tensor<S>, Vec<S>),
) -> Result<()> {
    if !wants_grad(input) {
        return Ok(());
    }
    let (b, c, ho, wo) = node.shape().nchw()?;
    let (_, _, h, w) = input.shape().nchw()?;
    let norm = S::from_usize(window * window);
    let mut dx = vec![S::zero(); input.numel()];
    for bc in 0..b * c {
        let g = &grad[bc * ho * wo..(bc + 1) * ho * wo];
        let dst = &mut dx[bc * h * w..(bc + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let share = g[oy * wo + ox] / norm;
                for ky in 0..window {
                    let row = (oy * stride + ky) * w + ox * stride;
                    for kx in 0..window {
                        dst[row + kx] += share;
                    }
                }
            }
        }
    }
    sink(input, dx);
    Ok(())
}

fn channel_concat_backward<S: Scalar>(
    node: &Tensor<S>,
    grad: &[S],
    inputs: &[Tensor<S>],
    sink: &mut dyn FnMut(&Tensor<S>, Vec<S>),
) -> Result<()> {
    let (b, total_c, h, w) = node.shape().nchw()?;
    let hw = h * w;
    let mut offset = 0;
    for t in inputs {
        let tc = t.dims()[1];
        if wants_grad(t) {
            let mut dt = vec![S::zero(); t.numel()];
            for bi in 0..b {
                let src = (bi * total_c + offset) * hw;
                let dst = bi * tc * hw;
                dt[dst..dst + tc * hw].copy_from_slice(&grad[src..src + tc * hw]);
            }
            sink(t, dt);
        }
        offset += tc;
    }
    Ok(())
}

fn linear_backward<S: Scalar>(
    grad: &[S],
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    sink: &mut dyn FnMut(&Tensor<S>, Vec<S>),
) -> Result<()> {
    let (rows, cols) = input.shape().rows_cols()?;
    let out_features = weight.dims()[0];

    if wants_grad(input) {
        let wdata = weight.data();
        let mut dx = vec![S::zero(); rows * cols];
        matmul_acc(grad, rows, out_features, &wdata, cols, &mut dx);
        drop(wdata);
        sink(input, dx);
    }
    if wants_grad(weight) {
        let x = input.data();
        let mut dw = vec![S::zero(); out_features * cols];
        for r in 0..rows {
            let x_row = &x[r * cols..(r + 1) * cols];
            for o in 0..out_features {
                let gv = grad[r * out_features + o];
                let dw_row = &mut dw[o * cols..(o + 1) * cols];
                for (d, &xv) in dw_row.iter_mut().zip(x_row) {
                    *d += gv * xv;
                }
            }
        }
        drop(x);
        sink(weight, dw);
    }
    if let Some(bias) = bias {
        if wants_grad(bias) {
            let mut db = vec![S::zero(); out_features];
            for r in 0..rows {
                for (o, d) in db.iter_mut().enumerate() {
                    *d += grad[r * out_features + o];
                }
            }
            sink(bias, db);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn param(dims: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::param(dims, data).unwrap()
    }

    /// Direct sliding-window convolution, the independent reference for the
    /// lowered kernel. Accumulates in (channel, ky, kx) order, bias last —
    /// the same order the production kernel commits to.
    #[allow(clippy::too_many_arguments)]
    fn conv_reference(
        x: &[f32], b: usize, cin: usize, h: usize, w: usize,
        weight: &[f32], cout: usize, kernel: usize,
        bias: Option<&[f32]>, stride: usize, padding: usize,
    ) -> Vec<f32> {
        let ho = (h + 2 * padding - kernel) / stride + 1;
        let wo = (w + 2 * padding - kernel) / stride + 1;
        let mut out = vec![0.0f32; b * cout * ho * wo];
        for bi in 0..b {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0f32;
                        for ci in 0..cin {
                            for ky in 0..kernel {
                                for kx in 0..kernel {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = x[((bi * cin + ci) * h + iy as usize) * w + ix as usize];
                                    let wv = weight[((co * cin + ci) * kernel + ky) * kernel + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        if let Some(bias) = bias {
                            acc += bias[co];
                        }
                        out[((bi * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_all_ones_kernel_sums_neighborhoods() {
        // 2x2 input, 3x3 all-ones kernel, padding 1: every output counts the
        // full input.
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = param(&[1, 1, 3, 3], vec![1.0; 9]);
        let conv = ConvParams::from_parts(w, None, 1, 1).unwrap();
        let y = x.conv2d(&conv).unwrap();
        assert_eq!(y.dims(), &[1, 1, 2, 2]);
        assert_eq!(y.to_vec(), vec![10.0, 10.0, 10.0, 10.0]);
    }

    #[test]
    fn conv_identity_kernel_is_bitwise_identity() {
        // Kernel with a centered unit impulse per channel reproduces the
        // input exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x_data: Vec<f32> = (0..2 * 3 * 5 * 5).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let x = Tensor::<f32>::from_vec(&[2, 3, 5, 5], x_data.clone()).unwrap();
        let mut w = vec![0.0f32; 3 * 3 * 3 * 3];
        for ch in 0..3 {
            w[((ch * 3 + ch) * 3 + 1) * 3 + 1] = 1.0;
        }
        let conv = ConvParams::from_parts(Tensor::param(&[3, 3, 3, 3], w).unwrap(), None, 1, 1).unwrap();
        let y = x.conv2d(&conv).unwrap();
        let same = x_data
            .iter()
            .zip(y.to_vec())
            .all(|(&a, b)| a.to_bits() == b.to_bits());
        assert!(same, "identity kernel must reproduce inputs bit for bit");
    }

    #[test]
    fn conv_lowered_kernel_matches_direct_loop_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(701);
        for &(b, cin, cout, h, w, kernel, stride, padding, bias) in &[
            (2usize, 3usize, 4usize, 6usize, 6usize, 3usize, 1usize, 1usize, true),
            (1, 2, 5, 7, 5, 3, 2, 1, false),
            (3, 1, 2, 4, 4, 1, 1, 0, true),
            (1, 4, 3, 5, 5, 3, 1, 0, false),
        ] {
            let x_data: Vec<f32> = (0..b * cin * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let w_data: Vec<f32> =
                (0..cout * cin * kernel * kernel).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b_data: Vec<f32> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let expect = conv_reference(
                &x_data, b, cin, h, w, &w_data, cout, kernel,
                bias.then_some(b_data.as_slice()), stride, padding,
            );
            let x = Tensor::<f32>::from_vec(&[b, cin, h, w], x_data).unwrap();
            let weight = Tensor::param(&[cout, cin, kernel, kernel], w_data).unwrap();
            let bias_t = bias.then(|| Tensor::param(&[cout], b_data).unwrap());
            let conv = ConvParams::from_parts(weight, bias_t, stride, padding).unwrap();
            let y = x.conv2d(&conv).unwrap();
            let got = y.to_vec();
            assert_eq!(got.len(), expect.len());
            for (i, (&g, &e)) in got.iter().zip(&expect).enumerate() {
                assert_eq!(g.to_bits(), e.to_bits(), "element {i} differs: {g} vs {e}");
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_oversized_kernel() {
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]).unwrap();
        let conv = ConvParams::<f32>::new(2, 4, 3, 1, 1, false).unwrap();
        assert!(matches!(x.conv2d(&conv), Err(Error::InvalidInput(_))));
        let conv = ConvParams::<f32>::new(2, 3, 7, 1, 1, false).unwrap();
        assert!(matches!(x.conv2d(&conv), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn batch_norm_normalizes_and_updates_running_stats() {
        // One channel, values 1..4: mean 2.5, biased variance 1.25.
        let x = Tensor::<f64>::from_vec(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bn = BatchNormState::<f64>::new(1).unwrap();
        let y = x.batch_norm(&bn).unwrap();
        let istd = 1.0 / (1.25f64 + 1e-5).sqrt();
        let expect: Vec<f64> = [1.0, 2.0, 3.0, 4.0].iter().map(|v| (v - 2.5) * istd).collect();
        for (got, want) in y.to_vec().iter().zip(&expect) {
            assert_relative_eq!(got, want, max_relative = 1e-12);
        }
        // running = 0.9 * initial + 0.1 * batch statistic.
        assert_relative_eq!(bn.running_mean().to_vec()[0], 0.25, max_relative = 1e-12);
        assert_relative_eq!(bn.running_var().to_vec()[0], 0.9 + 0.125, max_relative = 1e-12);
    }

    #[test]
    fn batch_norm_output_has_zero_mean_unit_variance_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let dims = [4usize, 3, 5, 5];
        let n: usize = dims.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..9.0)).collect();
        let x = Tensor::<f64>::from_vec(&dims, data).unwrap();
        let bn = BatchNormState::<f64>::new(3).unwrap();
        let y = x.batch_norm(&bn).unwrap();
        let out = y.to_vec();
        let per_channel = 4 * 5 * 5;
        for ch in 0..3 {
            let mut vals = Vec::with_capacity(per_channel);
            for bi in 0..4 {
                let base = (bi * 3 + ch) * 25;
                vals.extend_from_slice(&out[base..base + 25]);
            }
            let mean: f64 = vals.iter().sum::<f64>() / per_channel as f64;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per_channel as f64;
            assert_relative_eq!(mean, 0.0, epsilon = 1e-12);
            assert_relative_eq!(var, 1.0, max_relative = 1e-4);
        }
    }

    #[test]
    fn batch_norm_inference_uses_running_stats_and_mutates_nothing() {
        let bn = BatchNormState::<f64>::new(1).unwrap();
        bn.running_mean().data_mut()[0] = 2.0;
        bn.running_var().data_mut()[0] = 4.0;
        bn.set_training(false);
        let x = Tensor::<f64>::from_vec(&[1, 1, 1, 2], vec![2.0, 6.0]).unwrap();
        let y = x.batch_norm(&bn).unwrap();
        let istd = 1.0 / (4.0f64 + 1e-5).sqrt();
        assert_relative_eq!(y.to_vec()[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(y.to_vec()[1], 4.0 * istd, max_relative = 1e-12);
        assert_eq!(bn.running_mean().to_vec()[0], 2.0);
        assert_eq!(bn.running_var().to_vec()[0], 4.0);
    }

    #[test]
    fn relu_clamps_and_masks_gradient() {
        let x = param(&[4], vec![-2.0, -0.0, 0.5, 3.0]);
        let y = x.relu();
        assert_eq!(y.to_vec(), vec![0.0, 0.0, 0.5, 3.0]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn avg_pool_averages_windows_exactly() {
        let x = param(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = x.avg_pool2d(2, 2).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1, 1]);
        assert_eq!(y.to_vec(), vec![2.5]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn global_avg_pool_requires_square_maps() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]).unwrap();
        assert_eq!(x.global_avg_pool().unwrap().dims(), &[1, 2, 1, 1]);
        let rect = Tensor::<f64>::zeros(&[1, 2, 4, 6]).unwrap();
        assert!(rect.global_avg_pool().is_err());
    }

    #[test]
    fn mean_combine_of_one_tensor_is_value_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f32> = (0..64).map(|_| rng.gen_range(-1e3..1e3)).collect();
        let x = Tensor::<f32>::from_vec(&[1, 4, 4, 4], data.clone()).unwrap();
        let y = mean_combine(&[x]).unwrap();
        for (a, b) in data.iter().zip(y.to_vec()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn mean_combine_of_identical_tensors_is_exact_for_any_count() {
        // The compensated mean must return x exactly when averaging k copies
        // of x, across magnitudes where a plain sum-then-divide fails.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for &k in &[1usize, 2, 3, 4, 5, 6, 7, 8, 9, 16, 31] {
            for _ in 0..200 {
                let exponent = rng.gen_range(-20.0..20.0);
                let v: f32 = rng.gen_range(-1.0f32..1.0) * 10f32.powf(exponent);
                let x = Tensor::<f32>::from_vec(&[1, 1, 1, 1], vec![v]).unwrap();
                let copies: Vec<_> = (0..k).map(|_| x.clone()).collect();
                let y = mean_combine(&copies).unwrap();
                assert_eq!(
                    y.to_vec()[0].to_bits(),
                    v.to_bits(),
                    "mean of {k} copies of {v:e} drifted to {:e}",
                    y.to_vec()[0]
                );
            }
        }
    }

    #[test]
    fn mean_combine_matches_wide_reference_on_mixed_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for k in 2..8usize {
            let tensors: Vec<Tensor<f32>> = (0..k)
                .map(|_| {
                    let data: Vec<f32> = (0..16).map(|_| rng.gen_range(-100.0..100.0)).collect();
                    Tensor::from_vec(&[1, 1, 4, 4], data).unwrap()
                })
                .collect();
            let y = mean_combine(&tensors).unwrap();
            let buffers: Vec<Vec<f32>> = tensors.iter().map(|t| t.to_vec()).collect();
            for i in 0..16 {
                let reference: f64 = buffers.iter().map(|b| f64::from(b[i])).sum::<f64>() / k as f64;
                assert_relative_eq!(f64::from(y.to_vec()[i]), reference, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn mean_combine_gradient_splits_evenly() {
        let a = param(&[2], vec![1.0, 2.0]);
        let b = param(&[2], vec![3.0, 4.0]);
        let y = mean_combine(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(y.to_vec(), vec![2.0, 3.0]);
        y.sum().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![0.5, 0.5]);
        assert_eq!(b.grad().unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn mean_combine_rejects_empty_and_mismatched_inputs() {
        assert!(mean_combine::<f32>(&[]).is_err());
        let a = Tensor::<f32>::zeros(&[1, 2, 2, 2]).unwrap();
        let b = Tensor::<f32>::zeros(&[1, 3, 2, 2]).unwrap();
        assert!(mean_combine(&[a, b]).is_err());
    }

    #[test]
    fn concat_then_slice_roundtrips_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a_data: Vec<f32> = (0..2 * 2 * 3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b_data: Vec<f32> = (0..2 * 5 * 3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = Tensor::<f32>::from_vec(&[2, 2, 3, 3], a_data.clone()).unwrap();
        let b = Tensor::<f32>::from_vec(&[2, 5, 3, 3], b_data.clone()).unwrap();
        let joined = channel_concat(&[a, b]).unwrap();
        assert_eq!(joined.dims(), &[2, 7, 3, 3]);
        let parts = joined.channel_slice(&[(0, 2), (2, 5)]).unwrap();
        assert_eq!(parts[0].to_vec(), a_data);
        assert_eq!(parts[1].to_vec(), b_data);
    }

    #[test]
    fn concat_and_slice_route_gradients_to_their_bands() {
        let a = param(&[1, 1, 1, 2], vec![1.0, 2.0]);
        let b = param(&[1, 2, 1, 2], vec![3.0, 4.0, 5.0, 6.0]);
        let joined = channel_concat(&[a.clone(), b.clone()]).unwrap();
        // Scale channel bands differently so the routed gradients differ.
        let parts = joined.channel_slice(&[(0, 1), (1, 2)]).unwrap();
        let loss = parts[0].scale(2.0).sum().add(&parts[1].scale(3.0).sum()).unwrap();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![2.0, 2.0]);
        assert_eq!(b.grad().unwrap(), vec![3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn channel_slice_validates_ranges() {
        let x = Tensor::<f32>::zeros(&[1, 4, 2, 2]).unwrap();
        assert!(x.channel_slice(&[(0, 0)]).is_err());
        assert!(x.channel_slice(&[(3, 2)]).is_err());
        assert!(x.channel_slice(&[(0, 4)]).is_ok());
    }

    #[test]
    fn linear_computes_affine_map() {
        let x = Tensor::<f64>::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = param(&[2, 3], vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]);
        let b = param(&[2], vec![10.0, 20.0]);
        let lin = LinearParams::from_parts(w, Some(b)).unwrap();
        let y = x.linear(&lin).unwrap();
        assert_eq!(y.dims(), &[2, 2]);
        assert_eq!(y.to_vec(), vec![8.0, 23.0, 8.0, 27.5]);
    }

    #[test]
    fn softmax_cross_entropy_matches_closed_forms() {
        // Uniform logits over K classes give loss ln K.
        let x = Tensor::<f64>::from_vec(&[1, 4], vec![0.0; 4]).unwrap();
        let loss = x.softmax_cross_entropy(&[2]).unwrap();
        assert_relative_eq!(loss.item().unwrap(), 4.0f64.ln(), max_relative = 1e-15);

        // Frozen value: logits (1, 2, 3), label 2 -> ln(1 + e^-1 + e^-2).
        let x = param(&[1, 3], vec![1.0, 2.0, 3.0]);
        let loss = x.softmax_cross_entropy(&[2]).unwrap();
        assert_relative_eq!(loss.item().unwrap(), 0.40760596444438079, max_relative = 1e-14);
        loss.backward().unwrap();
        let g = x.grad().unwrap();
        // Gradient is softmax - onehot.
        let z = 1.0 + (-1.0f64).exp() + (-2.0f64).exp();
        let probs = [(-2.0f64).exp() / z, (-1.0f64).exp() / z, 1.0 / z];
        assert_relative_eq!(g[0], probs[0], max_relative = 1e-12);
        assert_relative_eq!(g[1], probs[1], max_relative = 1e-12);
        assert_relative_eq!(g[2], probs[2] - 1.0, max_relative = 1e-12);
    }

    #[test]
    fn softmax_cross_entropy_is_stable_for_huge_logits() {
        let x = Tensor::<f64>::from_vec(&[1, 2], vec![10_000.0, 9_990.0]).unwrap();
        let loss = x.softmax_cross_entropy(&[0]).unwrap().item().unwrap();
        assert!(loss.is_finite());
        assert_relative_eq!(loss, (1.0 + (-10.0f64).exp()).ln(), max_relative = 1e-12);
    }

    #[test]
    fn softmax_cross_entropy_averages_rows() {
        let x = Tensor::<f64>::from_vec(&[2, 2], vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let loss = x.softmax_cross_entropy(&[0, 1]).unwrap();
        assert_relative_eq!(loss.item().unwrap(), 2.0f64.ln(), max_relative = 1e-15);
    }

    #[test]
    fn softmax_cross_entropy_validates_labels() {
        let x = Tensor::<f64>::zeros(&[2, 3]).unwrap();
        assert!(matches!(x.softmax_cross_entropy(&[0]), Err(Error::InvalidInput(_))));
        assert!(matches!(x.softmax_cross_entropy(&[0, 3]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn add_requires_matching_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 2]).unwrap();
        let b = Tensor::<f32>::zeros(&[4]).unwrap();
        assert!(matches!(a.add(&b), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn reshape_preserves_data_and_routes_gradient() {
        let x = param(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = x.reshape(&[6]).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
        assert!(x.reshape(&[4]).is_err());
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn scale_and_sum_compose() {
        let x = param(&[3], vec![1.0, 2.0, 3.0]);
        let y = x.scale(-2.0).sum();
        assert_eq!(y.item().unwrap(), -12.0);
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![-2.0; 3]);
    }
}
