//! Forward and backward kernels for the fixed op set the U-Net needs:
//! 3x3/1x1 convolution, 2x2 transposed convolution, 2x2 max-pooling,
//! batch normalization, ReLU, sigmoid and channel concatenation.
//!
//! Every forward returns the output together with an [`OpRecord`] carrying
//! the cached intermediates the matching backward pass needs; [`backprop`]
//! turns a record plus an upstream gradient into exact analytic gradients.
//! Kernels may split work across rayon workers, but each output element is
//! owned by exactly one worker and accumulated in a fixed order, so results
//! are bitwise independent of thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Forward-pass mode. Train mode caches intermediates for backprop and lets
/// batch normalization update its running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Convolution parameters: weights shaped (out_channels, in_channels, kh, kw)
/// plus a per-output-channel bias.
///
/// Three geometries are supported, matching the network's layer types:
/// 3x3 pad-1 stride-1 (spatial-size preserving), 1x1 pad-0 stride-1, and the
/// transposed 2x2 stride-2 kernel used for upsampling.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub weights: Tensor,
    pub bias: Vec<f32>,
    pub padding: usize,
    pub stride: usize,
}

impl ConvKernel {
    pub fn new(weights: Tensor, bias: Vec<f32>, padding: usize, stride: usize) -> Result<ConvKernel> {
        let [out_c, _in_c, kh, kw] = weights.shape();
        if kh != kw {
            return Err(Error::Config(format!("kernel must be square, got {kh}x{kw}")));
        }
        let ok = matches!((kh, padding, stride), (3, 1, 1) | (1, 0, 1) | (2, 0, 2));
        if !ok {
            return Err(Error::Config(format!(
                "unsupported kernel geometry: size {kh}, padding {padding}, stride {stride}"
            )));
        }
        if bias.len() != out_c {
            return Err(Error::Config(format!(
                "bias length {} does not match {} output channels",
                bias.len(),
                out_c
            )));
        }
        Ok(ConvKernel { weights, bias, padding, stride })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn ksize(&self) -> usize {
        self.weights.shape()[2]
    }

    /// Number of trainable values (weights + bias).
    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Per-channel batch-normalization state: trainable scale/shift plus running
/// statistics used in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub epsilon: f32,
}

impl BatchNormState {
    /// Fresh state for `channels` channels: gamma 1, beta 0, running mean 0,
    /// running variance 1.
    pub fn new(channels: usize, momentum: f32, epsilon: f32) -> Result<BatchNormState> {
        if !(momentum > 0.0 && momentum <= 1.0) {
            return Err(Error::Config(format!("momentum must be in (0, 1], got {momentum}")));
        }
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(BatchNormState {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            epsilon,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Cached intermediates from one forward call, sufficient to compute exact
/// analytic gradients without re-running the forward pass.
#[derive(Debug, Clone)]
pub enum OpRecord {
    Conv2d { x: Tensor, kernel: ConvKernel },
    ConvTranspose2d { x: Tensor, kernel: ConvKernel },
    /// `argmax` holds, per output element, the flat index of the winning
    /// input position within its (h, w) plane.
    MaxPool2x2 { in_shape: [usize; 4], argmax: Vec<u32> },
    BatchNorm { x_hat: Tensor, gamma: Vec<f32>, inv_std: Vec<f32> },
    Relu { active: Vec<bool>, shape: [usize; 4] },
    Sigmoid { y: Tensor },
    ConcatChannels { a_channels: usize, b_channels: usize, n: usize, h: usize, w: usize },
}

/// Gradients produced by [`backprop`] for one op.
#[derive(Debug)]
pub enum OpGrads {
    Conv { dx: Tensor, dweights: Tensor, dbias: Vec<f32> },
    MaxPool { dx: Tensor },
    BatchNorm { dx: Tensor, dgamma: Vec<f32>, dbeta: Vec<f32> },
    Activation { dx: Tensor },
    Concat { da: Tensor, db: Tensor },
}

impl OpGrads {
    /// The gradient w.r.t. the op's (first) input tensor.
    pub fn dx(&self) -> &Tensor {
        match self {
            OpGrads::Conv { dx, .. }
            | OpGrads::MaxPool { dx }
            | OpGrads::BatchNorm { dx, .. }
            | OpGrads::Activation { dx } => dx,
            OpGrads::Concat { da, .. } => da,
        }
    }
}

/// Dot product with eight independent accumulator lanes. The lane split is
/// part of the algorithm, so results are bitwise reproducible while the
/// inner loop stays vectorizable.
#[inline]
fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0f32; 8];
    let a_chunks = a.chunks_exact(8);
    let b_chunks = b.chunks_exact(8);
    let (a_rem, b_rem) = (a_chunks.remainder(), b_chunks.remainder());
    for (ca, cb) in a_chunks.zip(b_chunks) {
        for l in 0..8 {
            lanes[l] += ca[l] * cb[l];
        }
    }
    let mut acc = 0f32;
    for lane in lanes {
        acc += lane;
    }
    for (x, y) in a_rem.iter().zip(b_rem) {
        acc += x * y;
    }
    acc
}

fn check_in_channels(op: &str, x: &Tensor, k: &ConvKernel) -> Result<()> {
    if x.c() != k.in_channels() {
        return Err(Error::Config(format!(
            "{op}: input has {} channels but kernel expects {}",
            x.c(),
            k.in_channels()
        )));
    }
    Ok(())
}

/// 2-D convolution, stride 1, square kernel of size 1 or 3 with "same"
/// zero padding for the 3x3 case. Output shape (n, out_channels, h, w).
pub fn conv2d(x: &Tensor, k: &ConvKernel) -> Result<(Tensor, OpRecord)> {
    if k.stride != 1 {
        return Err(Error::Config(format!(
            "conv2d requires stride 1, got {} (use conv_transpose2d for upsampling)",
            k.stride
        )));
    }
    check_in_channels("conv2d", x, k)?;
    x.check_finite("conv2d input")?;

    let [n, cin, h, w] = x.shape();
    let cout = k.out_channels();
    let ks = k.ksize();
    let pad = k.padding;
    let oh = h + 2 * pad - ks + 1;
    let ow = w + 2 * pad - ks + 1;

    let mut y = Tensor::zeros([n, cout, oh, ow]);
    let weights = k.weights.data();
    let bias = &k.bias;
    let ohw = oh * ow;

    y.data_mut()
        .par_chunks_mut(ohw)
        .enumerate()
        .for_each(|(plane_idx, y_plane)| {
            let ni = plane_idx / cout;
            let co = plane_idx % cout;
            y_plane.fill(bias[co]);
            for ci in 0..cin {
                let x_plane = x.plane(ni, ci);
                for ky in 0..ks {
                    for kx in 0..ks {
                        let wv = weights[((co * cin + ci) * ks + ky) * ks + kx];
                        // y[i, j] += wv * x[i + ky - pad, j + kx - pad] over valid coords
                        let i0 = pad.saturating_sub(ky);
                        let i1 = (h + pad - ky).min(oh);
                        let j0 = pad.saturating_sub(kx);
                        let j1 = (w + pad - kx).min(ow);
                        if i0 >= i1 || j0 >= j1 {
                            continue;
                        }
                        for i in i0..i1 {
                            let xi = i + ky - pad;
                            let xs = xi * w + j0 + kx - pad;
                            let y_row = &mut y_plane[i * ow + j0..i * ow + j1];
                            let x_row = &x_plane[xs..xs + (j1 - j0)];
                            for (yv, xv) in y_row.iter_mut().zip(x_row) {
                                *yv += wv * *xv;
                            }
                        }
                    }
                }
            }
        });

    let record = OpRecord::Conv2d { x: x.clone(), kernel: k.clone() };
    Ok((y, record))
}

/// Transposed 2-D convolution with a 2x2 kernel and stride 2.
/// Each input pixel scatters value * kernel into its own 2x2 output block
/// (blocks are disjoint since stride equals kernel size), summed over input
/// channels, plus bias. Output shape (n, out_channels, 2h, 2w).
pub fn conv_transpose2d(x: &Tensor, k: &ConvKernel) -> Result<(Tensor, OpRecord)> {
    if k.ksize() != 2 || k.stride != 2 || k.padding != 0 {
        return Err(Error::Config(format!(
            "conv_transpose2d requires a 2x2 kernel with stride 2 and no padding, got size {} stride {} padding {}",
            k.ksize(),
            k.stride,
            k.padding
        )));
    }
    check_in_channels("conv_transpose2d", x, k)?;
    x.check_finite("conv_transpose2d input")?;

    let [n, cin, h, w] = x.shape();
    let cout = k.out_channels();
    let (oh, ow) = (2 * h, 2 * w);

    let mut y = Tensor::zeros([n, cout, oh, ow]);
    let weights = k.weights.data();
    let bias = &k.bias;

    y.data_mut()
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(plane_idx, y_plane)| {
            let ni = plane_idx / cout;
            let co = plane_idx % cout;
            y_plane.fill(bias[co]);
            for ci in 0..cin {
                let x_plane = x.plane(ni, ci);
                for ky in 0..2 {
                    for kx in 0..2 {
                        let wv = weights[((co * cin + ci) * 2 + ky) * 2 + kx];
                        for i in 0..h {
                            let x_row = &x_plane[i * w..(i + 1) * w];
                            let y_row = &mut y_plane[(2 * i + ky) * ow..(2 * i + ky + 1) * ow];
                            for (yv, xv) in y_row[kx..].iter_mut().step_by(2).zip(x_row) {
                                *yv += wv * *xv;
                            }
                        }
                    }
                }
            }
        });

    let record = OpRecord::ConvTranspose2d { x: x.clone(), kernel: k.clone() };
    Ok((y, record))
}

/// 2x2 max-pooling with stride 2. Requires even spatial extents. Ties are
/// broken by the first occurrence in row-major scan order so backprop is
/// deterministic.
pub fn maxpool2x2(x: &Tensor) -> Result<(Tensor, OpRecord)> {
    let [n, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Config(format!(
            "maxpool2x2 requires even spatial extents, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros([n, c, oh, ow]);
    let mut argmax = vec![0u32; n * c * oh * ow];
    let ohw = oh * ow;

    y.data_mut()
        .par_chunks_mut(ohw)
        .zip(argmax.par_chunks_mut(ohw))
        .enumerate()
        .for_each(|(plane_idx, (y_plane, am_plane))| {
            let ni = plane_idx / c;
            let ci = plane_idx % c;
            let x_plane = x.plane(ni, ci);
            for oi in 0..oh {
                for oj in 0..ow {
                    let (i, j) = (2 * oi, 2 * oj);
                    // row-major candidate order; strict > keeps the first max
                    let mut best = x_plane[i * w + j];
                    let mut best_at = (i * w + j) as u32;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (i + di) * w + j + dj;
                        let v = x_plane[idx];
                        if v > best {
                            best = v;
                            best_at = idx as u32;
                        }
                    }
                    y_plane[oi * ow + oj] = best;
                    am_plane[oi * ow + oj] = best_at;
                }
            }
        });

    let record = OpRecord::MaxPool2x2 { in_shape: [n, c, h, w], argmax };
    Ok((y, record))
}

fn check_bn_channels(x: &Tensor, state: &BatchNormState) -> Result<()> {
    if x.c() != state.channels() {
        return Err(Error::Config(format!(
            "batchnorm: input has {} channels but state has {}",
            x.c(),
            state.channels()
        )));
    }
    Ok(())
}

/// Batch normalization in train mode: normalizes by the batch mean and
/// biased variance per channel, applies gamma/beta, and updates the running
/// statistics via an exponential moving average with the state's momentum.
///
/// Reductions accumulate in f64 so normalization stays well below test
/// tolerances even for large per-channel element counts; stored values
/// remain single precision.
pub fn batchnorm_train(x: &Tensor, state: &mut BatchNormState) -> Result<(Tensor, OpRecord)> {
    check_bn_channels(x, state)?;
    let [n, c, h, w] = x.shape();
    let m = n * h * w;
    if m < 2 {
        return Err(Error::Numeric(
            "batchnorm train mode needs at least 2 values per channel".to_string(),
        ));
    }

    let mut x_hat = Tensor::zeros([n, c, h, w]);
    let mut y = Tensor::zeros([n, c, h, w]);
    let mut inv_std = vec![0f32; c];
    let hw = h * w;

    for ci in 0..c {
        let mut sum = 0f64;
        for ni in 0..n {
            for v in x.plane(ni, ci) {
                sum += *v as f64;
            }
        }
        let mean = sum / m as f64;

        let mut sq = 0f64;
        for ni in 0..n {
            for v in x.plane(ni, ci) {
                let d = *v as f64 - mean;
                sq += d * d;
            }
        }
        let var = sq / m as f64;
        let istd = 1.0 / (var + state.epsilon as f64).sqrt();
        inv_std[ci] = istd as f32;

        let (gamma, beta) = (state.gamma[ci], state.beta[ci]);
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for t in 0..hw {
                let xh = ((x.data()[base + t] as f64 - mean) * istd) as f32;
                x_hat.data_mut()[base + t] = xh;
                y.data_mut()[base + t] = gamma * xh + beta;
            }
        }

        let mom = state.momentum;
        state.running_mean[ci] = (1.0 - mom) * state.running_mean[ci] + mom * mean as f32;
        state.running_var[ci] = (1.0 - mom) * state.running_var[ci] + mom * var as f32;
    }

    let record = OpRecord::BatchNorm { x_hat, gamma: state.gamma.clone(), inv_std };
    Ok((y, record))
}

/// Batch normalization in eval mode: normalizes by the running statistics
/// and applies gamma/beta. Read-only, safe for concurrent callers.
pub fn batchnorm_eval(x: &Tensor, state: &BatchNormState) -> Result<Tensor> {
    check_bn_channels(x, state)?;
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let mut y = Tensor::zeros([n, c, h, w]);
    for ci in 0..c {
        let istd = 1.0 / (state.running_var[ci] + state.epsilon).sqrt();
        let mean = state.running_mean[ci];
        let (gamma, beta) = (state.gamma[ci], state.beta[ci]);
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for t in 0..hw {
                y.data_mut()[base + t] = gamma * (x.data()[base + t] - mean) * istd + beta;
            }
        }
    }
    Ok(y)
}

/// Elementwise max(0, x).
pub fn relu(x: &Tensor) -> (Tensor, OpRecord) {
    let mut y = x.clone();
    let mut active = vec![false; x.len()];
    for (v, a) in y.data_mut().iter_mut().zip(active.iter_mut()) {
        if *v > 0.0 {
            *a = true;
        } else {
            *v = 0.0;
        }
    }
    (y, OpRecord::Relu { active, shape: x.shape() })
}

/// Numerically stable logistic: the exponential argument is kept negative
/// on both branches, so large |x| cannot overflow.
#[inline]
pub fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise logistic function 1 / (1 + e^-x).
pub fn sigmoid(x: &Tensor) -> (Tensor, OpRecord) {
    let mut y = x.clone();
    for v in y.data_mut().iter_mut() {
        *v = sigmoid_scalar(*v);
    }
    let record = OpRecord::Sigmoid { y: y.clone() };
    (y, record)
}

/// Concatenate along the channel axis: a's channels first, values copied
/// verbatim. Inputs must agree on batch and spatial extents.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<(Tensor, OpRecord)> {
    let [an, ac, ah, aw] = a.shape();
    let [bn, bc, bh, bw] = b.shape();
    if an != bn || ah != bh || aw != bw {
        return Err(Error::Config(format!(
            "concat_channels: shapes {:?} and {:?} differ outside the channel axis",
            a.shape(),
            b.shape()
        )));
    }
    let hw = ah * aw;
    let mut y = Tensor::zeros([an, ac + bc, ah, aw]);
    for ni in 0..an {
        let dst = ni * (ac + bc) * hw;
        y.data_mut()[dst..dst + ac * hw].copy_from_slice(&a.data()[ni * ac * hw..(ni + 1) * ac * hw]);
        y.data_mut()[dst + ac * hw..dst + (ac + bc) * hw]
            .copy_from_slice(&b.data()[ni * bc * hw..(ni + 1) * bc * hw]);
    }
    let record = OpRecord::ConcatChannels { a_channels: ac, b_channels: bc, n: an, h: ah, w: aw };
    Ok((y, record))
}

/// Split a tensor produced by [`concat_channels`] back into its two parts.
/// Exact inverse: both halves are recovered verbatim.
pub fn split_channels(y: &Tensor, a_channels: usize) -> Result<(Tensor, Tensor)> {
    let [n, c, h, w] = y.shape();
    if a_channels == 0 || a_channels >= c {
        return Err(Error::Usage(format!(
            "split_channels: split point {a_channels} outside 1..{c}"
        )));
    }
    let bc = c - a_channels;
    let hw = h * w;
    let mut a = Tensor::zeros([n, a_channels, h, w]);
    let mut b = Tensor::zeros([n, bc, h, w]);
    for ni in 0..n {
        let src = ni * c * hw;
        a.data_mut()[ni * a_channels * hw..(ni + 1) * a_channels * hw]
            .copy_from_slice(&y.data()[src..src + a_channels * hw]);
        b.data_mut()[ni * bc * hw..(ni + 1) * bc * hw]
            .copy_from_slice(&y.data()[src + a_channels * hw..src + c * hw]);
    }
    Ok((a, b))
}

/// Analytic backward pass for a recorded op. `upstream` must have the shape
/// of the recorded forward's output; a mismatch means the record is stale.
pub fn backprop(record: &OpRecord, upstream: &Tensor) -> Result<OpGrads> {
    match record {
        OpRecord::Conv2d { x, kernel } => {
            let [n, _, h, w] = x.shape();
            let ks = kernel.ksize();
            let pad = kernel.padding;
            let expect = [n, kernel.out_channels(), h + 2 * pad - ks + 1, w + 2 * pad - ks + 1];
            check_upstream("conv2d", expect, upstream)?;
            Ok(conv2d_backward(x, kernel, upstream))
        }
        OpRecord::ConvTranspose2d { x, kernel } => {
            let [n, _, h, w] = x.shape();
            let expect = [n, kernel.out_channels(), 2 * h, 2 * w];
            check_upstream("conv_transpose2d", expect, upstream)?;
            Ok(conv_transpose2d_backward(x, kernel, upstream))
        }
        OpRecord::MaxPool2x2 { in_shape, argmax } => {
            let expect = [in_shape[0], in_shape[1], in_shape[2] / 2, in_shape[3] / 2];
            check_upstream("maxpool2x2", expect, upstream)?;
            let mut dx = Tensor::zeros(*in_shape);
            let hw = in_shape[2] * in_shape[3];
            let ohw = expect[2] * expect[3];
            dx.data_mut()
                .par_chunks_mut(hw)
                .zip(argmax.par_chunks(ohw))
                .zip(upstream.data().par_chunks(ohw))
                .for_each(|((dx_plane, am_plane), up_plane)| {
                    for (am, up) in am_plane.iter().zip(up_plane) {
                        dx_plane[*am as usize] += *up;
                    }
                });
            Ok(OpGrads::MaxPool { dx })
        }
        OpRecord::BatchNorm { x_hat, gamma, inv_std } => {
            check_upstream("batchnorm", x_hat.shape(), upstream)?;
            Ok(batchnorm_backward(x_hat, gamma, inv_std, upstream))
        }
        OpRecord::Relu { active, shape } => {
            check_upstream("relu", *shape, upstream)?;
            let mut dx = upstream.clone();
            for (v, a) in dx.data_mut().iter_mut().zip(active.iter()) {
                if !*a {
                    *v = 0.0;
                }
            }
            Ok(OpGrads::Activation { dx })
        }
        OpRecord::Sigmoid { y } => {
            check_upstream("sigmoid", y.shape(), upstream)?;
            let mut dx = upstream.clone();
            for (v, yv) in dx.data_mut().iter_mut().zip(y.data()) {
                *v *= yv * (1.0 - yv);
            }
            Ok(OpGrads::Activation { dx })
        }
        OpRecord::ConcatChannels { a_channels, b_channels, n, h, w } => {
            let expect = [*n, a_channels + b_channels, *h, *w];
            check_upstream("concat_channels", expect, upstream)?;
            let (da, db) = split_channels(upstream, *a_channels)?;
            Ok(OpGrads::Concat { da, db })
        }
    }
}

fn check_upstream(op: &str, expect: [usize; 4], upstream: &Tensor) -> Result<()> {
    if upstream.shape() != expect {
        return Err(Error::Usage(format!(
            "{op} backward: upstream shape {:?} does not match forward output {:?} (stale record?)",
            upstream.shape(),
            expect
        )));
    }
    Ok(())
}

fn conv2d_backward(x: &Tensor, k: &ConvKernel, dy: &Tensor) -> OpGrads {
    let [n, cin, h, w] = x.shape();
    let cout = k.out_channels();
    let ks = k.ksize();
    let pad = k.padding;
    let [_, _, oh, ow] = dy.shape();
    let weights = k.weights.data();

    // dx[r, s] += W[co, ci, ky, kx] * dy[r + pad - ky, s + pad - kx]
    let mut dx = Tensor::zeros([n, cin, h, w]);
    dx.data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(plane_idx, dx_plane)| {
            let ni = plane_idx / cin;
            let ci = plane_idx % cin;
            for co in 0..cout {
                let dy_plane = dy.plane(ni, co);
                for ky in 0..ks {
                    for kx in 0..ks {
                        let wv = weights[((co * cin + ci) * ks + ky) * ks + kx];
                        let r0 = ky.saturating_sub(pad);
                        let r1 = (oh + ky).saturating_sub(pad).min(h);
                        let s0 = kx.saturating_sub(pad);
                        let s1 = (ow + kx).saturating_sub(pad).min(w);
                        if r0 >= r1 || s0 >= s1 {
                            continue;
                        }
                        for r in r0..r1 {
                            let u = r + pad - ky;
                            let ds = u * ow + s0 + pad - kx;
                            let dx_row = &mut dx_plane[r * w + s0..r * w + s1];
                            let dy_row = &dy_plane[ds..ds + (s1 - s0)];
                            for (dv, gv) in dx_row.iter_mut().zip(dy_row) {
                                *dv += wv * *gv;
                            }
                        }
                    }
                }
            }
        });

    // dW[co, ci, ky, kx] = sum over n, i, j of dy[i, j] * x[i + ky - pad, j + kx - pad]
    let mut dweights = Tensor::zeros(k.weights.shape());
    dweights
        .data_mut()
        .par_chunks_mut(cin * ks * ks)
        .enumerate()
        .for_each(|(co, dw_block)| {
            for ci in 0..cin {
                for ky in 0..ks {
                    for kx in 0..ks {
                        let i0 = pad.saturating_sub(ky);
                        let i1 = (h + pad - ky).min(oh);
                        let j0 = pad.saturating_sub(kx);
                        let j1 = (w + pad - kx).min(ow);
                        let mut acc = 0f64;
                        if i0 < i1 && j0 < j1 {
                            for ni in 0..n {
                                let dy_plane = dy.plane(ni, co);
                                let x_plane = x.plane(ni, ci);
                                for i in i0..i1 {
                                    let xi = i + ky - pad;
                                    let xs = xi * w + j0 + kx - pad;
                                    let dy_row = &dy_plane[i * ow + j0..i * ow + j1];
                                    let x_row = &x_plane[xs..xs + (j1 - j0)];
                                    acc += dot_f32(dy_row, x_row) as f64;
                                }
                            }
                        }
                        dw_block[(ci * ks + ky) * ks + kx] = acc as f32;
                    }
                }
            }
        });

    let dbias = bias_grad(dy);
    OpGrads::Conv { dx, dweights, dbias }
}

fn conv_transpose2d_backward(x: &Tensor, k: &ConvKernel, dy: &Tensor) -> OpGrads {
    let [n, cin, h, w] = x.shape();
    let cout = k.out_channels();
    let ow = 2 * w;
    let weights = k.weights.data();

    // dx[i, j] = sum over co, ky, kx of dy[2i + ky, 2j + kx] * W[co, ci, ky, kx]
    let mut dx = Tensor::zeros([n, cin, h, w]);
    dx.data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(plane_idx, dx_plane)| {
            let ni = plane_idx / cin;
            let ci = plane_idx % cin;
            for co in 0..cout {
                let dy_plane = dy.plane(ni, co);
                for ky in 0..2 {
                    for kx in 0..2 {
                        let wv = weights[((co * cin + ci) * 2 + ky) * 2 + kx];
                        for i in 0..h {
                            let dy_row = &dy_plane[(2 * i + ky) * ow..(2 * i + ky + 1) * ow];
                            let dx_row = &mut dx_plane[i * w..(i + 1) * w];
                            for (dv, gv) in dx_row.iter_mut().zip(dy_row[kx..].iter().step_by(2)) {
                                *dv += wv * *gv;
                            }
                        }
                    }
                }
            }
        });

    // dW[co, ci, ky, kx] = sum over n, i, j of x[i, j] * dy[2i + ky, 2j + kx]
    let mut dweights = Tensor::zeros(k.weights.shape());
    dweights
        .data_mut()
        .par_chunks_mut(cin * 4)
        .enumerate()
        .for_each(|(co, dw_block)| {
            for ci in 0..cin {
                for ky in 0..2 {
                    for kx in 0..2 {
                        let mut acc = 0f64;
                        for ni in 0..n {
                            let x_plane = x.plane(ni, ci);
                            let dy_plane = dy.plane(ni, co);
                            for i in 0..h {
                                let x_row = &x_plane[i * w..(i + 1) * w];
                                let dy_row = &dy_plane[(2 * i + ky) * ow..(2 * i + ky + 1) * ow];
                                let mut row = 0f32;
                                for (xv, gv) in x_row.iter().zip(dy_row[kx..].iter().step_by(2)) {
                                    row += *xv * *gv;
                                }
                                acc += row as f64;
                            }
                        }
                        dw_block[(ci * 2 + ky) * 2 + kx] = acc as f32;
                    }
                }
            }
        });

    let dbias = bias_grad(dy);
    OpGrads::Conv { dx, dweights, dbias }
}

/// dbias[co] = sum of dy over batch and spatial positions.
fn bias_grad(dy: &Tensor) -> Vec<f32> {
    let [n, cout, _, _] = dy.shape();
    let mut dbias = vec![0f32; cout];
    for (co, db) in dbias.iter_mut().enumerate() {
        let mut acc = 0f64;
        for ni in 0..n {
            for v in dy.plane(ni, co) {
                acc += *v as f64;
            }
        }
        *db = acc as f32;
    }
    dbias
}

fn batchnorm_backward(x_hat: &Tensor, gamma: &[f32], inv_std: &[f32], dy: &Tensor) -> OpGrads {
    let [n, c, h, w] = x_hat.shape();
    let m = (n * h * w) as f64;
    let hw = h * w;

    let mut dx = Tensor::zeros([n, c, h, w]);
    let mut dgamma = vec![0f32; c];
    let mut dbeta = vec![0f32; c];

    for ci in 0..c {
        let mut s1 = 0f64; // sum dy
        let mut s2 = 0f64; // sum dy * x_hat
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for t in 0..hw {
                let g = dy.data()[base + t] as f64;
                s1 += g;
                s2 += g * x_hat.data()[base + t] as f64;
            }
        }
        dbeta[ci] = s1 as f32;
        dgamma[ci] = s2 as f32;

        let scale = gamma[ci] as f64 * inv_std[ci] as f64;
        let mean_dy = s1 / m;
        let mean_dyxh = s2 / m;
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for t in 0..hw {
                let g = dy.data()[base + t] as f64;
                let xh = x_hat.data()[base + t] as f64;
                dx.data_mut()[base + t] = (scale * (g - mean_dy - xh * mean_dyxh)) as f32;
            }
        }
    }

    OpGrads::BatchNorm { dx, dgamma, dbeta }
}
