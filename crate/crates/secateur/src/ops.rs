//! Layer primitives with explicit forward and backward passes.
//!
//! Conventions, fixed here and tested:
//! - ReLU subgradient at exactly 0 is 0.
//! - Max-pool ties route the gradient to the first occurrence in row-major
//!   window order.
//! - Batchnorm uses epsilon 1e-5, running-stat momentum 0.1, and biased
//!   batch variance.
//! - Reductions accumulate in f64 and narrow to f32 at the end.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamState, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Whether a pass uses batch statistics (train) or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Inference,
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.shape.len() != rank {
        return Err(Error::ShapeMismatch {
            op,
            dimension: "rank",
            expected: rank,
            actual: t.shape.len(),
        });
    }
    Ok(())
}

/// Output extent along one spatial axis: floor((in + 2*pad - k)/stride) + 1.
fn conv_out_dim(in_dim: usize, k: usize, pad: usize, stride: usize) -> usize {
    (in_dim + 2 * pad - k) / stride + 1
}

/// Range of output positions whose receptive field stays inside the input
/// for a given kernel offset.
fn valid_out_range(in_dim: usize, k_off: usize, pad: usize, stride: usize, out_dim: usize) -> (usize, usize) {
    // in_pos = out_pos*stride + k_off - pad must lie in [0, in_dim)
    let lo = if pad > k_off {
        (pad - k_off).div_ceil(stride)
    } else {
        0
    };
    let hi_num = in_dim + pad;
    if hi_num <= k_off {
        return (1, 0); // empty
    }
    let hi = ((hi_num - 1 - k_off) / stride).min(out_dim.saturating_sub(1));
    (lo, hi)
}

/// 2-D convolution over NCHW input with OIKK weights and per-output-channel bias.
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    expect_rank("conv2d", input, 4)?;
    expect_rank("conv2d", weight, 4)?;
    let (n, c_in, h, w) = (input.shape[0], input.shape[1], input.shape[2], input.shape[3]);
    let (c_out, w_cin, kh, kw) = (weight.shape[0], weight.shape[1], weight.shape[2], weight.shape[3]);
    if w_cin != c_in {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            dimension: "input channels",
            expected: w_cin,
            actual: c_in,
        });
    }
    if bias.len() != c_out {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            dimension: "bias length",
            expected: c_out,
            actual: bias.len(),
        });
    }
    if stride == 0 {
        return Err(Error::Config {
            reason: "conv2d stride must be >= 1".into(),
        });
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            dimension: "spatial extent",
            expected: kh,
            actual: h + 2 * padding,
        });
    }
    let ho = conv_out_dim(h, kh, padding, stride);
    let wo = conv_out_dim(w, kw, padding, stride);

    let mut out = vec![0.0f32; n * c_out * ho * wo];
    let mut plane = vec![0.0f64; ho * wo];
    for b in 0..n {
        for co in 0..c_out {
            plane.iter_mut().for_each(|v| *v = f64::from(bias.data[co]));
            for ci in 0..c_in {
                let in_plane = &input.data[(b * c_in + ci) * h * w..(b * c_in + ci + 1) * h * w];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_out_range(h, ky, padding, stride, ho);
                    if oy_lo > oy_hi {
                        continue;
                    }
                    for kx in 0..kw {
                        let (ox_lo, ox_hi) = valid_out_range(w, kx, padding, stride, wo);
                        if ox_lo > ox_hi {
                            continue;
                        }
                        let wv = f64::from(weight.data[((co * c_in + ci) * kh + ky) * kw + kx]);
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in oy_lo..=oy_hi {
                            let iy = oy * stride + ky - padding;
                            let in_row = &in_plane[iy * w..(iy + 1) * w];
                            let out_row = &mut plane[oy * wo + ox_lo..=oy * wo + ox_hi];
                            if stride == 1 {
                                let ix0 = ox_lo + kx - padding;
                                for (o, &iv) in out_row.iter_mut().zip(&in_row[ix0..ix0 + (ox_hi - ox_lo + 1)]) {
                                    *o += wv * f64::from(iv);
                                }
                            } else {
                                for (idx, o) in out_row.iter_mut().enumerate() {
                                    let ix = (ox_lo + idx) * stride + kx - padding;
                                    *o += wv * f64::from(in_row[ix]);
                                }
                            }
                        }
                    }
                }
            }
            let dst = &mut out[(b * c_out + co) * ho * wo..(b * c_out + co + 1) * ho * wo];
            for (d, &s) in dst.iter_mut().zip(plane.iter()) {
                *d = s as f32;
            }
        }
    }
    Tensor::from_vec(&[n, c_out, ho, wo], out)
}

/// Gradients of conv2d with respect to input, weight, and bias.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    dout: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c_in, h, w) = (input.shape[0], input.shape[1], input.shape[2], input.shape[3]);
    let (c_out, _, kh, kw) = (weight.shape[0], weight.shape[1], weight.shape[2], weight.shape[3]);
    let (ho, wo) = (dout.shape[2], dout.shape[3]);
    if dout.shape[0] != n || dout.shape[1] != c_out {
        return Err(Error::ShapeMismatch {
            op: "conv2d backward",
            dimension: "upstream gradient channels",
            expected: c_out,
            actual: dout.shape[1],
        });
    }

    let mut dinput = vec![0.0f64; input.len()];
    let mut dweight = vec![0.0f64; weight.len()];
    let mut dbias = vec![0.0f64; c_out];

    for b in 0..n {
        for co in 0..c_out {
            let dout_plane = &dout.data[(b * c_out + co) * ho * wo..(b * c_out + co + 1) * ho * wo];
            for &g in dout_plane {
                dbias[co] += f64::from(g);
            }
            for ci in 0..c_in {
                let in_plane = &input.data[(b * c_in + ci) * h * w..(b * c_in + ci + 1) * h * w];
                let din_plane = &mut dinput[(b * c_in + ci) * h * w..(b * c_in + ci + 1) * h * w];
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_out_range(h, ky, padding, stride, ho);
                    if oy_lo > oy_hi {
                        continue;
                    }
                    for kx in 0..kw {
                        let (ox_lo, ox_hi) = valid_out_range(w, kx, padding, stride, wo);
                        if ox_lo > ox_hi {
                            continue;
                        }
                        let widx = ((co * c_in + ci) * kh + ky) * kw + kx;
                        let wv = f64::from(weight.data[widx]);
                        let mut wacc = 0.0f64;
                        for oy in oy_lo..=oy_hi {
                            let iy = oy * stride + ky - padding;
                            for ox in ox_lo..=ox_hi {
                                let ix = ox * stride + kx - padding;
                                let g = f64::from(dout_plane[oy * wo + ox]);
                                wacc += f64::from(in_plane[iy * w + ix]) * g;
                                din_plane[iy * w + ix] += wv * g;
                            }
                        }
                        dweight[widx] += wacc;
                    }
                }
            }
        }
    }

    let dinput = Tensor::from_vec(&input.shape, dinput.iter().map(|&v| v as f32).collect())?;
    let dweight = Tensor::from_vec(&weight.shape, dweight.iter().map(|&v| v as f32).collect())?;
    let dbias = Tensor::from_vec(&[c_out], dbias.iter().map(|&v| v as f32).collect())?;
    Ok((dinput, dweight, dbias))
}

/// Fully connected layer over a batch of row vectors: out = in * W^T + b.
/// A rank-1 input is treated as a single row.
pub fn dense_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    expect_rank("dense", weight, 2)?;
    let (rows, f_in) = dense_input_dims(input)?;
    let (f_out, w_in) = (weight.shape[0], weight.shape[1]);
    if w_in != f_in {
        return Err(Error::ShapeMismatch {
            op: "dense",
            dimension: "input features",
            expected: w_in,
            actual: f_in,
        });
    }
    if bias.len() != f_out {
        return Err(Error::ShapeMismatch {
            op: "dense",
            dimension: "bias length",
            expected: f_out,
            actual: bias.len(),
        });
    }
    let mut out = vec![0.0f32; rows * f_out];
    for r in 0..rows {
        let in_row = &input.data[r * f_in..(r + 1) * f_in];
        for o in 0..f_out {
            let w_row = &weight.data[o * f_in..(o + 1) * f_in];
            let mut acc = f64::from(bias.data[o]);
            for (x, wv) in in_row.iter().zip(w_row) {
                acc += f64::from(*x) * f64::from(*wv);
            }
            out[r * f_out + o] = acc as f32;
        }
    }
    let shape = if input.shape.len() == 1 {
        vec![f_out]
    } else {
        vec![rows, f_out]
    };
    Tensor::from_vec(&shape, out)
}

fn dense_input_dims(input: &Tensor) -> Result<(usize, usize)> {
    match input.shape.len() {
        1 => Ok((1, input.shape[0])),
        2 => Ok((input.shape[0], input.shape[1])),
        other => Err(Error::ShapeMismatch {
            op: "dense",
            dimension: "rank",
            expected: 2,
            actual: other,
        }),
    }
}

pub fn dense_backward(
    input: &Tensor,
    weight: &Tensor,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (rows, f_in) = dense_input_dims(input)?;
    let (f_out, _) = (weight.shape[0], weight.shape[1]);
    if dout.len() != rows * f_out {
        return Err(Error::ShapeMismatch {
            op: "dense backward",
            dimension: "upstream gradient size",
            expected: rows * f_out,
            actual: dout.len(),
        });
    }
    let mut dinput = vec![0.0f64; rows * f_in];
    let mut dweight = vec![0.0f64; f_out * f_in];
    let mut dbias = vec![0.0f64; f_out];
    for r in 0..rows {
        let in_row = &input.data[r * f_in..(r + 1) * f_in];
        for o in 0..f_out {
            let g = f64::from(dout.data[r * f_out + o]);
            dbias[o] += g;
            let w_row = &weight.data[o * f_in..(o + 1) * f_in];
            let dw_row = &mut dweight[o * f_in..(o + 1) * f_in];
            let di_row = &mut dinput[r * f_in..(r + 1) * f_in];
            for i in 0..f_in {
                dw_row[i] += g * f64::from(in_row[i]);
                di_row[i] += g * f64::from(w_row[i]);
            }
        }
    }
    Ok((
        Tensor::from_vec(&input.shape, dinput.iter().map(|&v| v as f32).collect())?,
        Tensor::from_vec(&weight.shape, dweight.iter().map(|&v| v as f32).collect())?,
        Tensor::from_vec(&[f_out], dbias.iter().map(|&v| v as f32).collect())?,
    ))
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    Tensor {
        shape: input.shape.clone(),
        data: input.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Passes gradient only where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor, dout: &Tensor) -> Tensor {
    Tensor {
        shape: input.shape.clone(),
        data: input
            .data
            .iter()
            .zip(&dout.data)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect(),
    }
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, per output
/// element, the flat input index of the chosen maximum.
pub fn maxpool2_forward(input: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    expect_rank("maxpool2", input, 4)?;
    let (n, c, h, w) = (input.shape[0], input.shape[1], input.shape[2], input.shape[3]);
    if h % 2 != 0 {
        return Err(Error::ShapeMismatch {
            op: "maxpool2",
            dimension: "height (must be even)",
            expected: h + 1,
            actual: h,
        });
    }
    if w % 2 != 0 {
        return Err(Error::ShapeMismatch {
            op: "maxpool2",
            dimension: "width (must be even)",
            expected: w + 1,
            actual: w,
        });
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0f32; n * c * ho * wo];
    let mut argmax = vec![0u32; n * c * ho * wo];
    for plane_idx in 0..n * c {
        let base = plane_idx * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_idx = base + (2 * oy) * w + 2 * ox;
                let mut best = input.data[best_idx];
                // strict > keeps the first occurrence on ties
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input.data[idx] > best {
                        best = input.data[idx];
                        best_idx = idx;
                    }
                }
                let o = plane_idx * ho * wo + oy * wo + ox;
                out[o] = best;
                argmax[o] = best_idx as u32;
            }
        }
    }
    Ok((Tensor::from_vec(&[n, c, ho, wo], out)?, argmax))
}

pub fn maxpool2_backward(input_shape: &[usize], argmax: &[u32], dout: &Tensor) -> Tensor {
    let mut din = Tensor::zeros(input_shape);
    for (o, &src) in argmax.iter().enumerate() {
        din.data[src as usize] += dout.data[o];
    }
    din
}

/// Per-channel mean over N, H, W: turns NCHW into an N x C matrix.
pub fn global_avg_pool_forward(input: &Tensor) -> Result<Tensor> {
    expect_rank("globalavgpool", input, 4)?;
    let (n, c, h, w) = (input.shape[0], input.shape[1], input.shape[2], input.shape[3]);
    let area = (h * w) as f64;
    let mut out = vec![0.0f32; n * c];
    for b in 0..n {
        for ch in 0..c {
            let plane = &input.data[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            let sum: f64 = plane.iter().map(|&v| f64::from(v)).sum();
            out[b * c + ch] = (sum / area) as f32;
        }
    }
    Tensor::from_vec(&[n, c], out)
}

pub fn global_avg_pool_backward(input_shape: &[usize], dout: &Tensor) -> Tensor {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let scale = 1.0 / (h * w) as f32;
    let mut din = Tensor::zeros(input_shape);
    for b in 0..n {
        for ch in 0..c {
            let g = dout.data[b * c + ch] * scale;
            for v in &mut din.data[(b * c + ch) * h * w..(b * c + ch + 1) * h * w] {
                *v = g;
            }
        }
    }
    din
}

/// Running statistics for one batchnorm layer. Initialized to mean 0,
/// variance 1 so an untrained layer in inference mode is a near-identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        BnStats {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }
}

/// What the backward pass needs from a batchnorm forward.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub mode: Mode,
}

/// Channel-wise batch normalization over NCHW. Train mode normalizes by
/// biased batch statistics and folds them into the running estimates;
/// inference mode uses the running estimates unchanged.
pub fn batchnorm_forward(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut BnStats,
    mode: Mode,
) -> Result<(Tensor, BnCache)> {
    expect_rank("batchnorm", input, 4)?;
    let (n, c, h, w) = (input.shape[0], input.shape[1], input.shape[2], input.shape[3]);
    if gamma.len() != c || beta.len() != c || stats.running_mean.len() != c {
        return Err(Error::ShapeMismatch {
            op: "batchnorm",
            dimension: "channels",
            expected: c,
            actual: gamma.len(),
        });
    }
    let m = (n * h * w) as f64;
    let mut out = Tensor::zeros(&input.shape);
    let mut xhat = Tensor::zeros(&input.shape);
    let mut inv_std = vec![0.0f64; c];

    for ch in 0..c {
        let (mean, var) = match mode {
            Mode::Train => {
                let mut sum = 0.0f64;
                for b in 0..n {
                    let plane = &input.data[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    sum += plane.iter().map(|&v| f64::from(v)).sum::<f64>();
                }
                let mean = sum / m;
                let mut sq = 0.0f64;
                for b in 0..n {
                    let plane = &input.data[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    sq += plane.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>();
                }
                let var = sq / m;
                stats.running_mean[ch] =
                    ((1.0 - BN_MOMENTUM) * f64::from(stats.running_mean[ch]) + BN_MOMENTUM * mean) as f32;
                stats.running_var[ch] =
                    ((1.0 - BN_MOMENTUM) * f64::from(stats.running_var[ch]) + BN_MOMENTUM * var) as f32;
                (mean, var)
            }
            Mode::Inference => (
                f64::from(stats.running_mean[ch]),
                f64::from(stats.running_var[ch]),
            ),
        };
        let istd = 1.0 / (var + BN_EPSILON).sqrt();
        inv_std[ch] = istd;
        let g = f64::from(gamma.data[ch]);
        let bta = f64::from(beta.data[ch]);
        for b in 0..n {
            let start = (b * c + ch) * h * w;
            for i in start..start + h * w {
                let xh = (f64::from(input.data[i]) - mean) * istd;
                xhat.data[i] = xh as f32;
                out.data[i] = (g * xh + bta) as f32;
            }
        }
    }
    Ok((
        out,
        BnCache {
            xhat,
            inv_std,
            mode,
        },
    ))
}

pub fn batchnorm_backward(
    cache: &BnCache,
    gamma: &Tensor,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let shape = &cache.xhat.shape;
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let m = (n * h * w) as f64;
    let mut dinput = Tensor::zeros(shape);
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];

    for ch in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for b in 0..n {
            let start = (b * c + ch) * h * w;
            for i in start..start + h * w {
                let g = f64::from(dout.data[i]);
                sum_dy += g;
                sum_dy_xhat += g * f64::from(cache.xhat.data[i]);
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let gscale = f64::from(gamma.data[ch]) * cache.inv_std[ch];
        for b in 0..n {
            let start = (b * c + ch) * h * w;
            for i in start..start + h * w {
                let g = f64::from(dout.data[i]);
                let dx = match cache.mode {
                    Mode::Train => {
                        gscale
                            * (g - sum_dy / m - f64::from(cache.xhat.data[i]) * sum_dy_xhat / m)
                    }
                    // running stats are constants in inference mode
                    Mode::Inference => gscale * g,
                };
                dinput.data[i] = dx as f32;
            }
        }
    }
    Ok((
        dinput,
        Tensor::from_vec(&[c], dgamma.iter().map(|&v| v as f32).collect())?,
        Tensor::from_vec(&[c], dbeta.iter().map(|&v| v as f32).collect())?,
    ))
}

/// Mean cross-entropy over a batch of logit rows, with its gradient
/// (softmax minus one-hot, divided by the batch size). The loss keeps its
/// f64 accumulation so finite-difference checks are not quantization-bound.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    expect_rank("softmax_xent", logits, 2)?;
    let (n, k) = (logits.shape[0], logits.shape[1]);
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "softmax_xent",
            dimension: "label count",
            expected: n,
            actual: labels.len(),
        });
    }
    let mut dlogits = Tensor::zeros(&logits.shape);
    let mut loss = 0.0f64;
    for r in 0..n {
        let label = labels[r];
        if label >= k {
            return Err(Error::LabelOutOfRange {
                label,
                class_count: k,
            });
        }
        let row = &logits.data[r * k..(r + 1) * k];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f64;
        for &v in row {
            denom += f64::from(v - max).exp();
        }
        loss -= f64::from(row[label] - max) - denom.ln();
        for (j, &v) in row.iter().enumerate() {
            let p = f64::from(v - max).exp() / denom;
            let onehot = if j == label { 1.0 } else { 0.0 };
            dlogits.data[r * k + j] = ((p - onehot) / n as f64) as f32;
        }
    }
    Ok((loss / n as f64, dlogits))
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected adaptive update. Consumes the accumulated gradient
/// (it is cleared afterwards) and advances the step count.
pub fn adam_step(param: &mut ParamState, lr: f64) {
    param.step += 1;
    let t = param.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..param.value.data.len() {
        let g = f64::from(param.gradient.data[i]);
        let m = ADAM_BETA1 * f64::from(param.moment1.data[i]) + (1.0 - ADAM_BETA1) * g;
        let v = ADAM_BETA2 * f64::from(param.moment2.data[i]) + (1.0 - ADAM_BETA2) * g * g;
        param.moment1.data[i] = m as f32;
        param.moment2.data[i] = v as f32;
        let update = lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
        param.value.data[i] = (f64::from(param.value.data[i]) - update) as f32;
        param.gradient.data[i] = 0.0;
    }
}
