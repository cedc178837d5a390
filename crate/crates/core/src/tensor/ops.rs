//! Forward and backward kernels.
//!
//! All kernels work on flat row-major slices with a fixed accumulation order,
//! so repeated runs are bit-identical. Shapes are batch-leading: convolution
//! takes `[B, Cin, H, W]`, affine maps take `[B, n]`. The functional wrappers
//! also accept unbatched `[Cin, H, W]` / `[n]` inputs.

use super::{Tensor, TensorError};

/// Resolved shapes of one 2D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv2dGeometry {
    /// `input` is `[B, Cin, H, W]`, `weight` is `[Cout, Cin, kh, kw]`.
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self, TensorError> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: input.to_vec(),
            rhs: weight.to_vec(),
        };
        if input.len() != 4 || weight.len() != 4 || input[1] != weight[1] {
            return Err(mismatch());
        }
        if stride == 0 {
            return Err(TensorError::Invalid("conv2d: stride must be >= 1".into()));
        }
        let (h, w) = (input[2] + 2 * padding, input[3] + 2 * padding);
        if weight[2] == 0 || weight[3] == 0 || weight[2] > h || weight[3] > w {
            return Err(mismatch());
        }
        Ok(Self {
            batch: input[0],
            in_channels: input[1],
            height: input[2],
            width: input[3],
            out_channels: weight[0],
            kernel_h: weight[2],
            kernel_w: weight[3],
            stride,
            padding,
            out_h: (h - weight[2]) / stride + 1,
            out_w: (w - weight[3]) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.in_channels * self.height * self.width
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.out_channels * self.out_h * self.out_w
    }

    /// Input row touched by output row `oy` at kernel row `ky`, if not padding.
    #[inline]
    pub fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy * self.stride + ky).checked_sub(self.padding).filter(|&iy| iy < self.height)
    }

    #[inline]
    pub fn input_col(&self, ox: usize, kx: usize) -> Option<usize> {
        (ox * self.stride + kx).checked_sub(self.padding).filter(|&ix| ix < self.width)
    }

    /// Output row reached from input row `iy` through kernel row `ky`.
    #[inline]
    pub fn output_row(&self, iy: usize, ky: usize) -> Option<usize> {
        let shifted = (iy + self.padding).checked_sub(ky)?;
        (shifted % self.stride == 0)
            .then_some(shifted / self.stride)
            .filter(|&oy| oy < self.out_h)
    }

    #[inline]
    pub fn output_col(&self, ix: usize, kx: usize) -> Option<usize> {
        let shifted = (ix + self.padding).checked_sub(kx)?;
        (shifted % self.stride == 0)
            .then_some(shifted / self.stride)
            .filter(|&ox| ox < self.out_w)
    }
}

pub fn conv2d_forward(g: &Conv2dGeometry, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; g.output_len()];
    let in_plane = g.height * g.width;
    let k_plane = g.kernel_h * g.kernel_w;
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            let b = bias.map_or(0.0, |b| b[co]);
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = b;
                    for ci in 0..g.in_channels {
                        let x_base = (n * g.in_channels + ci) * in_plane;
                        let w_base = (co * g.in_channels + ci) * k_plane;
                        for ky in 0..g.kernel_h {
                            let Some(iy) = g.input_row(oy, ky) else { continue };
                            for kx in 0..g.kernel_w {
                                let Some(ix) = g.input_col(ox, kx) else { continue };
                                acc += w[w_base + ky * g.kernel_w + kx] * x[x_base + iy * g.width + ix];
                            }
                        }
                    }
                    out[((n * g.out_channels + co) * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn conv2d_backward(
    g: &Conv2dGeometry,
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; g.input_len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; g.out_channels];
    let in_plane = g.height * g.width;
    let k_plane = g.kernel_h * g.kernel_w;
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let go = grad_out[((n * g.out_channels + co) * g.out_h + oy) * g.out_w + ox];
                    if go == 0.0 {
                        continue;
                    }
                    gb[co] += go;
                    for ci in 0..g.in_channels {
                        let x_base = (n * g.in_channels + ci) * in_plane;
                        let w_base = (co * g.in_channels + ci) * k_plane;
                        for ky in 0..g.kernel_h {
                            let Some(iy) = g.input_row(oy, ky) else { continue };
                            for kx in 0..g.kernel_w {
                                let Some(ix) = g.input_col(ox, kx) else { continue };
                                let xi = x_base + iy * g.width + ix;
                                let wi = w_base + ky * g.kernel_w + kx;
                                gx[xi] += w[wi] * go;
                                gw[wi] += x[xi] * go;
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// `y[b, i] = bias[i] + sum_j w[i, j] * x[b, j]`.
pub fn linear_forward(
    batch: usize,
    inputs: usize,
    outputs: usize,
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * outputs];
    for b in 0..batch {
        let row = &x[b * inputs..(b + 1) * inputs];
        for i in 0..outputs {
            let wrow = &w[i * inputs..(i + 1) * inputs];
            let mut acc = bias.map_or(0.0, |bias| bias[i]);
            for (wij, xj) in wrow.iter().zip(row) {
                acc += wij * xj;
            }
            out[b * outputs + i] = acc;
        }
    }
    out
}

pub fn linear_backward(
    batch: usize,
    inputs: usize,
    outputs: usize,
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; batch * inputs];
    let mut gw = vec![0.0; outputs * inputs];
    let mut gb = vec![0.0; outputs];
    for b in 0..batch {
        for i in 0..outputs {
            let go = grad_out[b * outputs + i];
            if go == 0.0 {
                continue;
            }
            gb[i] += go;
            for j in 0..inputs {
                gx[b * inputs + j] += w[i * inputs + j] * go;
                gw[i * inputs + j] += x[b * inputs + j] * go;
            }
        }
    }
    (gx, gw, gb)
}

/// Non-overlapping max pooling over `[B, C, H, W]` with window and stride `k`.
/// Returns the pooled values and, per output, the flat input index of the
/// winning element (first maximum on ties).
pub fn max_pool2d_forward(shape: &[usize], x: &[f64], k: usize) -> (Vec<usize>, Vec<f64>, Vec<usize>) {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / k, w / k);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * k * w + ox * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = base + (oy * k + dy) * w + ox * k + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    (vec![b, c, oh, ow], out, argmax)
}

/// Integer max pooling with the same window rule as [`max_pool2d_forward`].
pub fn max_pool2d_i32(shape: &[usize], x: &[i32], k: usize) -> (Vec<usize>, Vec<i32>) {
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / k, w / k);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = x[base + oy * k * w + ox * k];
                for dy in 0..k {
                    for dx in 0..k {
                        best = best.max(x[base + (oy * k + dy) * w + ox * k + dx]);
                    }
                }
                out.push(best);
            }
        }
    }
    (vec![b, c, oh, ow], out)
}

/// Per-channel statistics over every axis except axis 1.
pub fn channel_stats(shape: &[usize], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (batch, channels) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let count = (batch * spatial) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for c in 0..channels {
        let mut sum = 0.0;
        for b in 0..batch {
            let base = (b * channels + c) * spatial;
            sum += x[base..base + spatial].iter().sum::<f64>();
        }
        let mu = sum / count;
        let mut sq = 0.0;
        for b in 0..batch {
            let base = (b * channels + c) * spatial;
            sq += x[base..base + spatial].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
        }
        mean[c] = mu;
        var[c] = sq / count;
    }
    (mean, var)
}

/// `y = x * scale[c] + shift[c]` along axis 1.
pub fn channel_affine(shape: &[usize], x: &[f64], scale: &[f64], shift: &[f64]) -> Vec<f64> {
    let channels = shape[1];
    let spatial: usize = shape[2..].iter().product();
    x.iter()
        .enumerate()
        .map(|(i, v)| {
            let c = (i / spatial) % channels;
            v * scale[c] + shift[c]
        })
        .collect()
}

/// Batch-statistics normalization backward. `xhat` is the normalized input,
/// `inv_std` the per-channel `1/sqrt(var + eps)`.
/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batch_norm_backward(
    shape: &[usize],
    xhat: &[f64],
    gamma: &[f64],
    inv_std: &[f64],
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (batch, channels) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let m = (batch * spatial) as f64;
    let mut g_gamma = vec![0.0; channels];
    let mut g_beta = vec![0.0; channels];
    for (i, (&go, &xh)) in grad_out.iter().zip(xhat).enumerate() {
        let c = (i / spatial) % channels;
        g_gamma[c] += go * xh;
        g_beta[c] += go;
    }
    let gx = grad_out
        .iter()
        .zip(xhat)
        .enumerate()
        .map(|(i, (&go, &xh))| {
            let c = (i / spatial) % channels;
            gamma[c] * inv_std[c] / m * (m * go - g_beta[c] - xh * g_gamma[c])
        })
        .collect();
    (gx, g_gamma, g_beta)
}

/// Unbatched `[Cin, H, W]` or batched `[B, Cin, H, W]` cross-correlation.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor, TensorError> {
    let unbatched = input.rank() == 3;
    let in_shape: Vec<usize> = if unbatched {
        std::iter::once(1).chain(input.shape().iter().copied()).collect()
    } else {
        input.shape().to_vec()
    };
    let g = Conv2dGeometry::new(&in_shape, weight.shape(), stride, padding)?;
    let bias_vals = match bias {
        Some(b) if b.shape() != [g.out_channels] => {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: weight.shape().to_vec(),
                rhs: b.shape().to_vec(),
            })
        }
        Some(b) => Some(b.real_values()),
        None => None,
    };
    let out = conv2d_forward(&g, &input.real_values(), &weight.real_values(), bias_vals.as_deref());
    let shape = g.output_shape();
    let shape = if unbatched { shape[1..].to_vec() } else { shape.to_vec() };
    Tensor::from_f64(shape, out)
}

/// Unbatched `[n]` or batched `[B, n]` affine map with weight `[m, n]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor, TensorError> {
    let (batch, inputs, unbatched) = match input.shape() {
        [n] => (1, *n, true),
        [b, n] => (*b, *n, false),
        _ => {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: input.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            })
        }
    };
    let outputs = match weight.shape() {
        [m, n] if *n == inputs => *m,
        _ => {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: input.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            })
        }
    };
    let bias_vals = match bias {
        Some(b) if b.shape() != [outputs] => {
            return Err(TensorError::ShapeMismatch {
                op: "linear bias",
                lhs: weight.shape().to_vec(),
                rhs: b.shape().to_vec(),
            })
        }
        Some(b) => Some(b.real_values()),
        None => None,
    };
    let out = linear_forward(
        batch,
        inputs,
        outputs,
        &input.real_values(),
        &weight.real_values(),
        bias_vals.as_deref(),
    );
    let shape = if unbatched { vec![outputs] } else { vec![batch, outputs] };
    Tensor::from_f64(shape, out)
}
