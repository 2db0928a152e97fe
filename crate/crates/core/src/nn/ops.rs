//! Forward and backward kernels for each layer kind.
//!
//! Image tensors are `(N, C, H, W)`; reductions run in a fixed loop order so
//! results are bitwise reproducible.

use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], o: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Option<Self> {
        let (n, c, h, w) = (x[0], x[1], x[2], x[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        Some(ConvGeom {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Output columns `ox` whose input column `ox*stride + k - pad` is in range.
    #[inline]
    fn valid_range(out: usize, input: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
        // need 0 <= ox*stride + k - pad < input
        let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
        let hi = if input + pad > k {
            ((input + pad - k - 1) / stride + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

pub fn conv2d_forward(x: &Tensor, weight: &Tensor, g: &ConvGeom) -> Tensor {
    let mut out = vec![0.0; g.n * g.o * g.oh * g.ow];
    let xd = x.data();
    let wd = weight.data();
    for n in 0..g.n {
        for o in 0..g.o {
            let out_plane = &mut out[(n * g.o + o) * g.oh * g.ow..][..g.oh * g.ow];
            for c in 0..g.c {
                let in_plane = &xd[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                for ky in 0..g.kh {
                    let (oy0, oy1) = ConvGeom::valid_range(g.oh, g.h, ky, g.stride, g.pad);
                    for kx in 0..g.kw {
                        let wv = wd[((o * g.c + c) * g.kh + ky) * g.kw + kx];
                        let (ox0, ox1) = ConvGeom::valid_range(g.ow, g.w, kx, g.stride, g.pad);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let in_row = &in_plane[iy * g.w..][..g.w];
                            let out_row = &mut out_plane[oy * g.ow..][..g.ow];
                            for ox in ox0..ox1 {
                                out_row[ox] += wv * in_row[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.n, g.o, g.oh, g.ow], out).expect("conv output shape")
}

/// Returns `(grad_input, grad_weight)`.
pub fn conv2d_backward(x: &Tensor, weight: &Tensor, grad_out: &Tensor, g: &ConvGeom) -> (Tensor, Tensor) {
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; weight.len()];
    let xd = x.data();
    let wd = weight.data();
    let gd = grad_out.data();
    for n in 0..g.n {
        for o in 0..g.o {
            let g_plane = &gd[(n * g.o + o) * g.oh * g.ow..][..g.oh * g.ow];
            for c in 0..g.c {
                let base = (n * g.c + c) * g.h * g.w;
                for ky in 0..g.kh {
                    let (oy0, oy1) = ConvGeom::valid_range(g.oh, g.h, ky, g.stride, g.pad);
                    for kx in 0..g.kw {
                        let widx = ((o * g.c + c) * g.kh + ky) * g.kw + kx;
                        let wv = wd[widx];
                        let (ox0, ox1) = ConvGeom::valid_range(g.ow, g.w, kx, g.stride, g.pad);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let row = base + iy * g.w;
                            let g_row = &g_plane[oy * g.ow..][..g.ow];
                            for ox in ox0..ox1 {
                                let ix = ox * g.stride + kx - g.pad;
                                let gv = g_row[ox];
                                acc += gv * xd[row + ix];
                                gx[row + ix] += wv * gv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), gx).expect("conv grad input"),
        Tensor::new(weight.shape().to_vec(), gw).expect("conv grad weight"),
    )
}

/// `y = x W^T` with `x` flattened to `(N, F)` and `W` of shape `(O, F)`.
pub fn linear_forward(x: &Tensor, weight: &Tensor) -> Tensor {
    let n = x.dim(0);
    let f = x.row_len();
    let o = weight.dim(0);
    let xd = x.data();
    let wd = weight.data();
    let mut out = vec![0.0; n * o];
    for i in 0..n {
        let xr = &xd[i * f..][..f];
        for j in 0..o {
            let wr = &wd[j * f..][..f];
            out[i * o + j] = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
        }
    }
    Tensor::new(vec![n, o], out).expect("linear output shape")
}

pub fn linear_backward(x: &Tensor, weight: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor) {
    let n = x.dim(0);
    let f = x.row_len();
    let o = weight.dim(0);
    let xd = x.data();
    let wd = weight.data();
    let gd = grad_out.data();
    let mut gx = vec![0.0; n * f];
    let mut gw = vec![0.0; o * f];
    for i in 0..n {
        let xr = &xd[i * f..][..f];
        let gxr = &mut gx[i * f..][..f];
        for j in 0..o {
            let gv = gd[i * o + j];
            let wr = &wd[j * f..][..f];
            let gwr = &mut gw[j * f..][..f];
            for k in 0..f {
                gxr[k] += gv * wr[k];
                gwr[k] += gv * xr[k];
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), gx).expect("linear grad input"),
        Tensor::new(weight.shape().to_vec(), gw).expect("linear grad weight"),
    )
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::new(x.shape().to_vec(), data).expect("relu shape")
}

pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("relu grad shape")
}

#[derive(Debug, Clone, Copy)]
pub struct PoolGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolGeom {
    pub fn new(x: &[usize], kh: usize, kw: usize, stride: usize) -> Option<Self> {
        let (n, c, h, w) = (x[0], x[1], x[2], x[3]);
        if h < kh || w < kw {
            return None;
        }
        Some(PoolGeom {
            n,
            c,
            h,
            w,
            kh,
            kw,
            stride,
            oh: (h - kh) / stride + 1,
            ow: (w - kw) / stride + 1,
        })
    }
}

/// Returns the pooled tensor and, per output, the flat input index it came from.
pub fn maxpool_forward(x: &Tensor, g: &PoolGeom) -> (Tensor, Vec<usize>) {
    let xd = x.data();
    let mut out = Vec::with_capacity(g.n * g.c * g.oh * g.ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for plane in 0..g.n * g.c {
        let base = plane * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut best = base + oy * g.stride * g.w + ox * g.stride;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let idx = base + (oy * g.stride + ky) * g.w + ox * g.stride + kx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    (
        Tensor::new(vec![g.n, g.c, g.oh, g.ow], out).expect("maxpool shape"),
        arg,
    )
}

pub fn maxpool_backward(in_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(in_shape);
    let gd = gx.data_mut();
    for (&src, &g) in argmax.iter().zip(grad_out.data()) {
        gd[src] += g;
    }
    gx
}

pub fn avgpool_forward(x: &Tensor, g: &PoolGeom) -> Tensor {
    let xd = x.data();
    let inv = 1.0 / (g.kh * g.kw) as f64;
    let mut out = Vec::with_capacity(g.n * g.c * g.oh * g.ow);
    for plane in 0..g.n * g.c {
        let base = plane * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut acc = 0.0;
                for ky in 0..g.kh {
                    let row = base + (oy * g.stride + ky) * g.w + ox * g.stride;
                    acc += xd[row..row + g.kw].iter().sum::<f64>();
                }
                out.push(acc * inv);
            }
        }
    }
    Tensor::new(vec![g.n, g.c, g.oh, g.ow], out).expect("avgpool shape")
}

pub fn avgpool_backward(g: &PoolGeom, grad_out: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(&[g.n, g.c, g.h, g.w]);
    let gxd = gx.data_mut();
    let gd = grad_out.data();
    let inv = 1.0 / (g.kh * g.kw) as f64;
    for plane in 0..g.n * g.c {
        let base = plane * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let gv = gd[(plane * g.oh + oy) * g.ow + ox] * inv;
                for ky in 0..g.kh {
                    let row = base + (oy * g.stride + ky) * g.w + ox * g.stride;
                    gxd[row..row + g.kw].iter_mut().for_each(|v| *v += gv);
                }
            }
        }
    }
    gx
}

/// Layout helper: channel axis is 1, `inner` is the product of axes after it.
#[inline]
fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = shape[1];
    let inner: usize = shape[2..].iter().product();
    (n, c, inner)
}

#[derive(Debug, Clone)]
pub struct BnTrainCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

/// Training-mode batchnorm. Returns the output, the backward cache, and the
/// batch mean and unbiased variance for the running averages.
pub fn batchnorm_train_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
) -> (Tensor, BnTrainCache, Vec<f64>, Vec<f64>) {
    let (n, c, inner) = channel_layout(x.shape());
    let count = (n * inner) as f64;
    let xd = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            mean[ch] += xd[(i * c + ch) * inner..][..inner].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for i in 0..n {
        for ch in 0..c {
            let m = mean[ch];
            var[ch] += xd[(i * c + ch) * inner..][..inner]
                .iter()
                .map(|v| (v - m) * (v - m))
                .sum::<f64>();
        }
    }
    let unbiased: Vec<f64> = var
        .iter()
        .map(|v| if count > 1.0 { v / (count - 1.0) } else { 0.0 })
        .collect();
    var.iter_mut().for_each(|v| *v /= count);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    let (gd, bd) = (gamma.data(), beta.data());
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * inner;
            for k in off..off + inner {
                let xh = (xd[k] - mean[ch]) * inv_std[ch];
                xhat[k] = xh;
                out[k] = gd[ch] * xh + bd[ch];
            }
        }
    }
    let shape = x.shape().to_vec();
    (
        Tensor::new(shape.clone(), out).expect("bn shape"),
        BnTrainCache {
            xhat: Tensor::new(shape, xhat).expect("bn shape"),
            inv_std,
        },
        mean,
        unbiased,
    )
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_train_backward(
    cache: &BnTrainCache,
    gamma: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, inner) = channel_layout(grad_out.shape());
    let count = (n * inner) as f64;
    let gd = grad_out.data();
    let xh = cache.xhat.data();
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let off = (i * c + ch) * inner;
            for k in off..off + inner {
                sum_g[ch] += gd[k];
                sum_gx[ch] += gd[k] * xh[k];
            }
        }
    }
    let mut gx = vec![0.0; gd.len()];
    for i in 0..n {
        for ch in 0..c {
            let scale = gamma.data()[ch] * cache.inv_std[ch] / count;
            let off = (i * c + ch) * inner;
            for k in off..off + inner {
                gx[k] = scale * (count * gd[k] - sum_g[ch] - xh[k] * sum_gx[ch]);
            }
        }
    }
    (
        Tensor::new(grad_out.shape().to_vec(), gx).expect("bn grad shape"),
        Tensor::new(vec![c], sum_gx).expect("bn grad gamma"),
        Tensor::new(vec![c], sum_g).expect("bn grad beta"),
    )
}

pub fn batchnorm_eval_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f64],
    running_var: &[f64],
) -> Tensor {
    let (n, c, inner) = channel_layout(x.shape());
    let xd = x.data();
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let scale = gamma.data()[ch] / (running_var[ch] + BN_EPS).sqrt();
        let shift = beta.data()[ch] - running_mean[ch] * scale;
        for i in 0..n {
            let off = (i * c + ch) * inner;
            for k in off..off + inner {
                out[k] = xd[k] * scale + shift;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("bn shape")
}

pub fn batchnorm_eval_backward(
    x: &Tensor,
    gamma: &Tensor,
    running_mean: &[f64],
    running_var: &[f64],
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, inner) = channel_layout(x.shape());
    let xd = x.data();
    let gd = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    for ch in 0..c {
        let inv_std = 1.0 / (running_var[ch] + BN_EPS).sqrt();
        let scale = gamma.data()[ch] * inv_std;
        for i in 0..n {
            let off = (i * c + ch) * inner;
            for k in off..off + inner {
                gx[k] = gd[k] * scale;
                gg[ch] += gd[k] * (xd[k] - running_mean[ch]) * inv_std;
                gb[ch] += gd[k];
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), gx).expect("bn grad shape"),
        Tensor::new(vec![c], gg).expect("bn grad gamma"),
        Tensor::new(vec![c], gb).expect("bn grad beta"),
    )
}

/// Softmax over axis 1 (classes), independently at every other position.
pub fn softmax_forward(x: &Tensor) -> Tensor {
    let (n, k, inner) = channel_layout(x.shape());
    let xd = x.data();
    let mut out = vec![0.0; x.len()];
    for i in 0..n {
        let base = i * k * inner;
        for p in 0..inner {
            let mut max = f64::NEG_INFINITY;
            for c in 0..k {
                max = max.max(xd[base + c * inner + p]);
            }
            let mut sum = 0.0;
            for c in 0..k {
                let e = (xd[base + c * inner + p] - max).exp();
                out[base + c * inner + p] = e;
                sum += e;
            }
            for c in 0..k {
                out[base + c * inner + p] /= sum;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("softmax shape")
}

/// `dz = p * (g - sum_k p_k g_k)` per position.
pub fn softmax_backward(probs: &Tensor, grad_out: &Tensor) -> Tensor {
    let (n, k, inner) = channel_layout(probs.shape());
    let pd = probs.data();
    let gd = grad_out.data();
    let mut gx = vec![0.0; pd.len()];
    for i in 0..n {
        let base = i * k * inner;
        for p in 0..inner {
            let dot: f64 = (0..k)
                .map(|c| pd[base + c * inner + p] * gd[base + c * inner + p])
                .sum();
            for c in 0..k {
                let idx = base + c * inner + p;
                gx[idx] = pd[idx] * (gd[idx] - dot);
            }
        }
    }
    Tensor::new(probs.shape().to_vec(), gx).expect("softmax grad shape")
}
