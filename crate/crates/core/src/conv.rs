//! Valid (no padding), stride-1 cross-correlation and non-overlapping average
//! pooling, plus the adjoints the convolutional model needs for its top-down
//! signal and its weight gradient.

use crate::error::{EpError, Result};
use crate::tensor::Tensor;

fn dims3(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(EpError::Dimension {
            op,
            axes: format!("expected a rank-3 tensor (C×H×W), got {s:?}"),
        }),
    }
}

fn dims4(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        &[f, c, kh, kw] => Ok((f, c, kh, kw)),
        s => Err(EpError::Dimension {
            op,
            axes: format!("expected a rank-4 kernel tensor (F×C×k×k), got {s:?}"),
        }),
    }
}

/// Cross-correlation of a C×H×W input with F×C×k×k kernels, giving
/// F×(H−k+1)×(W−k+1).
pub fn conv2d(input: &Tensor, kernels: &Tensor) -> Result<Tensor> {
    let (c, h, w) = dims3(input, "conv2d")?;
    let (f, kc, kh, kw) = dims4(kernels, "conv2d")?;
    if kc != c {
        return Err(EpError::Dimension {
            op: "conv2d",
            axes: format!("channel axis: input has {c}, kernels expect {kc}"),
        });
    }
    if kh > h || kw > w {
        return Err(EpError::Dimension {
            op: "conv2d",
            axes: format!("spatial axes: kernel {kh}×{kw} larger than input {h}×{w}"),
        });
    }
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let x = input.data();
    let k = kernels.data();
    let mut out = vec![0.0; f * oh * ow];
    for fi in 0..f {
        let plane = &mut out[fi * oh * ow..(fi + 1) * oh * ow];
        for ci in 0..c {
            for di in 0..kh {
                for dj in 0..kw {
                    let kv = k[((fi * c + ci) * kh + di) * kw + dj];
                    if kv == 0.0 {
                        continue;
                    }
                    for i in 0..oh {
                        let src = &x[(ci * h + i + di) * w + dj..][..ow];
                        let dst = &mut plane[i * ow..(i + 1) * ow];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += kv * s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![f, oh, ow], out)
}

/// Adjoint of [`conv2d`] with respect to its input (a "full" transposed
/// convolution): maps an F×H′×W′ signal back to C×H×W, where `in_hw` gives
/// the original (H, W).
pub fn conv2d_input_adjoint(grad: &Tensor, kernels: &Tensor, in_hw: (usize, usize)) -> Result<Tensor> {
    let (f, oh, ow) = dims3(grad, "conv2d_input_adjoint")?;
    let (kf, c, kh, kw) = dims4(kernels, "conv2d_input_adjoint")?;
    let (h, w) = in_hw;
    if kf != f || oh + kh != h + 1 || ow + kw != w + 1 {
        return Err(EpError::Dimension {
            op: "conv2d_input_adjoint",
            axes: format!(
                "signal {f}×{oh}×{ow} incompatible with kernels {kf}×{c}×{kh}×{kw} and input {h}×{w}"
            ),
        });
    }
    let g = grad.data();
    let k = kernels.data();
    let mut out = vec![0.0; c * h * w];
    for fi in 0..f {
        let plane = &g[fi * oh * ow..(fi + 1) * oh * ow];
        for ci in 0..c {
            for di in 0..kh {
                for dj in 0..kw {
                    let kv = k[((fi * c + ci) * kh + di) * kw + dj];
                    if kv == 0.0 {
                        continue;
                    }
                    for i in 0..oh {
                        let src = &plane[i * ow..(i + 1) * ow];
                        let dst = &mut out[(ci * h + i + di) * w + dj..][..ow];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += kv * s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Gradient of `⟨grad, conv2d(input, K)⟩` with respect to `K`: correlates the
/// F×H′×W′ signal with the C×H×W input to produce F×C×k×k.
pub fn conv2d_kernel_grad(grad: &Tensor, input: &Tensor, k: (usize, usize)) -> Result<Tensor> {
    let (f, oh, ow) = dims3(grad, "conv2d_kernel_grad")?;
    let (c, h, w) = dims3(input, "conv2d_kernel_grad")?;
    let (kh, kw) = k;
    if oh + kh != h + 1 || ow + kw != w + 1 {
        return Err(EpError::Dimension {
            op: "conv2d_kernel_grad",
            axes: format!("signal {oh}×{ow} incompatible with input {h}×{w} and kernel {kh}×{kw}"),
        });
    }
    let g = grad.data();
    let x = input.data();
    let mut out = vec![0.0; f * c * kh * kw];
    for fi in 0..f {
        let plane = &g[fi * oh * ow..(fi + 1) * oh * ow];
        for ci in 0..c {
            for di in 0..kh {
                for dj in 0..kw {
                    let mut acc = 0.0;
                    for i in 0..oh {
                        let src = &x[(ci * h + i + di) * w + dj..][..ow];
                        acc += crate::tensor::dot(&plane[i * ow..(i + 1) * ow], src);
                    }
                    out[((fi * c + ci) * kh + di) * kw + dj] = acc;
                }
            }
        }
    }
    Tensor::new(vec![f, c, kh, kw], out)
}

/// Non-overlapping `window`×`window` mean pooling.
pub fn avg_pool(input: &Tensor, window: usize) -> Result<Tensor> {
    let (f, h, w) = dims3(input, "avg_pool")?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(EpError::Dimension {
            op: "avg_pool",
            axes: format!("spatial axes {h}×{w} not divisible by window {window}"),
        });
    }
    let (ph, pw) = (h / window, w / window);
    let norm = 1.0 / (window * window) as f64;
    let x = input.data();
    let mut out = vec![0.0; f * ph * pw];
    for fi in 0..f {
        for i in 0..h {
            for j in 0..w {
                out[(fi * ph + i / window) * pw + j / window] += x[(fi * h + i) * w + j];
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= norm);
    Tensor::new(vec![f, ph, pw], out)
}

/// Adjoint of [`avg_pool`]: every value is spread evenly over its window.
pub fn avg_unpool(input: &Tensor, window: usize) -> Result<Tensor> {
    let (f, ph, pw) = dims3(input, "avg_unpool")?;
    if window == 0 {
        return Err(EpError::Dimension {
            op: "avg_unpool",
            axes: "window must be positive".into(),
        });
    }
    let (h, w) = (ph * window, pw * window);
    let norm = 1.0 / (window * window) as f64;
    let x = input.data();
    let mut out = vec![0.0; f * h * w];
    for fi in 0..f {
        for i in 0..h {
            for j in 0..w {
                out[(fi * h + i) * w + j] = norm * x[(fi * ph + i / window) * pw + j / window];
            }
        }
    }
    Tensor::new(vec![f, h, w], out)
}
