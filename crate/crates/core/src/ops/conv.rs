//! 2D convolution with stride, dilation and zero padding.
//!
//! Forward is im2col + GEMM; backward recomputes the column buffer per batch
//! item instead of saving it, trading FLOPs for memory.

use crate::error::{Error, Result};
use crate::ops::gemm::{gemm_nn, gemm_tn};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvCfg {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvCfg {
    pub fn unit() -> Self {
        ConvCfg {
            stride: 1,
            dilation: 1,
            padding: 0,
        }
    }

    /// 3x3 resolution-preserving convolution at a given dilation.
    pub fn same3(dilation: usize) -> Self {
        ConvCfg {
            stride: 1,
            dilation,
            padding: dilation,
        }
    }
}

/// floor((in + 2*pad - dilation*(k-1) - 1) / stride) + 1, or None if empty.
pub fn conv_out_dim(input: usize, k: usize, cfg: &ConvCfg) -> Option<usize> {
    let span = cfg.dilation * (k - 1) + 1;
    let padded = input + 2 * cfg.padding;
    if padded < span {
        return None;
    }
    Some((padded - span) / cfg.stride + 1)
}

pub fn check_conv_shapes<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    cfg: &ConvCfg,
) -> Result<(usize, usize)> {
    let (ish, ksh) = (input.shape(), kernel.shape());
    if cfg.stride < 1 || cfg.dilation < 1 {
        return Err(Error::shape("conv2d: stride and dilation must be >= 1"));
    }
    if ish.c != ksh.c {
        return Err(Error::shape(format!(
            "conv2d: input has {} channels, kernel expects {}",
            ish.c, ksh.c
        )));
    }
    if let Some(b) = bias {
        let bsh = b.shape();
        if bsh.c != ksh.b || bsh.b != 1 || bsh.h != 1 || bsh.w != 1 {
            return Err(Error::shape(format!(
                "conv2d: bias shape {bsh} does not match {} output channels",
                ksh.b
            )));
        }
    }
    let oh = conv_out_dim(ish.h, ksh.h, cfg);
    let ow = conv_out_dim(ish.w, ksh.w, cfg);
    match (oh, ow) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok((oh, ow)),
        _ => Err(Error::shape(format!(
            "conv2d: kernel {}x{} does not fit input {}x{} (pad {})",
            ksh.h, ksh.w, ish.h, ish.w, cfg.padding
        ))),
    }
}

/// Unfold one batch item into a (cin*kh*kw) x (oh*ow) column matrix.
fn im2col<T: Scalar>(
    input: &Tensor<T>,
    b: usize,
    kh: usize,
    kw: usize,
    cfg: &ConvCfg,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let ish = input.shape();
    let n = oh * ow;
    cols.iter_mut().for_each(|v| *v = T::zero());
    for c in 0..ish.c {
        let plane = input.plane(b, c);
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut cols[((c * kh + ky) * kw + kx) * n..][..n];
                for oy in 0..oh {
                    let iy = (oy * cfg.stride + ky * cfg.dilation) as isize
                        - cfg.padding as isize;
                    if iy < 0 || iy >= ish.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * ish.w..][..ish.w];
                    let dst = &mut row[oy * ow..][..ow];
                    for ox in 0..ow {
                        let ix = (ox * cfg.stride + kx * cfg.dilation) as isize
                            - cfg.padding as isize;
                        if ix >= 0 && ix < ish.w as isize {
                            dst[ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Unfold one batch item directly in transposed (oh*ow) x (cin*kh*kw)
/// layout, so the weight-gradient product runs as a plain row-major GEMM.
fn im2row<T: Scalar>(
    input: &Tensor<T>,
    b: usize,
    kh: usize,
    kw: usize,
    cfg: &ConvCfg,
    oh: usize,
    ow: usize,
    rows: &mut [T],
) {
    let ish = input.shape();
    let patch = ish.c * kh * kw;
    rows.iter_mut().for_each(|v| *v = T::zero());
    for c in 0..ish.c {
        let plane = input.plane(b, c);
        for ky in 0..kh {
            for kx in 0..kw {
                let col = (c * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * cfg.stride + ky * cfg.dilation) as isize
                        - cfg.padding as isize;
                    if iy < 0 || iy >= ish.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * ish.w..][..ish.w];
                    for ox in 0..ow {
                        let ix = (ox * cfg.stride + kx * cfg.dilation) as isize
                            - cfg.padding as isize;
                        if ix >= 0 && ix < ish.w as isize {
                            rows[(oy * ow + ox) * patch + col] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add a column matrix back onto the input layout.
fn col2im<T: Scalar>(
    cols: &[T],
    b: usize,
    kh: usize,
    kw: usize,
    cfg: &ConvCfg,
    oh: usize,
    ow: usize,
    grad_input: &mut Tensor<T>,
) {
    let ish = grad_input.shape();
    let n = oh * ow;
    let (in_h, in_w, in_c) = (ish.h, ish.w, ish.c);
    let hw = in_h * in_w;
    let base = b * in_c * hw;
    let data = grad_input.data_mut();
    for c in 0..in_c {
        let plane = &mut data[base + c * hw..][..hw];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &cols[((c * kh + ky) * kw + kx) * n..][..n];
                for oy in 0..oh {
                    let iy = (oy * cfg.stride + ky * cfg.dilation) as isize
                        - cfg.padding as isize;
                    if iy < 0 || iy >= in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * in_w..][..in_w];
                    let src = &row[oy * ow..][..ow];
                    for ox in 0..ow {
                        let ix = (ox * cfg.stride + kx * cfg.dilation) as isize
                            - cfg.padding as isize;
                        if ix >= 0 && ix < in_w as isize {
                            dst[ix as usize] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// kernel is (out_c, in_c, kh, kw); bias, when present, is (1, out_c, 1, 1).
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    cfg: &ConvCfg,
) -> Result<Tensor<T>> {
    let (oh, ow) = check_conv_shapes(input, kernel, bias, cfg)?;
    let ish = input.shape();
    let ksh = kernel.shape();
    let (out_c, patch) = (ksh.b, ksh.c * ksh.h * ksh.w);
    let n = oh * ow;

    let mut out = Tensor::zeros(ish.b, out_c, oh, ow);
    let mut cols = vec![T::zero(); patch * n];
    for b in 0..ish.b {
        im2col(input, b, ksh.h, ksh.w, cfg, oh, ow, &mut cols);
        let dst = &mut out.data_mut()[b * out_c * n..][..out_c * n];
        gemm_nn(out_c, patch, n, kernel.data(), &cols, dst);
        if let Some(bias) = bias {
            for oc in 0..out_c {
                let bv = bias.data()[oc];
                dst[oc * n..][..n].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    has_bias: bool,
    cfg: &ConvCfg,
    grad_out: &Tensor<T>,
) -> ConvGrads<T> {
    let ish = input.shape();
    let ksh = kernel.shape();
    let osh = grad_out.shape();
    let (out_c, patch) = (ksh.b, ksh.c * ksh.h * ksh.w);
    let n = osh.h * osh.w;

    let mut grad_input = Tensor::zeros(ish.b, ish.c, ish.h, ish.w);
    let mut grad_kernel = Tensor::zeros(ksh.b, ksh.c, ksh.h, ksh.w);
    let mut rows = vec![T::zero(); patch * n];
    let mut grad_cols = vec![T::zero(); patch * n];
    for b in 0..ish.b {
        let go = &grad_out.data()[b * out_c * n..][..out_c * n];

        // dL/dK += dL/dY * cols^T, with the unfolded input built already
        // transposed so this is a plain row-major product.
        im2row(input, b, ksh.h, ksh.w, cfg, osh.h, osh.w, &mut rows);
        gemm_nn(out_c, n, patch, go, &rows, grad_kernel.data_mut());

        // dL/dcols = K^T * dL/dY, then fold back onto the input.
        grad_cols.iter_mut().for_each(|v| *v = T::zero());
        gemm_tn(patch, out_c, n, kernel.data(), go, &mut grad_cols);
        col2im(&grad_cols, b, ksh.h, ksh.w, cfg, osh.h, osh.w, &mut grad_input);
    }

    let bias = has_bias.then(|| {
        let mut gb = Tensor::zeros(1, out_c, 1, 1);
        for oc in 0..out_c {
            let mut acc = 0.0f64;
            for b in 0..osh.b {
                acc += grad_out.plane(b, oc).iter().map(|v| v.as_f64()).sum::<f64>();
            }
            gb.data_mut()[oc] = T::of_f64(acc);
        }
        gb
    });

    ConvGrads {
        input: grad_input,
        kernel: grad_kernel,
        bias,
    }
}
