//! Orthonormal Haar analysis/synthesis on 2x2 blocks.
//!
//! Subbands are packed channelwise as [LL | LH | HL | HH], each block C
//! channels, at half resolution. With the 1/sqrt(2) filter normalization the
//! transform is orthogonal, so synthesis is both the inverse and the adjoint
//! of analysis; backward passes reuse the opposite kernel.
//!
//! Odd input sizes are mirror-padded by one row/column on the bottom/right
//! before analysis and cropped again after synthesis.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Whether each spatial axis needs one pixel of padding to become even.
pub fn pad_flags(shape: Shape) -> (bool, bool) {
    (shape.h % 2 == 1, shape.w % 2 == 1)
}

/// Mirror index for one pixel of reflect padding (abc -> abcb).
#[inline]
fn mirror(i: usize, len: usize) -> usize {
    if i < len {
        i
    } else if len >= 2 {
        2 * len - i - 2
    } else {
        0
    }
}

fn padded_copy<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let ish = input.shape();
    let (ph, pw) = pad_flags(ish);
    let (h, w) = (ish.h + ph as usize, ish.w + pw as usize);
    let mut out = Tensor::zeros(ish.b, ish.c, h, w);
    for b in 0..ish.b {
        for c in 0..ish.c {
            let src = input.plane(b, c);
            for y in 0..h {
                let sy = mirror(y, ish.h);
                for x in 0..w {
                    out.set(b, c, y, x, src[sy * ish.w + mirror(x, ish.w)]);
                }
            }
        }
    }
    out
}

/// Fold gradients of the padded tensor back onto the original extent.
fn padded_adjoint<T: Scalar>(orig: Shape, grad_padded: &Tensor<T>) -> Tensor<T> {
    let psh = grad_padded.shape();
    let mut out = Tensor::zeros(orig.b, orig.c, orig.h, orig.w);
    for b in 0..orig.b {
        for c in 0..orig.c {
            let src = grad_padded.plane(b, c);
            let base = (b * orig.c + c) * orig.h * orig.w;
            for y in 0..psh.h {
                let sy = mirror(y, orig.h);
                for x in 0..psh.w {
                    out.data_mut()[base + sy * orig.w + mirror(x, orig.w)] +=
                        src[y * psh.w + x];
                }
            }
        }
    }
    out
}

fn analyze_even<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let ish = input.shape();
    let (h2, w2) = (ish.h / 2, ish.w / 2);
    let half = T::of_f64(0.5);
    let mut out = Tensor::zeros(ish.b, 4 * ish.c, h2, w2);
    for b in 0..ish.b {
        for c in 0..ish.c {
            let src = input.plane(b, c);
            let hw2 = h2 * w2;
            let base = (b * 4 * ish.c) * hw2;
            for y in 0..h2 {
                for x in 0..w2 {
                    let a = src[2 * y * ish.w + 2 * x];
                    let bb = src[2 * y * ish.w + 2 * x + 1];
                    let cc = src[(2 * y + 1) * ish.w + 2 * x];
                    let d = src[(2 * y + 1) * ish.w + 2 * x + 1];
                    let p = y * w2 + x;
                    let o = out.data_mut();
                    o[base + c * hw2 + p] = (a + bb + cc + d) * half;
                    o[base + (ish.c + c) * hw2 + p] = (a + bb - cc - d) * half;
                    o[base + (2 * ish.c + c) * hw2 + p] = (a - bb + cc - d) * half;
                    o[base + (3 * ish.c + c) * hw2 + p] = (a - bb - cc + d) * half;
                }
            }
        }
    }
    out
}

fn synthesize_even<T: Scalar>(subbands: &Tensor<T>) -> Result<Tensor<T>> {
    let ssh = subbands.shape();
    if ssh.c % 4 != 0 {
        return Err(Error::shape(format!(
            "idwt2d: packed subbands need a channel count divisible by 4, got {}",
            ssh.c
        )));
    }
    let c_out = ssh.c / 4;
    let (h, w) = (2 * ssh.h, 2 * ssh.w);
    let half = T::of_f64(0.5);
    let mut out = Tensor::zeros(ssh.b, c_out, h, w);
    for b in 0..ssh.b {
        for c in 0..c_out {
            let ll = subbands.plane(b, c);
            let lh = subbands.plane(b, c_out + c);
            let hl = subbands.plane(b, 2 * c_out + c);
            let hh = subbands.plane(b, 3 * c_out + c);
            let base = (b * c_out + c) * h * w;
            for y in 0..ssh.h {
                for x in 0..ssh.w {
                    let p = y * ssh.w + x;
                    let (l, m, n, o) = (ll[p], lh[p], hl[p], hh[p]);
                    let dst = out.data_mut();
                    dst[base + 2 * y * w + 2 * x] = (l + m + n + o) * half;
                    dst[base + 2 * y * w + 2 * x + 1] = (l + m - n - o) * half;
                    dst[base + (2 * y + 1) * w + 2 * x] = (l - m + n - o) * half;
                    dst[base + (2 * y + 1) * w + 2 * x + 1] = (l - m - n + o) * half;
                }
            }
        }
    }
    Ok(out)
}

/// Haar analysis to packed subbands, padding odd extents first.
pub fn dwt2d_packed_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let (ph, pw) = pad_flags(input.shape());
    if ph || pw {
        analyze_even(&padded_copy(input))
    } else {
        analyze_even(input)
    }
}

pub fn dwt2d_packed_backward<T: Scalar>(in_shape: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    // Orthogonality: the adjoint of analysis is synthesis.
    let grad_padded = synthesize_even(grad_out).expect("packed gradient has 4C channels");
    let (ph, pw) = pad_flags(in_shape);
    if ph || pw {
        padded_adjoint(in_shape, &grad_padded)
    } else {
        grad_padded
    }
}

/// Haar synthesis from packed subbands; crop flags undo analysis padding.
pub fn idwt2d_packed_forward<T: Scalar>(
    subbands: &Tensor<T>,
    crop: (bool, bool),
) -> Result<Tensor<T>> {
    let full = synthesize_even(subbands)?;
    if !crop.0 && !crop.1 {
        return Ok(full);
    }
    let fsh = full.shape();
    let (h, w) = (fsh.h - crop.0 as usize, fsh.w - crop.1 as usize);
    let mut out = Tensor::zeros(fsh.b, fsh.c, h, w);
    for b in 0..fsh.b {
        for c in 0..fsh.c {
            let src = full.plane(b, c);
            let base = (b * fsh.c + c) * h * w;
            for y in 0..h {
                let row = &src[y * fsh.w..][..w];
                out.data_mut()[base + y * w..][..w].copy_from_slice(row);
            }
        }
    }
    Ok(out)
}

pub fn idwt2d_packed_backward<T: Scalar>(grad_out: &Tensor<T>, crop: (bool, bool)) -> Tensor<T> {
    let gsh = grad_out.shape();
    let extended = if crop.0 || crop.1 {
        // Adjoint of cropping: zero-extend to the even extent.
        let (h, w) = (gsh.h + crop.0 as usize, gsh.w + crop.1 as usize);
        let mut ext = Tensor::zeros(gsh.b, gsh.c, h, w);
        for b in 0..gsh.b {
            for c in 0..gsh.c {
                let src = grad_out.plane(b, c);
                let base = (b * gsh.c + c) * h * w;
                for y in 0..gsh.h {
                    ext.data_mut()[base + y * w..][..gsh.w]
                        .copy_from_slice(&src[y * gsh.w..][..gsh.w]);
                }
            }
        }
        ext
    } else {
        grad_out.clone()
    };
    analyze_even(&extended)
}
