//! Bilinear resampling: per-pixel displaced sampling and fixed x2 upsampling.
//!
//! Reads outside the image clamp to the border pixel. Displaced sampling is
//! differentiable with respect to both the source values and the offsets.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Corner indices and weights for one bilinear read at (y, x), after
/// clamping the coordinates to the image rectangle.
#[inline]
fn bilinear_cell<T: Scalar>(y: T, x: T, h: usize, w: usize) -> (usize, usize, usize, usize, T, T) {
    let zero = T::zero();
    let ymax = T::of_f64((h - 1) as f64);
    let xmax = T::of_f64((w - 1) as f64);
    let yc = y.max(zero).min(ymax);
    let xc = x.max(zero).min(xmax);
    let y0 = yc.floor();
    let x0 = xc.floor();
    let fy = yc - y0;
    let fx = xc - x0;
    let iy0 = y0.as_f64() as usize;
    let ix0 = x0.as_f64() as usize;
    let iy1 = (iy0 + 1).min(h - 1);
    let ix1 = (ix0 + 1).min(w - 1);
    (iy0, iy1, ix0, ix1, fy, fx)
}

fn check_offsets<T: Scalar>(input: &Tensor<T>, offsets: &Tensor<T>) -> Result<()> {
    let ish = input.shape();
    let osh = offsets.shape();
    if osh.c != 2 || osh.b != ish.b || osh.h != ish.h || osh.w != ish.w {
        return Err(Error::shape(format!(
            "grid_sample: offsets {osh} do not match input {ish} (want ({}, 2, {}, {}))",
            ish.b, ish.h, ish.w
        )));
    }
    offsets.ensure_finite("grid_sample offsets")
}

/// Sample input at (m + dy, n + dx) per output pixel (m, n).
///
/// offsets channel 0 is dx (applied to the column), channel 1 is dy.
pub fn grid_sample_forward<T: Scalar>(
    input: &Tensor<T>,
    offsets: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_offsets(input, offsets)?;
    let ish = input.shape();
    let mut out = Tensor::zeros(ish.b, ish.c, ish.h, ish.w);
    for b in 0..ish.b {
        let dx = offsets.plane(b, 0);
        let dy = offsets.plane(b, 1);
        for c in 0..ish.c {
            let src = input.plane(b, c);
            for m in 0..ish.h {
                for n in 0..ish.w {
                    let p = m * ish.w + n;
                    let y = T::of_f64(m as f64) + dy[p];
                    let x = T::of_f64(n as f64) + dx[p];
                    let (iy0, iy1, ix0, ix1, fy, fx) = bilinear_cell(y, x, ish.h, ish.w);
                    let one = T::one();
                    let v00 = src[iy0 * ish.w + ix0];
                    let v01 = src[iy0 * ish.w + ix1];
                    let v10 = src[iy1 * ish.w + ix0];
                    let v11 = src[iy1 * ish.w + ix1];
                    let top = (one - fx) * v00 + fx * v01;
                    let bot = (one - fx) * v10 + fx * v11;
                    out.set(b, c, m, n, (one - fy) * top + fy * bot);
                }
            }
        }
    }
    Ok(out)
}

/// Gradients for [`grid_sample_forward`] w.r.t. input and offsets.
///
/// Clamped coordinates contribute zero offset gradient in the clamped
/// direction (the read no longer moves with the offset there).
pub fn grid_sample_backward<T: Scalar>(
    input: &Tensor<T>,
    offsets: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let ish = input.shape();
    let mut grad_input = Tensor::zeros(ish.b, ish.c, ish.h, ish.w);
    let mut grad_offsets = Tensor::zeros(ish.b, 2, ish.h, ish.w);
    let ymax = (ish.h - 1) as f64;
    let xmax = (ish.w - 1) as f64;
    for b in 0..ish.b {
        for m in 0..ish.h {
            for n in 0..ish.w {
                let p = m * ish.w + n;
                let dxv = offsets.plane(b, 0)[p];
                let dyv = offsets.plane(b, 1)[p];
                let y = T::of_f64(m as f64) + dyv;
                let x = T::of_f64(n as f64) + dxv;
                let y_active = y.as_f64() > 0.0 && y.as_f64() < ymax;
                let x_active = x.as_f64() > 0.0 && x.as_f64() < xmax;
                let (iy0, iy1, ix0, ix1, fy, fx) = bilinear_cell(y, x, ish.h, ish.w);
                let one = T::one();
                let mut gx_acc = 0.0f64;
                let mut gy_acc = 0.0f64;
                for c in 0..ish.c {
                    let g = grad_out.at(b, c, m, n);
                    let src = input.plane(b, c);
                    let v00 = src[iy0 * ish.w + ix0];
                    let v01 = src[iy0 * ish.w + ix1];
                    let v10 = src[iy1 * ish.w + ix0];
                    let v11 = src[iy1 * ish.w + ix1];

                    let gi = grad_input.data_mut();
                    let base = (b * ish.c + c) * ish.h * ish.w;
                    gi[base + iy0 * ish.w + ix0] += g * (one - fy) * (one - fx);
                    gi[base + iy0 * ish.w + ix1] += g * (one - fy) * fx;
                    gi[base + iy1 * ish.w + ix0] += g * fy * (one - fx);
                    gi[base + iy1 * ish.w + ix1] += g * fy * fx;

                    if x_active {
                        let dv_dx = (one - fy) * (v01 - v00) + fy * (v11 - v10);
                        gx_acc += (g * dv_dx).as_f64();
                    }
                    if y_active {
                        let dv_dy = (one - fx) * (v10 - v00) + fx * (v11 - v01);
                        gy_acc += (g * dv_dy).as_f64();
                    }
                }
                grad_offsets.set(b, 0, m, n, T::of_f64(gx_acc));
                grad_offsets.set(b, 1, m, n, T::of_f64(gy_acc));
            }
        }
    }
    (grad_input, grad_offsets)
}

/// Smallest distance of any sampling coordinate to a bilinear kink: integer
/// grid lines for interior reads, the border value for clamped reads.
/// The gradient checker requires this to be comfortably positive.
pub fn min_coord_margin<T: Scalar>(input: &Tensor<T>, offsets: &Tensor<T>) -> f64 {
    let ish = input.shape();
    let mut margin = f64::INFINITY;
    for b in 0..ish.b {
        let dx = offsets.plane(b, 0);
        let dy = offsets.plane(b, 1);
        for m in 0..ish.h {
            for n in 0..ish.w {
                let p = m * ish.w + n;
                for (coord, limit) in [
                    (n as f64 + dx[p].as_f64(), (ish.w - 1) as f64),
                    (m as f64 + dy[p].as_f64(), (ish.h - 1) as f64),
                ] {
                    let d = if coord <= 0.0 {
                        -coord
                    } else if coord >= limit {
                        coord - limit
                    } else {
                        (coord - coord.round()).abs()
                    };
                    margin = margin.min(d);
                }
            }
        }
    }
    margin
}

/// Bilinear x2 upsampling, align-corners = false.
///
/// Output pixel centers sit at (i + 0.5) / 2 - 0.5 in input coordinates.
pub fn upsample_x2_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let ish = input.shape();
    let (oh, ow) = (2 * ish.h, 2 * ish.w);
    let mut out = Tensor::zeros(ish.b, ish.c, oh, ow);
    for b in 0..ish.b {
        for c in 0..ish.c {
            let src = input.plane(b, c);
            for oy in 0..oh {
                let y = T::of_f64((oy as f64 + 0.5) / 2.0 - 0.5);
                for ox in 0..ow {
                    let x = T::of_f64((ox as f64 + 0.5) / 2.0 - 0.5);
                    let (iy0, iy1, ix0, ix1, fy, fx) = bilinear_cell(y, x, ish.h, ish.w);
                    let one = T::one();
                    let v00 = src[iy0 * ish.w + ix0];
                    let v01 = src[iy0 * ish.w + ix1];
                    let v10 = src[iy1 * ish.w + ix0];
                    let v11 = src[iy1 * ish.w + ix1];
                    let top = (one - fx) * v00 + fx * v01;
                    let bot = (one - fx) * v10 + fx * v11;
                    out.set(b, c, oy, ox, (one - fy) * top + fy * bot);
                }
            }
        }
    }
    out
}

pub fn upsample_x2_backward<T: Scalar>(in_shape: crate::tensor::Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let ish = in_shape;
    let osh = grad_out.shape();
    let mut grad_input = Tensor::zeros(ish.b, ish.c, ish.h, ish.w);
    for b in 0..ish.b {
        for c in 0..ish.c {
            let base = (b * ish.c + c) * ish.h * ish.w;
            for oy in 0..osh.h {
                let y = T::of_f64((oy as f64 + 0.5) / 2.0 - 0.5);
                for ox in 0..osh.w {
                    let x = T::of_f64((ox as f64 + 0.5) / 2.0 - 0.5);
                    let (iy0, iy1, ix0, ix1, fy, fx) = bilinear_cell(y, x, ish.h, ish.w);
                    let one = T::one();
                    let g = grad_out.at(b, c, oy, ox);
                    let gi = grad_input.data_mut();
                    gi[base + iy0 * ish.w + ix0] += g * (one - fy) * (one - fx);
                    gi[base + iy0 * ish.w + ix1] += g * (one - fy) * fx;
                    gi[base + iy1 * ish.w + ix0] += g * fy * (one - fx);
                    gi[base + iy1 * ish.w + ix1] += g * fy * fx;
                }
            }
        }
    }
    grad_input
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_offsets_reproduce_input() {
        let input =
            Tensor::from_vec(1, 1, 2, 3, vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let offsets = Tensor::zeros(1, 2, 2, 3);
        let out = grid_sample_forward(&input, &offsets).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn midpoint_offset_averages_neighbors() {
        // 1-row input [0, 10], offset +0.5 in x at pixel 0 reads 5.0.
        let input = Tensor::from_vec(1, 1, 1, 2, vec![0.0f32, 10.0]).unwrap();
        let mut offsets = Tensor::zeros(1, 2, 1, 2);
        offsets.set(0, 0, 0, 0, 0.5);
        let out = grid_sample_forward(&input, &offsets).unwrap();
        assert_eq!(out.at(0, 0, 0, 0), 5.0);
        assert_eq!(out.at(0, 0, 0, 1), 10.0);
    }

    #[test]
    fn integer_offsets_shift_with_border_clamp() {
        let input = Tensor::from_vec(1, 1, 1, 3, vec![1.0f32, 2.0, 3.0]).unwrap();
        let mut offsets = Tensor::zeros(1, 2, 1, 3);
        for n in 0..3 {
            offsets.set(0, 0, 0, n, 1.0);
        }
        let out = grid_sample_forward(&input, &offsets).unwrap();
        assert_eq!(out.data(), &[2.0, 3.0, 3.0]);
    }

    #[test]
    fn non_finite_offsets_rejected() {
        let input = Tensor::<f32>::zeros(1, 1, 2, 2);
        let mut offsets = Tensor::zeros(1, 2, 2, 2);
        offsets.data_mut()[0] = f32::NAN;
        assert!(grid_sample_forward(&input, &offsets).is_err());
    }

    #[test]
    fn upsample_matches_closed_form_row() {
        let input = Tensor::from_vec(1, 1, 1, 2, vec![0.0f64, 2.0]).unwrap();
        let out = upsample_x2_forward(&input);
        let want = [0.0, 0.5, 1.5, 2.0];
        assert_eq!(out.shape().h, 2);
        for (x, y) in out.data()[..4].iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        // Second output row repeats the first (single input row).
        assert_eq!(&out.data()[..4], &out.data()[4..]);
    }

    #[test]
    fn upsample_constant_and_single_pixel() {
        let c = Tensor::filled(1, 2, 3, 3, 0.7f32);
        let up = upsample_x2_forward(&c);
        assert!(up.data().iter().all(|&v| v == 0.7));
        let one = Tensor::filled(1, 1, 1, 1, 3.5f32);
        let up = upsample_x2_forward(&one);
        assert_eq!(up.shape(), crate::tensor::Shape::new(1, 1, 2, 2));
        assert!(up.data().iter().all(|&v| v == 3.5));
    }
}
