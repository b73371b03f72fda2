//! Average and max pooling.
//!
//! Padded cells are excluded from both modes: averages divide by the number
//! of in-bounds cells and maxima ignore the padding, so constant inputs stay
//! constant under resolution-preserving pooling. Max routes its gradient to
//! the first maximal element in scan order.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolCfg {
    pub mode: PoolMode,
    pub window: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolCfg {
    /// 3x3 stride-1 resolution-preserving pooling.
    pub fn same3(mode: PoolMode) -> Self {
        PoolCfg {
            mode,
            window: 3,
            stride: 1,
            padding: 1,
        }
    }
}

fn pool_out_dim(input: usize, cfg: &PoolCfg) -> Option<usize> {
    let padded = input + 2 * cfg.padding;
    if padded < cfg.window {
        return None;
    }
    Some((padded - cfg.window) / cfg.stride + 1)
}

pub fn check_pool_shape<T: Scalar>(input: &Tensor<T>, cfg: &PoolCfg) -> Result<(usize, usize)> {
    if cfg.window < 1 || cfg.stride < 1 {
        return Err(Error::shape("pool2d: window and stride must be >= 1"));
    }
    let ish = input.shape();
    match (pool_out_dim(ish.h, cfg), pool_out_dim(ish.w, cfg)) {
        (Some(oh), Some(ow)) => Ok((oh, ow)),
        _ => Err(Error::shape(format!(
            "pool2d: window {} larger than padded input {}x{}",
            cfg.window, ish.h, ish.w
        ))),
    }
}

/// In-bounds cell range of one pooling window.
#[inline]
fn window_range(o: usize, cfg: &PoolCfg, limit: usize) -> (usize, usize) {
    let start = (o * cfg.stride) as isize - cfg.padding as isize;
    let lo = start.max(0) as usize;
    let hi = ((start + cfg.window as isize) as usize).min(limit);
    (lo, hi)
}

pub fn pool2d_forward<T: Scalar>(input: &Tensor<T>, cfg: &PoolCfg) -> Result<Tensor<T>> {
    let (oh, ow) = check_pool_shape(input, cfg)?;
    let ish = input.shape();
    let mut out = Tensor::zeros(ish.b, ish.c, oh, ow);
    for b in 0..ish.b {
        for c in 0..ish.c {
            let src = input.plane(b, c);
            for oy in 0..oh {
                let (y0, y1) = window_range(oy, cfg, ish.h);
                for ox in 0..ow {
                    let (x0, x1) = window_range(ox, cfg, ish.w);
                    let v = match cfg.mode {
                        PoolMode::Avg => {
                            let mut acc = 0.0f64;
                            for y in y0..y1 {
                                for x in x0..x1 {
                                    acc += src[y * ish.w + x].as_f64();
                                }
                            }
                            T::of_f64(acc / ((y1 - y0) * (x1 - x0)) as f64)
                        }
                        PoolMode::Max => {
                            let mut best = T::neg_infinity();
                            for y in y0..y1 {
                                for x in x0..x1 {
                                    let v = src[y * ish.w + x];
                                    if v > best {
                                        best = v;
                                    }
                                }
                            }
                            best
                        }
                    };
                    out.set(b, c, oy, ox, v);
                }
            }
        }
    }
    Ok(out)
}

pub fn pool2d_backward<T: Scalar>(
    input: &Tensor<T>,
    cfg: &PoolCfg,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let ish = input.shape();
    let osh = grad_out.shape();
    let mut grad_input = Tensor::zeros(ish.b, ish.c, ish.h, ish.w);
    for b in 0..ish.b {
        for c in 0..ish.c {
            let src = input.plane(b, c);
            let base = (b * ish.c + c) * ish.h * ish.w;
            for oy in 0..osh.h {
                let (y0, y1) = window_range(oy, cfg, ish.h);
                for ox in 0..osh.w {
                    let (x0, x1) = window_range(ox, cfg, ish.w);
                    let g = grad_out.at(b, c, oy, ox);
                    match cfg.mode {
                        PoolMode::Avg => {
                            let share = g / T::of_f64(((y1 - y0) * (x1 - x0)) as f64);
                            for y in y0..y1 {
                                for x in x0..x1 {
                                    grad_input.data_mut()[base + y * ish.w + x] += share;
                                }
                            }
                        }
                        PoolMode::Max => {
                            let mut best = T::neg_infinity();
                            let mut arg = (y0, x0);
                            for y in y0..y1 {
                                for x in x0..x1 {
                                    let v = src[y * ish.w + x];
                                    if v > best {
                                        best = v;
                                        arg = (y, x);
                                    }
                                }
                            }
                            grad_input.data_mut()[base + arg.0 * ish.w + arg.1] += g;
                        }
                    }
                }
            }
        }
    }
    grad_input
}

/// Smallest difference between the two largest values over all pooling
/// windows; infinity for single-element windows. Near-zero gaps mean the
/// max is about to switch elements, which matters to the gradient checker.
pub fn min_top_two_gap<T: Scalar>(input: &Tensor<T>, cfg: &PoolCfg) -> f64 {
    let ish = input.shape();
    let (oh, ow) = match (pool_out_dim(ish.h, cfg), pool_out_dim(ish.w, cfg)) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => return f64::INFINITY,
    };
    let mut min_gap = f64::INFINITY;
    for b in 0..ish.b {
        for c in 0..ish.c {
            let src = input.plane(b, c);
            for oy in 0..oh {
                let (y0, y1) = window_range(oy, cfg, ish.h);
                for ox in 0..ow {
                    let (x0, x1) = window_range(ox, cfg, ish.w);
                    let mut top1 = f64::NEG_INFINITY;
                    let mut top2 = f64::NEG_INFINITY;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let v = src[y * ish.w + x].as_f64();
                            if v > top1 {
                                top2 = top1;
                                top1 = v;
                            } else if v > top2 {
                                top2 = v;
                            }
                        }
                    }
                    if top2.is_finite() {
                        min_gap = min_gap.min(top1 - top2);
                    }
                }
            }
        }
    }
    min_gap
}

/// Global average pool to (B, C, 1, 1), accumulated in f64.
pub fn global_avg_pool_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let ish = input.shape();
    let mut out = Tensor::zeros(ish.b, ish.c, 1, 1);
    let inv = 1.0 / (ish.h * ish.w) as f64;
    for b in 0..ish.b {
        for c in 0..ish.c {
            let acc: f64 = input.plane(b, c).iter().map(|v| v.as_f64()).sum();
            out.set(b, c, 0, 0, T::of_f64(acc * inv));
        }
    }
    out
}

pub fn global_avg_pool_backward<T: Scalar>(
    in_shape: crate::tensor::Shape,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut grad_input = Tensor::zeros(in_shape.b, in_shape.c, in_shape.h, in_shape.w);
    let inv = T::of_f64(1.0 / (in_shape.h * in_shape.w) as f64);
    for b in 0..in_shape.b {
        for c in 0..in_shape.c {
            let share = grad_out.at(b, c, 0, 0) * inv;
            let hw = in_shape.h * in_shape.w;
            let base = (b * in_shape.c + c) * hw;
            grad_input.data_mut()[base..base + hw]
                .iter_mut()
                .for_each(|v| *v += share);
        }
    }
    grad_input
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_block_avg_and_max() {
        let input = Tensor::from_vec(1, 1, 2, 2, vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let avg = pool2d_forward(
            &input,
            &PoolCfg {
                mode: PoolMode::Avg,
                window: 2,
                stride: 2,
                padding: 0,
            },
        )
        .unwrap();
        let max = pool2d_forward(
            &input,
            &PoolCfg {
                mode: PoolMode::Max,
                window: 2,
                stride: 2,
                padding: 0,
            },
        )
        .unwrap();
        // Oracle: direct enumeration of the single window.
        assert_eq!(avg.data(), &[(1.0 + 2.0 + 3.0 + 4.0) / 4.0]);
        assert_eq!(max.data(), &[4.0]);
    }

    #[test]
    fn constant_input_survives_both_modes_even_padded() {
        let input = Tensor::filled(1, 2, 5, 4, -1.25f32);
        for mode in [PoolMode::Avg, PoolMode::Max] {
            let out = pool2d_forward(&input, &PoolCfg::same3(mode)).unwrap();
            assert_eq!(out.shape(), input.shape());
            assert!(out.data().iter().all(|&v| v == -1.25));
        }
    }

    #[test]
    fn global_average_of_ones_is_one() {
        let input = Tensor::filled(2, 3, 7, 5, 1.0f32);
        let out = global_avg_pool_forward(&input);
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn oversized_window_is_shape_error() {
        let input = Tensor::<f32>::zeros(1, 1, 3, 3);
        let cfg = PoolCfg {
            mode: PoolMode::Avg,
            window: 6,
            stride: 1,
            padding: 1,
        };
        assert!(pool2d_forward(&input, &cfg).is_err());
    }

    #[test]
    fn max_backward_routes_to_first_argmax_on_ties() {
        let input = Tensor::from_vec(1, 1, 1, 4, vec![2.0f32, 5.0, 5.0, 1.0]).unwrap();
        let cfg = PoolCfg {
            mode: PoolMode::Max,
            window: 4,
            stride: 4,
            padding: 0,
        };
        let grad_out = Tensor::filled(1, 1, 1, 1, 1.0f32);
        let gi = pool2d_backward(&input, &cfg, &grad_out);
        assert_eq!(gi.data(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
