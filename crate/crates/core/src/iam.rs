//! Inter-scale aggregation: mask-based fusion of adjacent-scale features.
//!
//! Average and max pooling of both inputs feed one convolution whose sigmoid
//! output M blends them: (1 - M) * fine + M * coarse. The addition and
//! concatenation alternatives exist for the ablation harness.

use crate::error::{Error, Result};
use crate::ops::conv::ConvCfg;
use crate::ops::pool::{PoolCfg, PoolMode};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::weights::ParamSource;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FusionMode {
    #[default]
    Mask,
    Add,
    Concat,
}

impl FusionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(FusionMode::Mask),
            "add" => Ok(FusionMode::Add),
            "concat" => Ok(FusionMode::Concat),
            other => Err(Error::config(format!("unknown fusion mode {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FusionMode::Mask => "mask",
            FusionMode::Add => "add",
            FusionMode::Concat => "concat",
        }
    }
}

/// Single-channel sigmoid mask at the finer scale's dimensions.
pub fn compute_fusion_mask<T: Scalar>(
    tape: &mut Tape<T>,
    params: &mut impl ParamSource<T>,
    prefix: &str,
    f_fine: NodeId,
    f_coarse_up: NodeId,
) -> Result<NodeId> {
    if tape.shape(f_fine) != tape.shape(f_coarse_up) {
        return Err(Error::shape(format!(
            "fusion mask: inputs {} vs {} must share the finer scale's dims",
            tape.shape(f_fine),
            tape.shape(f_coarse_up)
        )));
    }
    let avg = PoolCfg::same3(PoolMode::Avg);
    let max = PoolCfg::same3(PoolMode::Max);
    let fa = tape.pool2d(f_fine, avg)?;
    let fm = tape.pool2d(f_fine, max)?;
    let ca = tape.pool2d(f_coarse_up, avg)?;
    let cm = tape.pool2d(f_coarse_up, max)?;
    let cat = tape.concat_channels(&[fa, fm, ca, cm])?;
    let w = params.get(tape, &format!("{prefix}.mask.w"))?;
    let b = params.get(tape, &format!("{prefix}.mask.b"))?;
    let logits = tape.conv2d(cat, w, Some(b), ConvCfg::same3(1))?;
    Ok(tape.sigmoid(logits))
}

/// (1 - M) * fine + M * coarse, with M broadcast over channels.
pub fn fuse<T: Scalar>(
    tape: &mut Tape<T>,
    f_fine: NodeId,
    f_coarse_up: NodeId,
    mask: NodeId,
) -> Result<NodeId> {
    let m = tape.value(mask);
    if m.data()
        .iter()
        .any(|v| v.as_f64() < 0.0 || v.as_f64() > 1.0)
    {
        return Err(Error::Invariant(
            "fusion mask has elements outside [0, 1]".into(),
        ));
    }
    let inv = tape.affine(mask, -1.0, 1.0);
    let keep = tape.mul(f_fine, inv)?;
    let take = tape.mul(f_coarse_up, mask)?;
    tape.add(keep, take)
}

/// Fusion of adjacent scales under the configured mode.
pub fn fuse_scales<T: Scalar>(
    tape: &mut Tape<T>,
    params: &mut impl ParamSource<T>,
    prefix: &str,
    mode: FusionMode,
    f_fine: NodeId,
    f_coarse_up: NodeId,
) -> Result<NodeId> {
    match mode {
        FusionMode::Mask => {
            let mask = compute_fusion_mask(tape, params, prefix, f_fine, f_coarse_up)?;
            fuse(tape, f_fine, f_coarse_up, mask)
        }
        FusionMode::Add => tape.add(f_fine, f_coarse_up),
        FusionMode::Concat => {
            let cat = tape.concat_channels(&[f_fine, f_coarse_up])?;
            let w = params.get(tape, &format!("{prefix}.proj.w"))?;
            let b = params.get(tape, &format!("{prefix}.proj.b"))?;
            let y = tape.conv2d(cat, w, Some(b), ConvCfg::unit())?;
            Ok(tape.leaky_relu(y))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::weights::{Binder, Weights};

    fn rng_tensor(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut s = seed;
        let data = (0..c * h * w)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f32 / (1u64 << 31) as f32) - 1.0
            })
            .collect();
        Tensor::from_vec(1, c, h, w, data).unwrap()
    }

    fn mask_weights(c: usize, zero: bool) -> Weights<f32> {
        let mut w = Weights::new();
        let kernel = if zero {
            Tensor::zeros(1, 4 * c, 3, 3)
        } else {
            rng_tensor(4 * c, 3, 3, 77).cast::<f32>()
                .map(|v| v * 0.2)
        };
        let kernel = Tensor::from_vec(1, 4 * c, 3, 3, kernel.into_data()).unwrap();
        w.insert("iam.s1.mask.w", kernel).unwrap();
        w.insert("iam.s1.mask.b", Tensor::zeros(1, 1, 1, 1)).unwrap();
        w
    }

    #[test]
    fn zero_weights_give_half_mask() {
        let weights = mask_weights(3, true);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&weights, false);
        let fine = tape.constant(rng_tensor(3, 6, 5, 1));
        let coarse = tape.constant(rng_tensor(3, 6, 5, 2));
        let mask = compute_fusion_mask(&mut tape, &mut binder, "iam.s1", fine, coarse).unwrap();
        assert!(tape.value(mask).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn mask_values_strictly_inside_unit_interval() {
        let weights = mask_weights(3, false);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&weights, false);
        let fine = tape.constant(rng_tensor(3, 6, 5, 3));
        let coarse = tape.constant(rng_tensor(3, 6, 5, 4));
        let mask = compute_fusion_mask(&mut tape, &mut binder, "iam.s1", fine, coarse).unwrap();
        let sh = tape.shape(mask);
        assert_eq!((sh.c, sh.h, sh.w), (1, 6, 5));
        assert!(tape.value(mask).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn fuse_endpoints_select_inputs() {
        let mut tape = Tape::<f32>::new();
        let fine = tape.constant(rng_tensor(2, 3, 3, 5));
        let coarse = tape.constant(rng_tensor(2, 3, 3, 6));
        let zeros = tape.constant(Tensor::zeros(1, 1, 3, 3));
        let out = fuse(&mut tape, fine, coarse, zeros).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(fine).data());
        let ones = tape.constant(Tensor::filled(1, 1, 3, 3, 1.0));
        let out = fuse(&mut tape, fine, coarse, ones).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(coarse).data());
    }

    #[test]
    fn fuse_midpoint_blends() {
        let mut tape = Tape::<f32>::new();
        let fine = tape.constant(Tensor::filled(1, 1, 2, 2, 2.0));
        let coarse = tape.constant(Tensor::filled(1, 1, 2, 2, 4.0));
        let half = tape.constant(Tensor::filled(1, 1, 2, 2, 0.5));
        let out = fuse(&mut tape, fine, coarse, half).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| (v - 3.0).abs() < 1e-6));
    }

    #[test]
    fn fuse_rejects_out_of_range_mask() {
        let mut tape = Tape::<f32>::new();
        let fine = tape.constant(Tensor::zeros(1, 1, 2, 2));
        let coarse = tape.constant(Tensor::zeros(1, 1, 2, 2));
        let bad = tape.constant(Tensor::filled(1, 1, 2, 2, 1.5));
        assert!(matches!(
            fuse(&mut tape, fine, coarse, bad),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn fuse_bounds_and_idempotence() {
        let mut tape = Tape::<f32>::new();
        let fine = tape.constant(rng_tensor(2, 4, 4, 8));
        let coarse = tape.constant(rng_tensor(2, 4, 4, 9));
        let logits = tape.constant(rng_tensor(1, 4, 4, 10));
        let mask = tape.sigmoid(logits);
        let out = fuse(&mut tape, fine, coarse, mask).unwrap();
        let sh = tape.shape(out);
        for c in 0..sh.c {
            for y in 0..sh.h {
                for x in 0..sh.w {
                    let a = tape.value(fine).at(0, c, y, x);
                    let b = tape.value(coarse).at(0, c, y, x);
                    let v = tape.value(out).at(0, c, y, x);
                    assert!(v >= a.min(b) - 1e-6 && v <= a.max(b) + 1e-6);
                }
            }
        }
        // fuse(x, x, M) == x for any valid mask.
        let out = fuse(&mut tape, fine, fine, mask).unwrap();
        for (got, want) in tape.value(out).data().iter().zip(tape.value(fine).data()) {
            assert!((got - want).abs() < 1e-6);
        }
    }
}
