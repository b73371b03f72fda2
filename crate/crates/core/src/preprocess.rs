//! LDR linearization, model input assembly, and mu-law tone mapping.
//!
//! An exposure stack holds three LDR captures at strictly increasing
//! exposure times; the middle one is the reference the output stays aligned
//! with. Each capture is paired with its gamma-linearized version to form a
//! 6-channel input stack.

use crate::error::{Error, Result};
use crate::ops::elem;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_GAMMA: f64 = 2.2;
pub const DEFAULT_MU: f64 = 5000.0;

/// Index of the medium-exposure reference image inside a stack.
pub const REFERENCE_INDEX: usize = 1;

/// Three LDR captures of one scene, low/medium/high exposure.
#[derive(Clone, Debug)]
pub struct ExposureStack<T: Scalar> {
    pub images: [Tensor<T>; 3],
    pub exposure_times: [T; 3],
}

impl<T: Scalar> ExposureStack<T> {
    /// Validates geometry and exposure ordering; image values are clamped
    /// to [0, 1] to absorb 8-bit decode artifacts.
    pub fn new(images: [Tensor<T>; 3], exposure_times: [T; 3]) -> Result<Self> {
        let sh = images[0].shape();
        for img in &images {
            if img.shape() != sh {
                return Err(Error::shape("exposure stack images differ in dimensions"));
            }
            if img.shape().c != 3 {
                return Err(Error::shape("exposure stack images must have 3 channels"));
            }
        }
        if !(exposure_times[0] < exposure_times[1] && exposure_times[1] < exposure_times[2]) {
            return Err(Error::domain("exposure times must be strictly increasing"));
        }
        if exposure_times[0] <= T::zero() {
            return Err(Error::domain("exposure times must be positive"));
        }
        let clamp01 = |t: &Tensor<T>| t.map(|v| v.max(T::zero()).min(T::one()));
        Ok(ExposureStack {
            images: [
                clamp01(&images[0]),
                clamp01(&images[1]),
                clamp01(&images[2]),
            ],
            exposure_times,
        })
    }

    pub fn reference(&self) -> &Tensor<T> {
        &self.images[REFERENCE_INDEX]
    }
}

/// Exposure value to exposure time: t = 2^ev, reference ev = 0.
pub fn ev_to_time<T: Scalar>(ev: T) -> T {
    T::of_f64(ev.as_f64().exp2())
}

/// Gamma linearization I^gamma / t.
pub fn linearize<T: Scalar>(image: &Tensor<T>, t: T, gamma: f64) -> Result<Tensor<T>> {
    if t <= T::zero() {
        return Err(Error::domain("linearize: exposure time must be positive"));
    }
    if gamma < 1.0 {
        return Err(Error::domain("linearize: gamma must be >= 1"));
    }
    let g = T::of_f64(gamma);
    Ok(image.map(|v| v.powf(g) / t))
}

/// Inverse of [`linearize`]: (radiance * t)^(1/gamma), clipped to [0, 1].
pub fn delinearize<T: Scalar>(radiance: &Tensor<T>, t: T, gamma: f64) -> Tensor<T> {
    let inv_g = T::of_f64(1.0 / gamma);
    radiance.map(|v| (v * t).max(T::zero()).powf(inv_g).min(T::one()))
}

/// The three 6-channel stacks the model consumes: channels 0..3 are the raw
/// LDR, channels 3..6 its linearized version.
#[derive(Clone, Debug)]
pub struct ModelInput<T: Scalar> {
    pub stacks: [Tensor<T>; 3],
}

pub fn build_input<T: Scalar>(stack: &ExposureStack<T>, gamma: f64) -> Result<ModelInput<T>> {
    let mut stacks = Vec::with_capacity(3);
    for i in 0..3 {
        let linear = linearize(&stack.images[i], stack.exposure_times[i], gamma)?;
        stacks.push(elem::concat_channels_forward(&[&stack.images[i], &linear])?);
    }
    let mut it = stacks.into_iter();
    Ok(ModelInput {
        stacks: [
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
        ],
    })
}

/// mu-law range compression of a linear-domain image in [0, 1].
pub fn tone_map<T: Scalar>(image: &Tensor<T>, mu: f64) -> Result<Tensor<T>> {
    elem::tone_map_forward(image, mu)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(vals: &[f32]) -> Tensor<f32> {
        let n = vals.len() / 3;
        let mut data = Vec::with_capacity(vals.len());
        for c in 0..3 {
            for p in 0..n {
                data.push(vals[p * 3 + c]);
            }
        }
        Tensor::from_vec(1, 3, 1, n, data).unwrap()
    }

    #[test]
    fn linearize_fixed_points() {
        let one = Tensor::filled(1, 3, 1, 1, 1.0f64);
        let lin = linearize(&one, 1.0, 2.2).unwrap();
        assert_eq!(lin.data()[0], 1.0);
        let zero = Tensor::filled(1, 3, 1, 1, 0.0f64);
        let lin = linearize(&zero, 3.7, 2.2).unwrap();
        assert_eq!(lin.data()[0], 0.0);
        // Scalar oracle exp(2.2 ln 0.5).
        let half = Tensor::filled(1, 3, 1, 1, 0.5f64);
        let lin = linearize(&half, 1.0, 2.2).unwrap();
        let oracle = (2.2 * 0.5f64.ln()).exp();
        assert!((lin.data()[0] - oracle).abs() < 1e-12);
        assert!((oracle - 0.21764).abs() < 1e-5);
    }

    #[test]
    fn linearize_rejects_nonpositive_time() {
        let img = Tensor::filled(1, 3, 1, 1, 0.5f32);
        assert!(linearize(&img, 0.0, 2.2).is_err());
        assert!(linearize(&img, -1.0, 2.2).is_err());
    }

    #[test]
    fn round_trip_identity_within_1e5() {
        for i in 0..50 {
            let v = (i as f64 + 0.5) / 50.0;
            for t in [0.25f64, 1.0, 4.0] {
                if v * t > 1.0 {
                    continue;
                }
                let radiance = Tensor::filled(1, 3, 1, 1, v);
                let ldr = delinearize(&radiance, t, 2.2);
                let back = linearize(&ldr, t, 2.2).unwrap();
                assert!((back.data()[0] - v).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn build_input_shapes_and_raw_channels() {
        let imgs = [flat(&[0.1, 0.2, 0.3]), flat(&[0.4, 0.5, 0.6]), flat(&[0.7, 0.8, 0.9])];
        let stack = ExposureStack::new(imgs.clone(), [0.25, 1.0, 4.0]).unwrap();
        let input = build_input(&stack, 2.2).unwrap();
        for (x, raw) in input.stacks.iter().zip(&imgs) {
            assert_eq!(x.shape().c, 6);
            assert_eq!(x.shape().h, raw.shape().h);
            // Raw LDR channels pass through untouched.
            assert_eq!(&x.data()[..raw.numel()], raw.data());
        }
    }

    #[test]
    fn identical_images_and_unit_times_give_identical_stacks() {
        let img = flat(&[0.1, 0.5, 0.9]);
        // Times must strictly increase, so use per-image linearization
        // directly to express the t = (1,1,1) case.
        let a = linearize(&img, 1.0, 2.2).unwrap();
        let b = linearize(&img, 1.0, 2.2).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn equal_radiance_scene_agrees_across_exposures() {
        // LDRs generated from one radiance map by the inverse transform
        // linearize back to the same radiance.
        let radiance = Tensor::from_vec(
            1,
            3,
            1,
            2,
            vec![0.02f64, 0.11, 0.175, 0.21, 0.08, 0.24],
        )
        .unwrap();
        let times = [0.25f64, 1.0, 4.0];
        let ldrs: Vec<_> = times
            .iter()
            .map(|&t| delinearize(&radiance, t, 2.2))
            .collect();
        let stack = ExposureStack::new(
            [ldrs[0].clone(), ldrs[1].clone(), ldrs[2].clone()],
            times,
        )
        .unwrap();
        let input = build_input(&stack, 2.2).unwrap();
        for x in &input.stacks {
            for (lin, rad) in x.data()[radiance.numel()..].iter().zip(radiance.data()) {
                assert!((lin - rad).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn exposure_ordering_enforced() {
        let img = flat(&[0.5, 0.5, 0.5]);
        assert!(ExposureStack::new(
            [img.clone(), img.clone(), img.clone()],
            [1.0, 1.0, 4.0]
        )
        .is_err());
        assert!(ExposureStack::new(
            [img.clone(), img.clone(), img.clone()],
            [4.0, 1.0, 0.25]
        )
        .is_err());
    }

    #[test]
    fn tone_map_is_strictly_monotone() {
        let mut prev = -1.0f64;
        for i in 0..=100 {
            let v = i as f64 / 100.0;
            let t = tone_map(&Tensor::filled(1, 1, 1, 1, v), DEFAULT_MU).unwrap().data()[0];
            assert!(t > prev);
            prev = t;
        }
        assert_eq!(prev, 1.0);
    }
}
