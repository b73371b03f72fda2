//! Sampling and aggregation: implicit per-scale alignment.
//!
//! A small generator network predicts N candidate displacement fields per
//! pixel. The non-reference features are bilinearly sampled at each
//! candidate, scored by channelwise dot product against the reference
//! features, and blended with softmax weights, so candidates that resemble
//! the reference dominate the aggregate.

use crate::error::Result;
use crate::ops::conv::ConvCfg;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::weights::ParamSource;

/// N displacement fields for one scale, packed as a (B, 2N, H, W) tensor.
/// Channels 2i and 2i+1 hold (dx, dy) of field i, in pixels of this scale.
#[derive(Clone, Copy, Debug)]
pub struct SamplingMap {
    pub node: NodeId,
    pub num_samples: usize,
}

impl SamplingMap {
    /// Displacement field i as a (B, 2, H, W) slice.
    pub fn field<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        i: usize,
    ) -> Result<NodeId> {
        tape.slice_channels(self.node, 2 * i, 2)
    }
}

/// All-zero map: identity sampling, used as the coarsest-scale prior.
pub fn zero_map<T: Scalar>(
    tape: &mut Tape<T>,
    b: usize,
    num_samples: usize,
    h: usize,
    w: usize,
) -> SamplingMap {
    let node = tape.constant(Tensor::zeros(b, 2 * num_samples, h, w));
    SamplingMap { node, num_samples }
}

/// Carry a map to the next finer scale: upsample x2 and double the
/// displacement values, which are expressed in pixels of their scale.
pub fn upscale_map<T: Scalar>(tape: &mut Tape<T>, map: &SamplingMap) -> SamplingMap {
    let up = tape.upsample_x2(map.node);
    let node = tape.scale(up, 2.0);
    SamplingMap {
        node,
        num_samples: map.num_samples,
    }
}

/// Predict the sampling map from non-reference/reference features and the
/// coarser-scale prior (already upscaled).
pub fn generate_sampling_map<T: Scalar>(
    tape: &mut Tape<T>,
    params: &mut impl ParamSource<T>,
    prefix: &str,
    f_nonref: NodeId,
    f_ref: NodeId,
    prior: &SamplingMap,
) -> Result<SamplingMap> {
    let num_samples = prior.num_samples;
    let mut x = tape.concat_channels(&[f_nonref, f_ref, prior.node])?;
    for layer in 1..=4 {
        let w = params.get(tape, &format!("{prefix}.gen.conv{layer}.w"))?;
        let b = params.get(tape, &format!("{prefix}.gen.conv{layer}.b"))?;
        x = tape.conv2d(x, w, Some(b), ConvCfg::same3(1))?;
        if layer < 4 {
            x = tape.leaky_relu(x);
        }
    }
    Ok(SamplingMap {
        node: x,
        num_samples,
    })
}

/// Bilinearly sample the non-reference features at every candidate field.
pub fn sample_features<T: Scalar>(
    tape: &mut Tape<T>,
    f_nonref: NodeId,
    map: &SamplingMap,
) -> Result<Vec<NodeId>> {
    (0..map.num_samples)
        .map(|i| {
            let offsets = map.field(tape, i)?;
            tape.grid_sample(f_nonref, offsets)
        })
        .collect()
}

/// Per-pixel softmax over the channelwise dot products with the reference.
/// Returns the (B, N, H, W) weight tensor.
pub fn correspondence_weights<T: Scalar>(
    tape: &mut Tape<T>,
    samples: &[NodeId],
    f_ref: NodeId,
) -> Result<NodeId> {
    let scores: Vec<NodeId> = samples
        .iter()
        .map(|&s| {
            let prod = tape.mul(s, f_ref)?;
            Ok(tape.sum_channels(prod))
        })
        .collect::<Result<_>>()?;
    let packed = tape.concat_channels(&scores)?;
    Ok(tape.softmax_channels(packed))
}

/// Convex combination of the samples under the per-pixel weights.
pub fn aggregate<T: Scalar>(
    tape: &mut Tape<T>,
    samples: &[NodeId],
    weights: NodeId,
) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    for (i, &s) in samples.iter().enumerate() {
        let wi = tape.slice_channels(weights, i, 1)?;
        let term = tape.mul(s, wi)?;
        acc = Some(match acc {
            Some(prev) => tape.add(prev, term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one sample"))
}

/// Full per-scale alignment; also returns the map for the next finer scale.
pub fn align_scale<T: Scalar>(
    tape: &mut Tape<T>,
    params: &mut impl ParamSource<T>,
    prefix: &str,
    f_nonref: NodeId,
    f_ref: NodeId,
    prior: &SamplingMap,
) -> Result<(NodeId, SamplingMap)> {
    let map = generate_sampling_map(tape, params, prefix, f_nonref, f_ref, prior)?;
    let samples = sample_features(tape, f_nonref, &map)?;
    let weights = correspondence_weights(tape, &samples, f_ref)?;
    let aligned = aggregate(tape, &samples, weights)?;
    Ok((aligned, map))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng_tensor(b: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut s = seed;
        let data = (0..b * c * h * w)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (((s >> 33) as f32 / (1u64 << 31) as f32) - 1.0) as f32
            })
            .collect();
        Tensor::from_vec(b, c, h, w, data).unwrap()
    }

    #[test]
    fn zero_map_samples_reproduce_input() {
        let mut tape = Tape::<f32>::new();
        let f = tape.constant(rng_tensor(1, 4, 6, 6, 3));
        let map = zero_map(&mut tape, 1, 3, 6, 6);
        let samples = sample_features(&mut tape, f, &map).unwrap();
        for s in samples {
            assert_eq!(tape.value(s).data(), tape.value(f).data());
        }
    }

    #[test]
    fn constructed_shift_is_undone_by_opposite_map() {
        // f shifted right by 2 sampled with dx = -2 equals the original
        // away from the border.
        let orig = rng_tensor(1, 2, 5, 8, 7);
        let mut shifted = Tensor::zeros(1, 2, 5, 8);
        for c in 0..2 {
            for y in 0..5 {
                for x in 0..8 {
                    let sx = x as isize - 2;
                    let v = if sx >= 0 {
                        orig.at(0, c, y, sx as usize)
                    } else {
                        orig.at(0, c, y, 0)
                    };
                    shifted.set(0, c, y, x, v);
                }
            }
        }
        let mut tape = Tape::<f32>::new();
        let f = tape.constant(shifted);
        let mut off = Tensor::zeros(1, 2, 5, 8);
        off.data_mut()[..5 * 8].iter_mut().for_each(|v| *v = 2.0);
        let map = SamplingMap {
            node: tape.constant(off),
            num_samples: 1,
        };
        let samples = sample_features(&mut tape, f, &map).unwrap();
        let got = tape.value(samples[0]);
        for c in 0..2 {
            for y in 0..5 {
                for x in 0..6 {
                    assert_eq!(got.at(0, c, y, x), orig.at(0, c, y, x));
                }
            }
        }
    }

    #[test]
    fn identical_samples_weigh_uniformly() {
        let mut tape = Tape::<f32>::new();
        let f = tape.constant(rng_tensor(1, 4, 4, 4, 11));
        let samples = vec![f, f, f];
        let w = correspondence_weights(&mut tape, &samples, f).unwrap();
        for &v in tape.value(w).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn matched_sample_gets_softmax_of_log4() {
        // |f_ref|^2 = ln 4 per pixel, sample A = f_ref, sample B orthogonal:
        // scores (ln 4, 0) give weights (0.8, 0.2) by the scalar softmax.
        let v = (4.0f32.ln()).sqrt();
        let mut tape = Tape::<f32>::new();
        let f_ref = tape.constant(Tensor::filled(1, 1, 3, 3, v));
        let zero = tape.constant(Tensor::zeros(1, 1, 3, 3));
        let w = correspondence_weights(&mut tape, &[f_ref, zero], f_ref).unwrap();
        let data = tape.value(w).data();
        let hw = 9;
        for p in 0..hw {
            assert!((data[p] - 0.8).abs() < 1e-5);
            assert!((data[hw + p] - 0.2).abs() < 1e-5);
        }
    }

    #[test]
    fn one_hot_weights_select_that_sample() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(rng_tensor(1, 2, 3, 3, 1));
        let b = tape.constant(rng_tensor(1, 2, 3, 3, 2));
        let mut w = Tensor::zeros(1, 2, 3, 3);
        w.data_mut()[9..18].iter_mut().for_each(|v| *v = 1.0);
        let w = tape.constant(w);
        let out = aggregate(&mut tape, &[a, b], w).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(b).data());
    }

    #[test]
    fn single_sample_aggregation_is_identity() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(rng_tensor(1, 3, 4, 4, 5));
        let w = tape.constant(Tensor::filled(1, 1, 4, 4, 1.0));
        let out = aggregate(&mut tape, &[a], w).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(a).data());
    }

    #[test]
    fn aggregate_stays_in_convex_hull() {
        let mut tape = Tape::<f32>::new();
        let samples: Vec<NodeId> = (0..3)
            .map(|i| tape.constant(rng_tensor(1, 3, 5, 5, 20 + i)))
            .collect();
        let scores = tape.constant(rng_tensor(1, 3, 5, 5, 30));
        let w = tape.softmax_channels(scores);
        let out = aggregate(&mut tape, &samples, w).unwrap();
        let sh = tape.shape(out);
        for c in 0..sh.c {
            for y in 0..sh.h {
                for x in 0..sh.w {
                    let vals: Vec<f32> = samples
                        .iter()
                        .map(|&s| tape.value(s).at(0, c, y, x))
                        .collect();
                    let lo = vals.iter().copied().fold(f32::INFINITY, f32::min);
                    let hi = vals.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let v = tape.value(out).at(0, c, y, x);
                    let eps = 1e-6 * (1.0 + hi.abs().max(lo.abs()));
                    assert!(v >= lo - eps && v <= hi + eps);
                }
            }
        }
    }
}
