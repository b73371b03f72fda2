//! Haar wavelet decomposition and the dense wavelet blocks built on it.
//!
//! The standalone [`dwt2d`]/[`idwt2d`] pair works on plain tensors and
//! demands even extents. The network blocks route through the tape ops,
//! which mirror-pad odd extents themselves.

use crate::error::{Error, Result};
use crate::ops::conv::ConvCfg;
use crate::ops::dwt;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::weights::ParamSource;

/// Channel-attention bottleneck ratio.
pub const CA_REDUCTION: usize = 4;

/// The four half-resolution subbands of one decomposition level.
#[derive(Clone, Debug)]
pub struct WaveletSubbands<T: Scalar> {
    pub ll: Tensor<T>,
    pub lh: Tensor<T>,
    pub hl: Tensor<T>,
    pub hh: Tensor<T>,
}

impl<T: Scalar> WaveletSubbands<T> {
    fn from_packed(packed: &Tensor<T>) -> Self {
        let c = packed.shape().c / 4;
        let split = |block: usize| {
            crate::ops::elem::slice_channels_forward(packed, block * c, c)
                .expect("packed layout has 4C channels")
        };
        WaveletSubbands {
            ll: split(0),
            lh: split(1),
            hl: split(2),
            hh: split(3),
        }
    }

    fn to_packed(&self) -> Result<Tensor<T>> {
        for (name, band) in [("lh", &self.lh), ("hl", &self.hl), ("hh", &self.hh)] {
            if band.shape() != self.ll.shape() {
                return Err(Error::shape(format!(
                    "idwt2d: subband {name} has shape {}, expected {}",
                    band.shape(),
                    self.ll.shape()
                )));
            }
        }
        crate::ops::elem::concat_channels_forward(&[&self.ll, &self.lh, &self.hl, &self.hh])
    }
}

/// Orthonormal Haar analysis; input extents must be even.
pub fn dwt2d<T: Scalar>(input: &Tensor<T>) -> Result<WaveletSubbands<T>> {
    let sh = input.shape();
    if sh.h % 2 != 0 || sh.w % 2 != 0 {
        return Err(Error::shape(format!(
            "dwt2d: extents {}x{} must be even (caller pads)",
            sh.h, sh.w
        )));
    }
    let packed = dwt::dwt2d_packed_forward(input);
    Ok(WaveletSubbands::from_packed(&packed))
}

/// Exact synthesis inverse of [`dwt2d`].
pub fn idwt2d<T: Scalar>(subbands: &WaveletSubbands<T>) -> Result<Tensor<T>> {
    let packed = subbands.to_packed()?;
    dwt::idwt2d_packed_forward(&packed, (false, false))
}

/// Squeeze-and-excitation gate: global average pool, bottleneck to C/r,
/// expand back to C, sigmoid, scale the input per channel.
pub fn channel_attention<T: Scalar>(
    tape: &mut Tape<T>,
    params: &mut impl ParamSource<T>,
    prefix: &str,
    input: NodeId,
) -> Result<NodeId> {
    let c = tape.shape(input).c;
    if c % CA_REDUCTION != 0 {
        return Err(Error::config(format!(
            "channel_attention: {c} channels not divisible by reduction {CA_REDUCTION}"
        )));
    }
    let squeezed = tape.global_avg_pool(input);
    let w1 = params.get(tape, &format!("{prefix}.fc1.w"))?;
    let b1 = params.get(tape, &format!("{prefix}.fc1.b"))?;
    let mut g = tape.conv2d(squeezed, w1, Some(b1), ConvCfg::unit())?;
    g = tape.leaky_relu(g);
    let w2 = params.get(tape, &format!("{prefix}.fc2.w"))?;
    let b2 = params.get(tape, &format!("{prefix}.fc2.b"))?;
    g = tape.conv2d(g, w2, Some(b2), ConvCfg::unit())?;
    let gate = tape.sigmoid(g);
    tape.mul(input, gate)
}

/// Dense wavelet block: analyze, run three densely connected dilated
/// convolutions over the packed subbands, synthesize, gate by channel
/// attention, add the input back.
///
/// With `use_dwt` off the same dense stack runs in the spatial domain at C
/// channels, the ablation variant.
pub fn d_wavenet<T: Scalar>(
    tape: &mut Tape<T>,
    params: &mut impl ParamSource<T>,
    prefix: &str,
    input: NodeId,
    use_dwt: bool,
) -> Result<NodeId> {
    let in_shape = tape.shape(input);
    let stack_in = if use_dwt { tape.dwt2d(input) } else { input };

    fn dilated<T: Scalar, P: ParamSource<T>>(
        tape: &mut Tape<T>,
        params: &mut P,
        prefix: &str,
        layer: usize,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = params.get(tape, &format!("{prefix}.l{layer}.w"))?;
        let b = params.get(tape, &format!("{prefix}.l{layer}.b"))?;
        let y = tape.conv2d(x, w, Some(b), ConvCfg::same3(layer))?;
        Ok(tape.leaky_relu(y))
    }

    let l1 = dilated(tape, params, prefix, 1, stack_in)?;
    let cat2 = tape.concat_channels(&[stack_in, l1])?;
    let l2 = dilated(tape, params, prefix, 2, cat2)?;
    let cat3 = tape.concat_channels(&[stack_in, l1, l2])?;
    let l3 = dilated(tape, params, prefix, 3, cat3)?;

    let branch = if use_dwt {
        let crop = dwt::pad_flags(in_shape);
        tape.idwt2d(l3, crop)?
    } else {
        l3
    };
    let gated = channel_attention(tape, params, &format!("{prefix}.ca"), branch)?;
    tape.add(gated, input)
}

/// Two cascaded dense wavelet blocks; their output is concatenated with the
/// block input and fused by one convolution.
pub fn group_wavenet<T: Scalar>(
    tape: &mut Tape<T>,
    params: &mut impl ParamSource<T>,
    prefix: &str,
    input: NodeId,
    use_dwt: bool,
) -> Result<NodeId> {
    let d0 = d_wavenet(tape, params, &format!("{prefix}.dw0"), input, use_dwt)?;
    let d1 = d_wavenet(tape, params, &format!("{prefix}.dw1"), d0, use_dwt)?;
    let cat = tape.concat_channels(&[input, d1])?;
    let w = params.get(tape, &format!("{prefix}.fuse.w"))?;
    let b = params.get(tape, &format!("{prefix}.fuse.b"))?;
    let y = tape.conv2d(cat, w, Some(b), ConvCfg::same3(1))?;
    Ok(tape.leaky_relu(y))
}
