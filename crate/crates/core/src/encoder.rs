//! Shared-weight three-scale feature extractor.
//!
//! Each scale applies two 3x3 convolutions; a stride-2 convolution moves to
//! the next scale. The same parameter paths serve all three input stacks, so
//! encoding more stacks adds no parameters.

use crate::error::{Error, Result};
use crate::ops::conv::ConvCfg;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::weights::ParamSource;

pub const NUM_SCALES: usize = 3;

/// Feature maps at full, half and quarter resolution, coarse last.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: [NodeId; NUM_SCALES],
}

fn conv_block<T: Scalar>(
    tape: &mut Tape<T>,
    params: &mut impl ParamSource<T>,
    prefix: &str,
    input: NodeId,
    cfg: ConvCfg,
) -> Result<NodeId> {
    let w = params.get(tape, &format!("{prefix}.w"))?;
    let b = params.get(tape, &format!("{prefix}.b"))?;
    let y = tape.conv2d(input, w, Some(b), cfg)?;
    Ok(tape.leaky_relu(y))
}

/// Encode one 6-channel stack into its feature pyramid.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    params: &mut impl ParamSource<T>,
    stack: NodeId,
) -> Result<FeaturePyramid> {
    let sh = tape.shape(stack);
    if sh.h % 4 != 0 || sh.w % 4 != 0 {
        return Err(Error::shape(format!(
            "encode: spatial dims {}x{} must be divisible by 4 (caller pads first)",
            sh.h, sh.w
        )));
    }
    let down_cfg = ConvCfg {
        stride: 2,
        dilation: 1,
        padding: 1,
    };

    let mut x = conv_block(tape, params, "encoder.s1.conv1", stack, ConvCfg::same3(1))?;
    x = conv_block(tape, params, "encoder.s1.conv2", x, ConvCfg::same3(1))?;
    let f1 = x;

    x = conv_block(tape, params, "encoder.down1", f1, down_cfg)?;
    x = conv_block(tape, params, "encoder.s2.conv1", x, ConvCfg::same3(1))?;
    x = conv_block(tape, params, "encoder.s2.conv2", x, ConvCfg::same3(1))?;
    let f2 = x;

    x = conv_block(tape, params, "encoder.down2", f2, down_cfg)?;
    x = conv_block(tape, params, "encoder.s3.conv1", x, ConvCfg::same3(1))?;
    x = conv_block(tape, params, "encoder.s3.conv2", x, ConvCfg::same3(1))?;
    let f3 = x;

    Ok(FeaturePyramid {
        levels: [f1, f2, f3],
    })
}
