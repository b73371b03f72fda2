//! Full network assembly: encode, align coarse-to-fine, merge in the
//! wavelet domain, emit the HDR estimate.
//!
//! The two non-reference stacks are aligned to the middle exposure through
//! three scales; alignment weights are shared between the two branches the
//! same way the encoder is shared across stacks. The merged features pass
//! through cascaded group wavelet blocks whose concatenated outputs, fused
//! by two convolutions, form a residual on top of a 1x1 projection of the
//! reference features; a sigmoid bounds the output to (0, 1).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::encoder::{self, FeaturePyramid};
use crate::error::{Error, Result};
use crate::iam::{self, FusionMode};
use crate::preprocess::{ModelInput, DEFAULT_GAMMA, DEFAULT_MU, REFERENCE_INDEX};
use crate::sam::{self, SamplingMap};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Shape, Tensor};
use crate::wavelet::{self, CA_REDUCTION};
use crate::weights::{Binder, ParamSource, Weights};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    /// Feature width C.
    pub channels: usize,
    /// Candidate displacement fields per pixel, N.
    pub num_samples: usize,
    /// Group wavelet blocks in the merge network, G.
    pub num_groups: usize,
    /// Gamma for LDR linearization.
    pub gamma: f64,
    /// mu-law compression strength.
    pub mu: f64,
    /// Cross-scale fusion variant.
    pub fusion_mode: FusionMode,
    /// Align across three scales; off = finest scale only (ablation).
    pub multiscale: bool,
    /// Run the dense blocks in the wavelet domain; off = spatial (ablation).
    pub use_dwt: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 16,
            num_samples: 3,
            num_groups: 3,
            gamma: DEFAULT_GAMMA,
            mu: DEFAULT_MU,
            fusion_mode: FusionMode::Mask,
            multiscale: true,
            use_dwt: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples < 1 || self.num_samples > 10 {
            return Err(Error::config(format!(
                "num_samples must be in 1..=10, got {}",
                self.num_samples
            )));
        }
        if !(1..=3).contains(&self.num_groups) {
            return Err(Error::config(format!(
                "num_groups must be in 1..=3, got {}",
                self.num_groups
            )));
        }
        if self.channels == 0 || self.channels % CA_REDUCTION != 0 {
            return Err(Error::config(format!(
                "channels must be a positive multiple of {CA_REDUCTION}, got {}",
                self.channels
            )));
        }
        if self.gamma < 1.0 || self.mu <= 0.0 {
            return Err(Error::config("gamma must be >= 1 and mu positive"));
        }
        Ok(())
    }
}

/// How one parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Normal with std sqrt(2 / fan_in), fan-in over in_c * kh * kw.
    Kaiming,
    Zero,
}

/// Every parameter the forward pass will request under this configuration,
/// in a fixed order.
pub fn param_specs(config: &ModelConfig) -> Vec<(String, Shape, Init)> {
    let c = config.channels;
    let n2 = 2 * config.num_samples;
    let mut specs: Vec<(String, Shape, Init)> = Vec::new();
    let mut conv = |name: String, out_c: usize, in_c: usize, k: usize, init: Init| {
        specs.push((format!("{name}.w"), Shape::new(out_c, in_c, k, k), init));
        specs.push((format!("{name}.b"), Shape::new(1, out_c, 1, 1), Init::Zero));
    };

    conv("encoder.s1.conv1".into(), c, 6, 3, Init::Kaiming);
    conv("encoder.s1.conv2".into(), c, c, 3, Init::Kaiming);
    conv("encoder.down1".into(), c, c, 3, Init::Kaiming);
    conv("encoder.s2.conv1".into(), c, c, 3, Init::Kaiming);
    conv("encoder.s2.conv2".into(), c, c, 3, Init::Kaiming);
    conv("encoder.down2".into(), c, c, 3, Init::Kaiming);
    conv("encoder.s3.conv1".into(), c, c, 3, Init::Kaiming);
    conv("encoder.s3.conv2".into(), c, c, 3, Init::Kaiming);

    let scales: &[usize] = if config.multiscale { &[1, 2, 3] } else { &[1] };
    for &s in scales {
        conv(format!("sam.s{s}.gen.conv1"), c, 2 * c + n2, 3, Init::Kaiming);
        conv(format!("sam.s{s}.gen.conv2"), c, c, 3, Init::Kaiming);
        conv(format!("sam.s{s}.gen.conv3"), c, c, 3, Init::Kaiming);
        // Zero head: training starts from identity sampling.
        conv(format!("sam.s{s}.gen.conv4"), n2, c, 3, Init::Zero);
    }

    if config.multiscale {
        for s in [1, 2] {
            match config.fusion_mode {
                FusionMode::Mask => conv(format!("iam.s{s}.mask"), 1, 4 * c, 3, Init::Kaiming),
                FusionMode::Concat => conv(format!("iam.s{s}.proj"), c, 2 * c, 1, Init::Kaiming),
                FusionMode::Add => {}
            }
        }
    }

    conv("merge.compress".into(), c, 3 * c, 3, Init::Kaiming);

    let wc = if config.use_dwt { 4 * c } else { c };
    for g in 0..config.num_groups {
        for dw in 0..2 {
            let p = format!("wave.g{g}.dw{dw}");
            conv(format!("{p}.l1"), wc, wc, 3, Init::Kaiming);
            conv(format!("{p}.l2"), wc, 2 * wc, 3, Init::Kaiming);
            conv(format!("{p}.l3"), wc, 3 * wc, 3, Init::Kaiming);
            conv(format!("{p}.ca.fc1"), c / CA_REDUCTION, c, 1, Init::Kaiming);
            conv(format!("{p}.ca.fc2"), c, c / CA_REDUCTION, 1, Init::Kaiming);
        }
        conv(format!("wave.g{g}.fuse"), c, 2 * c, 3, Init::Kaiming);
    }

    conv("head.conv1".into(), c, config.num_groups * c, 3, Init::Kaiming);
    conv("head.conv2".into(), 3, c, 3, Init::Kaiming);
    conv("head.skip".into(), 3, c, 1, Init::Kaiming);
    specs
}

/// Deterministic weight initialization for a configuration.
pub fn init_weights(config: &ModelConfig, seed: u64) -> Weights<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Weights::new();
    for (path, shape, init) in param_specs(config) {
        let tensor = match init {
            Init::Zero => Tensor::zeros(shape.b, shape.c, shape.h, shape.w),
            Init::Kaiming => {
                let fan_in = (shape.c * shape.h * shape.w) as f64;
                let normal = Normal::new(0.0f64, (2.0 / fan_in).sqrt()).expect("positive std");
                let data = (0..shape.numel())
                    .map(|_| normal.sample(&mut rng) as f32)
                    .collect();
                Tensor::from_vec(shape.b, shape.c, shape.h, shape.w, data)
                    .expect("shape matches data")
            }
        };
        weights.insert(path, tensor).expect("specs have unique paths");
    }
    weights
}

/// Diagnostics of one sampling-aggregation site, for invariant checks.
pub struct SamSite {
    pub samples: Vec<NodeId>,
    pub weights: NodeId,
    pub aggregated: NodeId,
}

#[derive(Default)]
pub struct ModelTrace {
    pub sam_sites: Vec<SamSite>,
}

fn align_traced<T: Scalar>(
    tape: &mut Tape<T>,
    params: &mut impl ParamSource<T>,
    prefix: &str,
    f_nonref: NodeId,
    f_ref: NodeId,
    prior: &SamplingMap,
    trace: &mut Option<&mut ModelTrace>,
) -> Result<(NodeId, SamplingMap)> {
    let map = sam::generate_sampling_map(tape, params, prefix, f_nonref, f_ref, prior)?;
    let samples = sam::sample_features(tape, f_nonref, &map)?;
    let weights = sam::correspondence_weights(tape, &samples, f_ref)?;
    let aggregated = sam::aggregate(tape, &samples, weights)?;
    if let Some(t) = trace.as_deref_mut() {
        t.sam_sites.push(SamSite {
            samples,
            weights,
            aggregated,
        });
    }
    Ok((aggregated, map))
}

/// Align one non-reference pyramid to the reference, coarse to fine,
/// returning the finest-scale branch feature.
fn align_branch<T: Scalar>(
    tape: &mut Tape<T>,
    params: &mut impl ParamSource<T>,
    nonref: &FeaturePyramid,
    reference: &FeaturePyramid,
    config: &ModelConfig,
    trace: &mut Option<&mut ModelTrace>,
) -> Result<NodeId> {
    let n = config.num_samples;
    if !config.multiscale {
        let sh = tape.shape(nonref.levels[0]);
        let prior = sam::zero_map(tape, sh.b, n, sh.h, sh.w);
        let (aligned, _) = align_traced(
            tape,
            params,
            "sam.s1",
            nonref.levels[0],
            reference.levels[0],
            &prior,
            trace,
        )?;
        return Ok(aligned);
    }

    let sh3 = tape.shape(nonref.levels[2]);
    let prior3 = sam::zero_map(tape, sh3.b, n, sh3.h, sh3.w);
    let (a3, p3) = align_traced(
        tape,
        params,
        "sam.s3",
        nonref.levels[2],
        reference.levels[2],
        &prior3,
        trace,
    )?;

    let prior2 = sam::upscale_map(tape, &p3);
    let (a2, p2) = align_traced(
        tape,
        params,
        "sam.s2",
        nonref.levels[1],
        reference.levels[1],
        &prior2,
        trace,
    )?;
    let a3_up = tape.upsample_x2(a3);
    let fused2 = iam::fuse_scales(tape, params, "iam.s2", config.fusion_mode, a2, a3_up)?;

    let prior1 = sam::upscale_map(tape, &p2);
    let (a1, _) = align_traced(
        tape,
        params,
        "sam.s1",
        nonref.levels[0],
        reference.levels[0],
        &prior1,
        trace,
    )?;
    let f2_up = tape.upsample_x2(fused2);
    iam::fuse_scales(tape, params, "iam.s1", config.fusion_mode, a1, f2_up)
}

/// Full forward pass from three bound input stacks to the HDR estimate.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &mut impl ParamSource<T>,
    stacks: [NodeId; 3],
    config: &ModelConfig,
    mut trace: Option<&mut ModelTrace>,
) -> Result<NodeId> {
    config.validate()?;
    let sh = tape.shape(stacks[0]);
    for &s in &stacks {
        if tape.shape(s) != sh {
            return Err(Error::shape("forward: input stacks differ in shape"));
        }
    }
    if sh.c != 6 {
        return Err(Error::shape(format!(
            "forward: stacks must have 6 channels, got {}",
            sh.c
        )));
    }

    let pyramids: Vec<FeaturePyramid> = stacks
        .iter()
        .map(|&s| encoder::encode(tape, params, s))
        .collect::<Result<_>>()?;
    let reference = &pyramids[REFERENCE_INDEX];

    let branch_low = align_branch(tape, params, &pyramids[0], reference, config, &mut trace)?;
    let branch_high = align_branch(tape, params, &pyramids[2], reference, config, &mut trace)?;

    let cat = tape.concat_channels(&[branch_low, reference.levels[0], branch_high])?;
    let w = params.get(tape, "merge.compress.w")?;
    let b = params.get(tape, "merge.compress.b")?;
    let merged = tape.conv2d(cat, w, Some(b), crate::ops::conv::ConvCfg::same3(1))?;
    let mut g = tape.leaky_relu(merged);

    let mut group_outputs = Vec::with_capacity(config.num_groups);
    for k in 0..config.num_groups {
        g = wavelet::group_wavenet(tape, params, &format!("wave.g{k}"), g, config.use_dwt)?;
        group_outputs.push(g);
    }
    let cat = tape.concat_channels(&group_outputs)?;
    let w = params.get(tape, "head.conv1.w")?;
    let b = params.get(tape, "head.conv1.b")?;
    let fused = tape.conv2d(cat, w, Some(b), crate::ops::conv::ConvCfg::same3(1))?;
    let fused = tape.leaky_relu(fused);
    let w = params.get(tape, "head.conv2.w")?;
    let b = params.get(tape, "head.conv2.b")?;
    let residual = tape.conv2d(fused, w, Some(b), crate::ops::conv::ConvCfg::same3(1))?;

    let w = params.get(tape, "head.skip.w")?;
    let b = params.get(tape, "head.skip.b")?;
    let skip = tape.conv2d(reference.levels[0], w, Some(b), crate::ops::conv::ConvCfg::unit())?;

    let sum = tape.add(residual, skip)?;
    Ok(tape.sigmoid(sum))
}

/// Bind a batched model input as constant leaves.
pub fn bind_input<T: Scalar>(tape: &mut Tape<T>, input: &ModelInput<T>) -> [NodeId; 3] {
    [
        tape.constant(input.stacks[0].clone()),
        tape.constant(input.stacks[1].clone()),
        tape.constant(input.stacks[2].clone()),
    ]
}

/// Run the model on one input without gradient bookkeeping.
pub fn infer<T: Scalar>(
    weights: &Weights<T>,
    input: &ModelInput<T>,
    config: &ModelConfig,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let mut params = Binder::new(weights, false);
    let stacks = bind_input(&mut tape, input);
    let out = forward(&mut tape, &mut params, stacks, config, None)?;
    Ok(tape.value(out).clone())
}

// Weight-file metadata: configuration packed as one tensor entry so a saved
// model is self-describing. Layout: [version, C, N, G, fusion, multiscale,
// use_dwt, gamma, mu].
pub const META_PATH: &str = "meta.config";
const META_VERSION: f32 = 1.0;

pub fn attach_meta(weights: &mut Weights<f32>, config: &ModelConfig) -> Result<()> {
    let fusion = match config.fusion_mode {
        FusionMode::Mask => 0.0,
        FusionMode::Add => 1.0,
        FusionMode::Concat => 2.0,
    };
    let data = vec![
        META_VERSION,
        config.channels as f32,
        config.num_samples as f32,
        config.num_groups as f32,
        fusion,
        config.multiscale as u8 as f32,
        config.use_dwt as u8 as f32,
        config.gamma as f32,
        config.mu as f32,
    ];
    if weights.contains(META_PATH) {
        return Err(Error::Structure("weights already carry meta.config".into()));
    }
    weights.insert(META_PATH, Tensor::from_vec(1, 1, 1, 9, data)?)
}

pub fn config_from_meta(weights: &Weights<f32>) -> Option<ModelConfig> {
    let meta = weights.get(META_PATH)?;
    let d = meta.data();
    if d.len() != 9 || d[0] != META_VERSION {
        return None;
    }
    Some(ModelConfig {
        channels: d[1] as usize,
        num_samples: d[2] as usize,
        num_groups: d[3] as usize,
        fusion_mode: match d[4] as i32 {
            1 => FusionMode::Add,
            2 => FusionMode::Concat,
            _ => FusionMode::Mask,
        },
        multiscale: d[5] != 0.0,
        use_dwt: d[6] != 0.0,
        gamma: d[7] as f64,
        mu: d[8] as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{build_input, ExposureStack};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            channels: 4,
            num_samples: 2,
            num_groups: 1,
            ..ModelConfig::default()
        }
    }

    fn rng_image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut s = seed;
        let data = (0..3 * h * w)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f32 / (1u64 << 32) as f32) + 0.5
            })
            .collect();
        Tensor::from_vec(1, 3, h, w, data).unwrap()
    }

    fn tiny_input(h: usize, w: usize, seed: u64) -> ModelInput<f32> {
        let stack = ExposureStack::new(
            [
                rng_image(h, w, seed),
                rng_image(h, w, seed + 1),
                rng_image(h, w, seed + 2),
            ],
            [0.25, 1.0, 4.0],
        )
        .unwrap();
        build_input(&stack, 2.2).unwrap()
    }

    #[test]
    fn output_is_rgb_at_input_size_in_unit_range() {
        let config = tiny_config();
        let weights = init_weights(&config, 1);
        let out = infer(&weights, &tiny_input(8, 8, 5), &config).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 3, 8, 8));
        assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let config = tiny_config();
        let weights = init_weights(&config, 2);
        let input = tiny_input(8, 8, 9);
        let a = infer(&weights, &input, &config).unwrap();
        let b = infer(&weights, &input, &config).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn fusion_variants_are_drop_in() {
        let input = tiny_input(8, 8, 13);
        let base = tiny_config();
        let mut shapes = Vec::new();
        for mode in [FusionMode::Mask, FusionMode::Add, FusionMode::Concat] {
            let config = ModelConfig {
                fusion_mode: mode,
                ..base
            };
            let weights = init_weights(&config, 3);
            shapes.push(infer(&weights, &input, &config).unwrap().shape());
        }
        // Ablation variants swap in without changing the output contract.
        let no_ms = ModelConfig {
            multiscale: false,
            ..base
        };
        shapes.push(infer(&init_weights(&no_ms, 3), &input, &no_ms).unwrap().shape());
        let no_dwt = ModelConfig {
            use_dwt: false,
            ..base
        };
        shapes.push(infer(&init_weights(&no_dwt, 3), &input, &no_dwt).unwrap().shape());
        assert!(shapes.iter().all(|&s| s == shapes[0]));
    }

    #[test]
    fn static_scene_keeps_aggregates_in_sample_hull() {
        let config = tiny_config();
        let weights = init_weights(&config, 4);
        let input = tiny_input(8, 8, 21);
        // Identical stacks: a static scene.
        let input = ModelInput {
            stacks: [
                input.stacks[1].clone(),
                input.stacks[1].clone(),
                input.stacks[1].clone(),
            ],
        };
        let mut tape = Tape::new();
        let mut binder = Binder::new(&weights, false);
        let stacks = bind_input(&mut tape, &input);
        let mut trace = ModelTrace::default();
        forward(&mut tape, &mut binder, stacks, &config, Some(&mut trace)).unwrap();
        assert_eq!(trace.sam_sites.len(), 6);
        for site in &trace.sam_sites {
            let agg = tape.value(site.aggregated).clone();
            let sh = agg.shape();
            for c in 0..sh.c {
                for y in 0..sh.h {
                    for x in 0..sh.w {
                        let vals: Vec<f32> = site
                            .samples
                            .iter()
                            .map(|&s| tape.value(s).at(0, c, y, x))
                            .collect();
                        let lo = vals.iter().copied().fold(f32::INFINITY, f32::min);
                        let hi = vals.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                        let v = agg.at(0, c, y, x);
                        let eps = 1e-5 * (1.0 + hi.abs().max(lo.abs()));
                        assert!(v >= lo - eps && v <= hi + eps);
                    }
                }
            }
        }
    }

    #[test]
    fn parameter_count_scales_quadratically_with_width() {
        let c16 = ModelConfig::default();
        let c32 = ModelConfig {
            channels: 32,
            ..c16
        };
        let p16 = init_weights(&c16, 0).count_parameters() as f64;
        let p32 = init_weights(&c32, 0).count_parameters() as f64;
        let ratio = p32 / p16;
        assert!(ratio > 3.3 && ratio < 4.1, "ratio {ratio}");
    }

    #[test]
    fn missing_parameter_is_structural_error() {
        let config = tiny_config();
        let weights = Weights::<f32>::new();
        let err = infer(&weights, &tiny_input(8, 8, 2), &config).unwrap_err();
        assert!(matches!(err, Error::Structure(_)));
    }

    #[test]
    fn meta_round_trip() {
        let config = ModelConfig {
            channels: 8,
            num_samples: 4,
            num_groups: 2,
            fusion_mode: FusionMode::Concat,
            multiscale: false,
            use_dwt: false,
            ..ModelConfig::default()
        };
        let mut weights = init_weights(&config, 7);
        attach_meta(&mut weights, &config).unwrap();
        // gamma/mu pass through f32 storage.
        let want = ModelConfig {
            gamma: config.gamma as f32 as f64,
            mu: config.mu as f32 as f64,
            ..config
        };
        assert_eq!(config_from_meta(&weights), Some(want));
    }
}
