//! Finite-difference verification of the reverse pass.
//!
//! The oracle never touches gradient code: it re-evaluates the forward
//! function at x +- h and forms the central difference in f64. Checks run on
//! the f64 instantiation of the kernels so the comparison measures the
//! backward formulas rather than float noise; production f32 runs the same
//! monomorphized source.
//!
//! Piecewise ops (leaky relu, max pool, bilinear cells, border clamps) kink
//! where their pieces meet. Check inputs and check weights are constructed
//! to keep evaluation points away from those kinks: alignment heads are
//! biased to half-pixel offsets and activation inputs bounded away from
//! zero. That constrains the test points, not the derivatives under test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{self, ModelConfig};
use crate::ops::conv::ConvCfg;
use crate::ops::elem::Activation;
use crate::ops::pool::{PoolCfg, PoolMode};
use crate::sam;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::wavelet;
use crate::weights::{LeafTable, Weights};

/// Central-difference step, on inputs of order one.
pub const FD_STEP: f64 = 1e-3;

/// Default per-op tolerance; the full-model check runs at 10x.
pub const DEFAULT_TOL: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub checked: usize,
    /// (input index, element index, reverse-mode value, finite-difference
    /// value) of the worst element.
    pub worst: (usize, usize, f64, f64),
}

impl CheckOutcome {
    pub fn pass(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {} (max rel err {:.3e}, tol {:.0e}, {} values, worst input {} elem {} ad={:.4e} fd={:.4e})",
            if self.pass() { "ok  " } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.tol,
            self.checked,
            self.worst.0,
            self.worst.1,
            self.worst.2,
            self.worst.3
        )
    }
}

/// Relative error with the denominator floored at 1e-3, so near-zero
/// gradient pairs compare absolutely.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Check the reverse-mode gradients of `build` w.r.t. every element of
/// every input against central finite differences.
pub fn finite_diff_check<F>(
    name: &str,
    mut inputs: Vec<Tensor<f64>>,
    tol: f64,
    build: F,
) -> Result<CheckOutcome>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let ad_grads: Vec<Vec<f64>> = ids
        .iter()
        .zip(&inputs)
        .map(|(&id, t)| match tape.grad(id) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; t.numel()],
        })
        .collect();
    drop(tape);

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.scalar_value(loss))
    };

    let mut max_rel = 0.0f64;
    let mut checked = 0;
    let mut worst = (0, 0, 0.0, 0.0);
    for ti in 0..inputs.len() {
        for ei in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[ei];
            inputs[ti].data_mut()[ei] = orig + FD_STEP;
            let plus = eval(&inputs)?;
            inputs[ti].data_mut()[ei] = orig - FD_STEP;
            let minus = eval(&inputs)?;
            inputs[ti].data_mut()[ei] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let rel = rel_err(ad_grads[ti][ei], fd);
            if rel > max_rel {
                max_rel = rel;
                worst = (ti, ei, ad_grads[ti][ei], fd);
            }
            checked += 1;
        }
    }
    Ok(CheckOutcome {
        name: name.to_string(),
        max_rel_err: max_rel,
        tol,
        checked,
        worst,
    })
}

fn uniform(
    rng: &mut ChaCha8Rng,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    lo: f64,
    hi: f64,
) -> Tensor<f64> {
    let data = (0..b * c * h * w).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(b, c, h, w, data).expect("length matches")
}

/// Push magnitudes away from zero: |v| >= margin, sign preserved.
fn away_from_zero(t: &Tensor<f64>, margin: f64) -> Tensor<f64> {
    t.map(|v| v.signum() * (margin + v.abs() * (1.0 - margin)))
}

fn snap_interior(v: f64) -> f64 {
    let f = v.fract();
    if f < 0.15 {
        v + (0.15 - f)
    } else if f > 0.85 {
        v - (f - 0.85)
    } else {
        v
    }
}

/// Offsets whose sample coordinates stay strictly interior and at least
/// 0.15 from any integer, clear of bilinear and border-clamp kinks.
fn safe_offsets(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize) -> Tensor<f64> {
    let mut out = Tensor::zeros(b, 2, h, w);
    for bi in 0..b {
        for m in 0..h {
            for n in 0..w {
                let tx = snap_interior(rng.gen_range(1.0..w as f64 - 2.0));
                let ty = snap_interior(rng.gen_range(1.0..h as f64 - 2.0));
                out.set(bi, 0, m, n, tx - n as f64);
                out.set(bi, 1, m, n, ty - m as f64);
            }
        }
    }
    out
}

/// Scalar loss from a tensor output via a fixed random projection whose
/// weights are bounded away from zero.
fn projection_for(rng: &mut ChaCha8Rng, shape: crate::tensor::Shape) -> Tensor<f64> {
    away_from_zero(
        &uniform(rng, shape.b, shape.c, shape.h, shape.w, -1.0, 1.0),
        0.3,
    )
}

/// Check weights: standard init, except alignment heads emit half-pixel
/// offsets and every bias sits off zero.
fn check_weights(config: &ModelConfig, seed: u64) -> Weights<f64> {
    let mut weights = model::init_weights(config, seed).cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let paths: Vec<String> = weights.iter().map(|(p, _)| p.to_string()).collect();
    for path in paths {
        let t = weights.get_mut(&path).expect("just listed");
        if path.contains(".gen.conv4.w") {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.01..0.01);
            }
        } else if path.contains(".gen.conv4.b") {
            for v in t.data_mut() {
                *v = 0.5;
            }
        } else if path.contains(".mask.w") {
            // Near-tied max-pool windows are unavoidable in smooth fields;
            // a small mask conv keeps any argmax flip's contribution within
            // the finite-difference budget while the path stays checked.
            for v in t.data_mut() {
                *v *= 0.02;
            }
        } else if path.ends_with(".b") {
            for v in t.data_mut() {
                *v = rng.gen_range(0.05..0.15);
            }
        }
    }
    weights
}

/// Margins the conditioning pass enforces at the check point: piecewise
/// activations at least KINK_MARGIN from zero, sampling coordinates at
/// least GRID_MARGIN from a bilinear kink, max-pool leaders ahead by at
/// least POOL_MARGIN. All are large against FD_STEP times the local
/// sensitivities, so no finite-difference window straddles a kink.
const KINK_MARGIN: f64 = 0.02;
const GRID_MARGIN: f64 = 0.05;
const POOL_MARGIN: f64 = 5e-3;

type TablePairs<'a> = Vec<(&'a String, NodeId)>;

fn build_once<'a, F>(
    weights: &Weights<f64>,
    paths: &'a [String],
    extra: &[Tensor<f64>],
    build: &F,
) -> Result<(Tape<f64>, TablePairs<'a>)>
where
    F: Fn(&mut Tape<f64>, &mut LeafTable, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let mut ids = Vec::new();
    for p in paths {
        ids.push(tape.leaf(weights.get(p).expect("listed path").clone(), false));
    }
    let param_count = ids.len();
    for t in extra {
        ids.push(tape.leaf(t.clone(), false));
    }
    let mut table = LeafTable::new(
        paths
            .iter()
            .cloned()
            .zip(ids[..param_count].iter().copied())
            .collect(),
    );
    build(&mut tape, &mut table, &ids[param_count..])?;
    let pairs = paths.iter().zip(ids[..param_count].iter().copied()).collect();
    Ok((tape, pairs))
}

/// Shift that moves every value in `zs` at least `margin` from zero,
/// preferring maximal clearance over a small grid of candidates.
fn best_shift(zs: &[f64], margin: f64) -> f64 {
    let mut best = (0.0f64, f64::NEG_INFINITY);
    let steps = 241;
    for i in 0..steps {
        let d = -0.6 + 1.2 * (i as f64) / (steps - 1) as f64;
        let clearance = zs.iter().map(|z| (z + d).abs()).fold(f64::INFINITY, f64::min);
        if clearance > best.1 {
            best = (d, clearance);
        }
        if clearance >= margin * 2.0 && d.abs() < best.0.abs() {
            best = (d, clearance);
        }
    }
    best.0
}

/// Shift per-channel conv biases until no piecewise-activation input sits
/// within KINK_MARGIN of zero. Returns the achieved clearance.
fn nudge_biases<F>(
    weights: &mut Weights<f64>,
    paths: &[String],
    extra: &[Tensor<f64>],
    build: &F,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &mut LeafTable, &[NodeId]) -> Result<NodeId>,
{
    let mut clearance = 0.0;
    for _round in 0..8 {
        let (tape, table_pairs) = build_once(weights, paths, extra, build)?;

        // Group activation inputs by the bias that can shift them; a bias
        // used at several sites (shared weights) collects all its values.
        let mut groups: Vec<(String, usize, Vec<f64>)> = Vec::new();
        let mut unshiftable = f64::INFINITY;
        for (pre, bias) in tape.kink_sites() {
            let vals = tape.value(pre);
            let sh = vals.shape();
            let path = bias.and_then(|bn| {
                table_pairs.iter().find(|(_, id)| *id == bn).map(|(p, _)| (*p).clone())
            });
            for c in 0..sh.c {
                let zs: Vec<f64> = (0..sh.b)
                    .flat_map(|b| vals.plane(b, c).iter().map(|v| v.as_f64()))
                    .collect();
                match &path {
                    Some(p) => {
                        match groups.iter_mut().find(|(gp, gc, _)| gp == p && *gc == c) {
                            Some((_, _, acc)) => acc.extend(zs),
                            None => groups.push((p.clone(), c, zs)),
                        }
                    }
                    None => {
                        let m = zs.iter().map(|z| z.abs()).fold(f64::INFINITY, f64::min);
                        unshiftable = unshiftable.min(m);
                    }
                }
            }
        }

        clearance = groups
            .iter()
            .flat_map(|(_, _, zs)| zs.iter().map(|z| z.abs()))
            .fold(unshiftable, f64::min);
        if clearance >= KINK_MARGIN {
            return Ok(clearance);
        }
        for (path, c, zs) in &groups {
            if zs.iter().all(|z| z.abs() >= KINK_MARGIN) {
                continue;
            }
            let delta = best_shift(zs, KINK_MARGIN);
            weights.get_mut(path).expect("path from table").data_mut()[*c] += delta;
        }
    }
    Ok(clearance)
}

/// Run a component whose parameters come from a weight map, with both the
/// listed parameters and the extra tensors bound as differentiable leaves.
/// The check point is conditioned first: biases are nudged clear of
/// activation kinks.
fn component_check<F>(
    name: &str,
    mut weights: Weights<f64>,
    paths: Vec<String>,
    extra: Vec<Tensor<f64>>,
    tol: f64,
    build: F,
) -> Result<CheckOutcome>
where
    F: Fn(&mut Tape<f64>, &mut LeafTable, &[NodeId]) -> Result<NodeId>,
{
    nudge_biases(&mut weights, &paths, &extra, &build)?;
    let mut inputs: Vec<Tensor<f64>> = paths
        .iter()
        .map(|p| weights.get(p).expect("listed path exists").clone())
        .collect();
    let param_count = inputs.len();
    inputs.extend(extra);
    let paths2 = paths.clone();
    finite_diff_check(name, inputs, tol, move |tape, ids| {
        let table = LeafTable::new(
            paths2
                .iter()
                .cloned()
                .zip(ids[..param_count].iter().copied())
                .collect(),
        );
        let mut table = table;
        build(tape, &mut table, &ids[param_count..])
    })
}

fn case_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(index.wrapping_mul(0x9E3779B97F4A7C15)))
}

/// The full gradient suite. Per-op and module checks run at `tol`; the
/// end-to-end model check runs at 10x `tol` for its longer float paths.
pub fn run_suite(seed: u64, tol: f64) -> Result<Vec<CheckOutcome>> {
    let mut results = Vec::new();
    let mut idx = 0u64;
    let mut next_rng = || {
        idx += 1;
        case_rng(seed, idx)
    };

    for (name, cfg, h, w) in [
        ("conv2d stride 1", ConvCfg::same3(1), 6, 6),
        (
            "conv2d stride 2",
            ConvCfg {
                stride: 2,
                dilation: 1,
                padding: 1,
            },
            7,
            7,
        ),
        ("conv2d dilation 2", ConvCfg::same3(2), 8, 8),
        ("conv2d dilation 3", ConvCfg::same3(3), 8, 8),
    ] {
        let mut rng = next_rng();
        let x = uniform(&mut rng, 1, 2, h, w, -1.0, 1.0);
        let k = uniform(&mut rng, 3, 2, 3, 3, -1.0, 1.0);
        let b = uniform(&mut rng, 1, 3, 1, 1, -0.5, 0.5);
        results.push(finite_diff_check(name, vec![x, k, b], tol, move |tape, ids| {
            let y = tape.conv2d(ids[0], ids[1], Some(ids[2]), cfg)?;
            Ok(tape.sum_all(y))
        })?);
    }

    {
        let mut rng = next_rng();
        let x = uniform(&mut rng, 1, 3, 6, 6, -1.0, 1.0);
        let off = safe_offsets(&mut rng, 1, 6, 6);
        let r = projection_for(&mut rng, x.shape());
        results.push(finite_diff_check(
            "grid_sample input+offsets",
            vec![x, off],
            tol,
            move |tape, ids| {
                let y = tape.grid_sample(ids[0], ids[1])?;
                let r = tape.constant(r.clone());
                let p = tape.mul(y, r)?;
                Ok(tape.sum_all(p))
            },
        )?);
    }

    {
        let mut rng = next_rng();
        let s = uniform(&mut rng, 1, 4, 5, 5, -2.0, 2.0);
        let r = projection_for(&mut rng, s.shape());
        results.push(finite_diff_check(
            "softmax_over_samples",
            vec![s],
            tol,
            move |tape, ids| {
                let w = tape.softmax_channels(ids[0]);
                let r = tape.constant(r.clone());
                let p = tape.mul(w, r)?;
                Ok(tape.sum_all(p))
            },
        )?);
    }

    for (name, cfg) in [
        (
            "pool avg 2x2",
            PoolCfg {
                mode: PoolMode::Avg,
                window: 2,
                stride: 2,
                padding: 0,
            },
        ),
        ("pool avg 3x3 same", PoolCfg::same3(PoolMode::Avg)),
        (
            "pool max 2x2",
            PoolCfg {
                mode: PoolMode::Max,
                window: 2,
                stride: 2,
                padding: 0,
            },
        ),
        ("pool max 3x3 same", PoolCfg::same3(PoolMode::Max)),
    ] {
        let mut rng = next_rng();
        let x = uniform(&mut rng, 1, 2, 6, 6, -1.0, 1.0);
        let mut osh = x.shape();
        if cfg.stride == 2 {
            osh.h /= 2;
            osh.w /= 2;
        }
        let r = projection_for(&mut rng, osh);
        results.push(finite_diff_check(name, vec![x], tol, move |tape, ids| {
            let y = tape.pool2d(ids[0], cfg)?;
            let r = tape.constant(r.clone());
            let p = tape.mul(y, r)?;
            Ok(tape.sum_all(p))
        })?);
    }

    {
        let mut rng = next_rng();
        let x = uniform(&mut rng, 1, 2, 4, 5, -1.0, 1.0);
        let mut osh = x.shape();
        osh.h *= 2;
        osh.w *= 2;
        let r = projection_for(&mut rng, osh);
        results.push(finite_diff_check(
            "upsample_bilinear_x2",
            vec![x],
            tol,
            move |tape, ids| {
                let y = tape.upsample_x2(ids[0]);
                let r = tape.constant(r.clone());
                let p = tape.mul(y, r)?;
                Ok(tape.sum_all(p))
            },
        )?);
    }

    for (name, kind, margin) in [
        ("activation leaky_relu", Activation::LeakyRelu, 0.05),
        ("activation relu", Activation::Relu, 0.05),
        ("activation sigmoid", Activation::Sigmoid, 0.0),
    ] {
        let mut rng = next_rng();
        let raw = uniform(&mut rng, 1, 2, 4, 4, -2.0, 2.0);
        let x = if margin > 0.0 {
            away_from_zero(&raw, margin)
        } else {
            raw
        };
        let r = projection_for(&mut rng, x.shape());
        results.push(finite_diff_check(name, vec![x], tol, move |tape, ids| {
            let y = tape.activation(ids[0], kind);
            let r = tape.constant(r.clone());
            let p = tape.mul(y, r)?;
            Ok(tape.sum_all(p))
        })?);
    }

    {
        let mut rng = next_rng();
        let a = uniform(&mut rng, 1, 2, 4, 4, -1.0, 1.0);
        let b = uniform(&mut rng, 1, 3, 4, 4, -1.0, 1.0);
        let r = projection_for(&mut rng, crate::tensor::Shape::new(1, 3, 4, 4));
        results.push(finite_diff_check(
            "concat_channels + slice",
            vec![a, b],
            tol,
            move |tape, ids| {
                let cat = tape.concat_channels(&[ids[0], ids[1]])?;
                let sl = tape.slice_channels(cat, 1, 3)?;
                let r = tape.constant(r.clone());
                let p = tape.mul(sl, r)?;
                Ok(tape.sum_all(p))
            },
        )?);
    }

    for (name, c, h, w) in [("dwt2d", 2, 6, 6), ("dwt2d odd extents", 1, 5, 7)] {
        let mut rng = next_rng();
        let x = uniform(&mut rng, 1, c, h, w, -1.0, 1.0);
        let osh = crate::tensor::Shape::new(1, 4 * c, h.div_ceil(2), w.div_ceil(2));
        let r = projection_for(&mut rng, osh);
        results.push(finite_diff_check(name, vec![x], tol, move |tape, ids| {
            let y = tape.dwt2d(ids[0]);
            let r = tape.constant(r.clone());
            let p = tape.mul(y, r)?;
            Ok(tape.sum_all(p))
        })?);
    }

    {
        let mut rng = next_rng();
        let sub = uniform(&mut rng, 1, 8, 3, 3, -1.0, 1.0);
        let r = projection_for(&mut rng, crate::tensor::Shape::new(1, 2, 6, 6));
        results.push(finite_diff_check("idwt2d", vec![sub], tol, move |tape, ids| {
            let y = tape.idwt2d(ids[0], (false, false))?;
            let r = tape.constant(r.clone());
            let p = tape.mul(y, r)?;
            Ok(tape.sum_all(p))
        })?);
    }

    {
        let mut rng = next_rng();
        let x = uniform(&mut rng, 1, 3, 4, 4, 0.05, 1.0);
        let r = projection_for(&mut rng, x.shape());
        results.push(finite_diff_check(
            "tone_map mu=5000",
            vec![x],
            tol,
            move |tape, ids| {
                let y = tape.tone_map(ids[0], 5000.0)?;
                let r = tape.constant(r.clone());
                let p = tape.mul(y, r)?;
                Ok(tape.sum_all(p))
            },
        )?);
    }

    {
        // Tone-mapped L1 with a comfortable gap between the operands.
        let mut rng = next_rng();
        let pred = uniform(&mut rng, 1, 3, 4, 4, 0.05, 0.85);
        let gt = pred.map(|v| (v + 0.12).min(0.97));
        results.push(finite_diff_check(
            "loss tonemapped l1",
            vec![pred, gt],
            tol,
            |tape, ids| {
                let tp = tape.tone_map(ids[0], 5000.0)?;
                let tg = tape.tone_map(ids[1], 5000.0)?;
                tape.l1_loss(tp, tg)
            },
        )?);
    }

    {
        let mut rng = next_rng();
        let fine = uniform(&mut rng, 1, 3, 4, 4, -1.0, 1.0);
        let coarse = uniform(&mut rng, 1, 3, 4, 4, -1.0, 1.0);
        let mask = uniform(&mut rng, 1, 1, 4, 4, 0.1, 0.9);
        let r = projection_for(&mut rng, fine.shape());
        results.push(finite_diff_check(
            "iam fuse blend",
            vec![fine, coarse, mask],
            tol,
            move |tape, ids| {
                let y = crate::iam::fuse(tape, ids[0], ids[1], ids[2])?;
                let r = tape.constant(r.clone());
                let p = tape.mul(y, r)?;
                Ok(tape.sum_all(p))
            },
        )?);
    }

    {
        // Composite from the op contract: conv -> leaky_relu -> pool -> sum.
        let mut rng = next_rng();
        let x = uniform(&mut rng, 1, 2, 6, 6, -1.0, 1.0);
        let k = uniform(&mut rng, 3, 2, 3, 3, -1.0, 1.0);
        let b = uniform(&mut rng, 1, 3, 1, 1, 0.2, 0.6);
        results.push(finite_diff_check(
            "composite conv-lrelu-pool-sum",
            vec![x, k, b],
            tol,
            |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], Some(ids[2]), ConvCfg::same3(1))?;
                let y = tape.leaky_relu(y);
                let y = tape.pool2d(
                    y,
                    PoolCfg {
                        mode: PoolMode::Avg,
                        window: 2,
                        stride: 2,
                        padding: 0,
                    },
                )?;
                Ok(tape.sum_all(y))
            },
        )?);
    }

    let tiny = ModelConfig {
        channels: 4,
        num_samples: 2,
        num_groups: 1,
        ..ModelConfig::default()
    };

    {
        let weights = check_weights(&tiny, seed ^ 0xca);
        let mut rng = next_rng();
        let x = uniform(&mut rng, 1, 4, 4, 4, -1.0, 1.0);
        let r = projection_for(&mut rng, x.shape());
        let paths: Vec<String> = ["fc1.w", "fc1.b", "fc2.w", "fc2.b"]
            .iter()
            .map(|s| format!("wave.g0.dw0.ca.{s}"))
            .collect();
        results.push(component_check(
            "channel_attention",
            weights,
            paths,
            vec![x],
            tol,
            move |tape, table, extra| {
                let y = wavelet::channel_attention(tape, table, "wave.g0.dw0.ca", extra[0])?;
                let r = tape.constant(r.clone());
                let p = tape.mul(y, r)?;
                Ok(tape.sum_all(p))
            },
        )?);
    }

    {
        // SAM end-to-end at one scale: generator weights, features, prior.
        let weights = check_weights(&tiny, seed ^ 0x5a);
        let mut rng = next_rng();
        let f_nonref = uniform(&mut rng, 1, 4, 6, 6, -1.0, 1.0);
        let f_ref = uniform(&mut rng, 1, 4, 6, 6, -1.0, 1.0);
        let prior = uniform(&mut rng, 1, 4, 6, 6, -0.2, 0.2);
        let r = projection_for(&mut rng, f_nonref.shape());
        let paths: Vec<String> = (1..=4)
            .flat_map(|l| {
                [
                    format!("sam.s1.gen.conv{l}.w"),
                    format!("sam.s1.gen.conv{l}.b"),
                ]
            })
            .collect();
        results.push(component_check(
            "sam align_scale",
            weights,
            paths,
            vec![f_nonref, f_ref, prior],
            tol,
            move |tape, table, extra| {
                let prior = sam::SamplingMap {
                    node: extra[2],
                    num_samples: 2,
                };
                let (aligned, _) =
                    sam::align_scale(tape, table, "sam.s1", extra[0], extra[1], &prior)?;
                let r = tape.constant(r.clone());
                let p = tape.mul(aligned, r)?;
                Ok(tape.sum_all(p))
            },
        )?);
    }

    {
        // Dense wavelet block end-to-end, weights and input together.
        let weights = check_weights(&tiny, seed ^ 0xd3);
        let mut rng = next_rng();
        let x = uniform(&mut rng, 1, 4, 6, 6, -1.0, 1.0);
        let r = projection_for(&mut rng, x.shape());
        let paths: Vec<String> = ["l1", "l2", "l3", "ca.fc1", "ca.fc2"]
            .iter()
            .flat_map(|l| {
                [
                    format!("wave.g0.dw0.{l}.w"),
                    format!("wave.g0.dw0.{l}.b"),
                ]
            })
            .collect();
        results.push(component_check(
            "d_wavenet block",
            weights,
            paths,
            vec![x],
            tol,
            move |tape, table, extra| {
                let y = wavelet::d_wavenet(tape, table, "wave.g0.dw0", extra[0], true)?;
                let r = tape.constant(r.clone());
                let p = tape.mul(y, r)?;
                Ok(tape.sum_all(p))
            },
        )?);
    }

    {
        // Full model at the tiny configuration, every parameter. The check
        // point additionally needs clear max-pool leaders and sampling
        // coordinates away from bilinear kinks; search input seeds for a
        // configuration where the margins hold after bias nudging.
        let paths: Vec<String> = check_weights(&tiny, seed ^ 0xf0)
            .iter()
            .map(|(p, _)| p.to_string())
            .collect();
        let tiny2 = tiny;
        let case_seed = {
            idx += 1;
            idx
        };
        let build_rng = move |attempt: u64| case_rng(seed, case_seed ^ (attempt << 32));
        let model_build = {
            let r_shape = crate::tensor::Shape::new(1, 3, 8, 8);
            move |rng: &mut ChaCha8Rng| {
                let stacks: Vec<Tensor<f64>> = (0..3)
                    .map(|_| uniform(rng, 1, 6, 8, 8, 0.0, 1.0))
                    .collect();
                let r = projection_for(rng, r_shape);
                (stacks, r)
            }
        };

        // Among candidate input seeds pick the one with the best margins:
        // activation clearance must reach KINK_MARGIN and coordinates must
        // respect GRID_MARGIN; of those, take the widest max-pool gap
        // (near-tied pool windows in smooth fields carry nearly equal
        // gradients on both elements, so small gaps cost little).
        let mut chosen: Option<(Weights<f64>, Vec<Tensor<f64>>, Tensor<f64>, f64)> = None;
        for attempt in 0..24u64 {
            let mut rng = build_rng(attempt);
            let (stacks, r) = model_build(&mut rng);
            let mut weights = check_weights(&tiny, (seed ^ 0xf0).wrapping_add(attempt));
            let r2 = r.clone();
            let build = move |tape: &mut Tape<f64>, table: &mut LeafTable, extra: &[NodeId]| {
                let out =
                    model::forward(tape, table, [extra[0], extra[1], extra[2]], &tiny2, None)?;
                let rc = tape.constant(r2.clone());
                let p = tape.mul(out, rc)?;
                Ok(tape.sum_all(p))
            };
            let clearance = nudge_biases(&mut weights, &paths, &stacks, &build)?;
            let (tape, _) = build_once(&weights, &paths, &stacks, &build)?;
            let pool_gap = tape.min_max_pool_gap();
            let grid_margin = tape.min_grid_margin();
            if clearance >= KINK_MARGIN && grid_margin > GRID_MARGIN {
                let better = chosen.as_ref().map_or(true, |(_, _, _, g)| pool_gap > *g);
                if better {
                    chosen = Some((weights, stacks, r, pool_gap));
                }
                if pool_gap > POOL_MARGIN {
                    break;
                }
            }
        }
        let (weights, stacks, r, _) =
            chosen.expect("a conditioned full-model check point exists within 24 attempts");
        results.push(component_check(
            "full model",
            weights,
            paths,
            stacks,
            tol * 10.0,
            move |tape, table, extra| {
                let out = model::forward(
                    tape,
                    table,
                    [extra[0], extra[1], extra[2]],
                    &tiny2,
                    None,
                )?;
                let rc = tape.constant(r.clone());
                let p = tape.mul(out, rc)?;
                Ok(tape.sum_all(p))
            },
        )?);
    }

    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_floors_denominator() {
        assert!(rel_err(0.0, 5e-7) < 1e-3);
        assert!(rel_err(1.0, 1.0005) < 1e-3);
        assert!(rel_err(1.0, 1.1) > 1e-2);
    }

    #[test]
    fn safe_offsets_avoid_integer_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let off = safe_offsets(&mut rng, 1, 6, 6);
        for m in 0..6 {
            for n in 0..6 {
                let x = n as f64 + off.at(0, 0, m, n);
                let y = m as f64 + off.at(0, 1, m, n);
                for v in [x, y] {
                    let d = (v - v.round()).abs();
                    assert!(d >= 0.1499, "coordinate {v} too close to integer");
                    assert!(v > 0.5 && v < 4.5);
                }
            }
        }
    }

    #[test]
    fn harness_confirms_a_known_gradient() {
        let x = Tensor::from_vec(1, 1, 1, 2, vec![0.7f64, -0.4]).unwrap();
        let out = finite_diff_check("square", vec![x], 1e-3, |tape, ids| {
            let y = tape.mul(ids[0], ids[0])?;
            Ok(tape.sum_all(y))
        })
        .unwrap();
        assert!(out.pass());
        assert_eq!(out.checked, 2);
        // Quadratics are exact under central differences.
        assert!(out.max_rel_err < 1e-9);
    }
}
