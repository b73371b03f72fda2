//! Loss, optimizer, schedule, augmentation and the training loop.
//!
//! Everything is seeded and single-threaded: a fixed seed reproduces the
//! loss trajectory bitwise.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{self, ModelConfig};
use crate::preprocess::{build_input, ExposureStack, ModelInput};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::weights::{Binder, Weights};

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Square patch side; the synthetic datasets are already patch-sized.
    pub patch: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Stop once the running mean training loss falls below this.
    pub loss_target: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            patch: 32,
            lr_max: 2e-4,
            lr_min: 1e-6,
            epochs: 250,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            seed: 1,
            loss_target: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_min >= self.lr_max {
            return Err(Error::config("lr_min must be below lr_max"));
        }
        if self.patch % 4 != 0 {
            return Err(Error::config("patch must be divisible by 4"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch_size and epochs must be positive"));
        }
        Ok(())
    }
}

/// Mean absolute difference of the mu-law tone-mapped images.
pub fn loss_tonemapped_l1<T: Scalar>(
    tape: &mut Tape<T>,
    pred: NodeId,
    gt: NodeId,
    mu: f64,
) -> Result<NodeId> {
    let tp = tape.tone_map(pred, mu)?;
    let tg = tape.tone_map(gt, mu)?;
    tape.l1_loss(tp, tg)
}

/// Decoupled-weight-decay Adam with bias-corrected moments.
pub struct AdamW<T: Scalar> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    first: IndexMap<String, Vec<T>>,
    second: IndexMap<String, Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            first: IndexMap::new(),
            second: IndexMap::new(),
        }
    }

    pub fn from_config(config: &TrainConfig) -> Self {
        Self::new(config.beta1, config.beta2, config.eps, config.weight_decay)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. Parameters without a gradient this step still
    /// receive weight decay.
    pub fn step(
        &mut self,
        weights: &mut Weights<T>,
        grads: &[(String, Tensor<T>)],
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (path, grad) in grads {
            let param = weights
                .get_mut(path)
                .ok_or_else(|| Error::Structure(format!("unknown parameter {path:?}")))?;
            if param.shape() != grad.shape() {
                return Err(Error::Structure(format!(
                    "gradient shape {} does not match parameter {path:?} {}",
                    grad.shape(),
                    param.shape()
                )));
            }
            let n = param.numel();
            let m = self
                .first
                .entry(path.clone())
                .or_insert_with(|| vec![T::zero(); n]);
            let v = self
                .second
                .entry(path.clone())
                .or_insert_with(|| vec![T::zero(); n]);
            let data = param.data_mut();
            for i in 0..n {
                let g = grad.data()[i].as_f64();
                let mi = self.beta1 * m[i].as_f64() + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v[i].as_f64() + (1.0 - self.beta2) * g * g;
                m[i] = T::of_f64(mi);
                v[i] = T::of_f64(vi);
                let update = (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                let w = data[i].as_f64();
                data[i] = T::of_f64(w - lr * self.weight_decay * w - lr * update);
            }
        }
        Ok(())
    }
}

/// Cosine annealing from lr_max (epoch 0) to lr_min (epoch == total).
pub fn cosine_lr(epoch: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    let phase = std::f64::consts::PI * epoch as f64 / total.max(1) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos())
}

fn flip_h(t: &Tensor<f32>) -> Tensor<f32> {
    let sh = t.shape();
    let mut out = Tensor::zeros(sh.b, sh.c, sh.h, sh.w);
    for b in 0..sh.b {
        for c in 0..sh.c {
            for y in 0..sh.h {
                for x in 0..sh.w {
                    out.set(b, c, y, x, t.at(b, c, y, sh.w - 1 - x));
                }
            }
        }
    }
    out
}

fn flip_v(t: &Tensor<f32>) -> Tensor<f32> {
    let sh = t.shape();
    let mut out = Tensor::zeros(sh.b, sh.c, sh.h, sh.w);
    for b in 0..sh.b {
        for c in 0..sh.c {
            for y in 0..sh.h {
                out.data_mut()[(b * sh.c + c) * sh.h * sh.w + y * sh.w..][..sh.w]
                    .copy_from_slice(&t.plane(b, c)[(sh.h - 1 - y) * sh.w..][..sh.w]);
            }
        }
    }
    out
}

/// Quarter-turn counterclockwise; requires square input.
fn rot90(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let sh = t.shape();
    if sh.h != sh.w {
        return Err(Error::shape("rotation requires square patches"));
    }
    let n = sh.h;
    let mut out = Tensor::zeros(sh.b, sh.c, n, n);
    for b in 0..sh.b {
        for c in 0..sh.c {
            for y in 0..n {
                for x in 0..n {
                    out.set(b, c, n - 1 - x, y, t.at(b, c, y, x));
                }
            }
        }
    }
    Ok(out)
}

/// One random geometric transform (flips plus quarter turns), applied
/// identically to all three LDRs and the ground truth. Seeded.
pub fn augment(
    stack: &ExposureStack<f32>,
    gt: &Tensor<f32>,
    seed: u64,
) -> Result<(ExposureStack<f32>, Tensor<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let do_h = rng.gen::<bool>();
    let do_v = rng.gen::<bool>();
    let quarter_turns = rng.gen_range(0..4u32);

    let apply = |t: &Tensor<f32>| -> Result<Tensor<f32>> {
        let mut out = t.clone();
        if do_h {
            out = flip_h(&out);
        }
        if do_v {
            out = flip_v(&out);
        }
        for _ in 0..quarter_turns {
            out = rot90(&out)?;
        }
        Ok(out)
    };

    let images = [
        apply(&stack.images[0])?,
        apply(&stack.images[1])?,
        apply(&stack.images[2])?,
    ];
    Ok((
        ExposureStack::new(images, stack.exposure_times)?,
        apply(gt)?,
    ))
}

/// In-memory training set.
pub struct Dataset {
    pub samples: Vec<(ExposureStack<f32>, Tensor<f32>)>,
}

impl Dataset {
    pub fn load(dir: &std::path::Path) -> Result<Self> {
        let dirs = crate::io::sample::list_samples(dir)?;
        if dirs.is_empty() {
            return Err(Error::Usage(format!(
                "no sample directories under {}",
                dir.display()
            )));
        }
        let samples = dirs
            .iter()
            .map(|d| crate::io::sample::read_sample(d))
            .collect::<Result<_>>()?;
        Ok(Dataset { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Stack single-sample tensors (1, C, H, W) into one batch (B, C, H, W).
pub fn stack_batch(items: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let sh = items[0].shape();
    let mut data = Vec::with_capacity(items.len() * items[0].numel());
    for t in items {
        if t.shape() != sh {
            return Err(Error::shape("stack_batch: mismatched sample shapes"));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(items.len() * sh.b, sh.c, sh.h, sh.w, data)
}

pub struct TrainOutcome {
    pub weights: Weights<f32>,
    /// Per-step batch losses.
    pub losses: Vec<f32>,
    pub steps: usize,
    pub final_lr: f64,
}

/// Train from scratch on a dataset. `on_step` sees (step index, batch
/// loss, current weights) after every update and can stop training by
/// returning false.
pub fn train(
    dataset: &Dataset,
    model_config: &ModelConfig,
    config: &TrainConfig,
    mut on_step: impl FnMut(usize, f32, &Weights<f32>) -> bool,
) -> Result<TrainOutcome> {
    config.validate()?;
    model_config.validate()?;
    let mut weights = model::init_weights(model_config, config.seed);
    let mut optimizer = AdamW::from_config(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7261696e);
    let mut losses = Vec::new();
    let mut final_lr = config.lr_max;
    let n = dataset.len();

    'outer: for epoch in 0..config.epochs {
        let lr = cosine_lr(epoch, config.epochs, config.lr_max, config.lr_min);
        final_lr = lr;
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for chunk in order.chunks(config.batch_size) {
            let mut stacks: [Vec<Tensor<f32>>; 3] = Default::default();
            let mut gts = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let (stack, gt) = &dataset.samples[idx];
                let (stack, gt) = augment(stack, gt, rng.gen::<u64>())?;
                let input = build_input(&stack, model_config.gamma)?;
                for (slot, tensor) in stacks.iter_mut().zip(input.stacks) {
                    slot.push(tensor);
                }
                gts.push(gt);
            }
            let input = ModelInput {
                stacks: [
                    stack_batch(&stacks[0])?,
                    stack_batch(&stacks[1])?,
                    stack_batch(&stacks[2])?,
                ],
            };
            let gt = stack_batch(&gts)?;

            let mut tape = Tape::new();
            let mut binder = Binder::new(&weights, true);
            let ids = model::bind_input(&mut tape, &input);
            let out = model::forward(&mut tape, &mut binder, ids, model_config, None)?;
            let gt_node = tape.constant(gt);
            let loss = loss_tonemapped_l1(&mut tape, out, gt_node, model_config.mu)?;
            tape.backward(loss)?;
            let batch_loss = tape.scalar_value(loss);

            let grads: Vec<(String, Tensor<f32>)> = binder
                .grad_map(&tape)
                .into_iter()
                .map(|(k, g)| (k, g.clone()))
                .collect();
            drop(tape);
            optimizer.step(&mut weights, &grads, lr)?;

            let step = losses.len();
            losses.push(batch_loss);
            if !on_step(step, batch_loss, &weights) {
                break 'outer;
            }
            if let Some(target) = config.loss_target {
                let window = losses.len().min(2 * (n / config.batch_size).max(1));
                let recent: f32 =
                    losses[losses.len() - window..].iter().sum::<f32>() / window as f32;
                if (recent as f64) < target {
                    break 'outer;
                }
            }
        }
    }
    Ok(TrainOutcome {
        steps: losses.len(),
        weights,
        losses,
        final_lr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::filled(1, 3, 2, 2, 0.0));
        let b = tape.constant(Tensor::filled(1, 3, 2, 2, 1.0));
        // Identical inputs give zero loss.
        let l = loss_tonemapped_l1(&mut tape, a, a, 5000.0).unwrap();
        assert_eq!(tape.scalar_value(l), 0.0);
        // Endpoints map to 0 and 1, so the mean absolute gap is 1.
        let l = loss_tonemapped_l1(&mut tape, a, b, 5000.0).unwrap();
        assert_eq!(tape.scalar_value(l), 1.0);
        // Symmetry.
        let lab = loss_tonemapped_l1(&mut tape, a, b, 5000.0).unwrap();
        let lba = loss_tonemapped_l1(&mut tape, b, a, 5000.0).unwrap();
        assert_eq!(tape.scalar_value(lab), tape.scalar_value(lba));
    }

    fn one_param(v: f32) -> Weights<f32> {
        let mut w = Weights::new();
        w.insert("p", Tensor::filled(1, 1, 1, 2, v)).unwrap();
        w
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_identity() {
        let mut w = one_param(0.7);
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0);
        let g = vec![("p".to_string(), Tensor::zeros(1, 1, 1, 2))];
        opt.step(&mut w, &g, 1e-2).unwrap();
        assert!(w.get("p").unwrap().data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn adamw_first_step_is_signed_lr() {
        // Closed-form first step: m_hat/sqrt(v_hat) = sign(g) for any g, so
        // delta w = -lr * g / (|g| + eps') with eps effect ~ 1e-8.
        for &g0 in &[0.5f32, -2.0, 1e-3] {
            let mut w = one_param(1.0);
            let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0);
            let g = vec![("p".to_string(), Tensor::filled(1, 1, 1, 2, g0))];
            let lr = 1e-3;
            opt.step(&mut w, &g, lr).unwrap();
            let delta = w.get("p").unwrap().data()[0] as f64 - 1.0;
            let oracle = -lr * g0.signum() as f64;
            assert!(
                (delta - oracle).abs() < lr * 1e-4,
                "g={g0}: delta {delta} vs {oracle}"
            );
        }
    }

    #[test]
    fn adamw_decay_only_scales_weights() {
        let mut w = one_param(2.0);
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.1);
        let g = vec![("p".to_string(), Tensor::zeros(1, 1, 1, 2))];
        let lr = 1e-2;
        opt.step(&mut w, &g, lr).unwrap();
        let want = 2.0 * (1.0 - lr * 0.1);
        for &v in w.get("p").unwrap().data() {
            assert!((v as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn adamw_descends_a_quadratic() {
        // L = w^2 / 2, gradient w; a few steps must reduce the loss.
        let mut w = one_param(1.0);
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0);
        let mut last = 0.5f64;
        for _ in 0..50 {
            let wv = w.get("p").unwrap().data()[0];
            let g = vec![("p".to_string(), Tensor::filled(1, 1, 1, 2, wv))];
            opt.step(&mut w, &g, 1e-2).unwrap();
            let now = (w.get("p").unwrap().data()[0] as f64).powi(2) / 2.0;
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 2e-4, 1e-6), 2e-4);
        let end = cosine_lr(100, 100, 2e-4, 1e-6);
        assert!((end - 1e-6).abs() < 1e-18);
        let mid = cosine_lr(50, 100, 2e-4, 1e-6);
        assert!((mid - (2e-4 + 1e-6) / 2.0).abs() < 1e-12);
    }

    fn toy_pair(seed: u64) -> (ExposureStack<f32>, Tensor<f32>) {
        let mut s = seed;
        let mut img = || {
            let data: Vec<f32> = (0..3 * 16)
                .map(|_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(99);
                    ((s >> 33) % 1000) as f32 / 1000.0
                })
                .collect();
            Tensor::from_vec(1, 3, 4, 4, data).unwrap()
        };
        let stack = ExposureStack::new([img(), img(), img()], [0.25, 1.0, 4.0]).unwrap();
        let gt = img();
        (stack, gt)
    }

    #[test]
    fn augment_identity_and_involutions() {
        let (stack, gt) = toy_pair(3);
        // Find a seed whose draw is the identity transform.
        let mut identity_seen = false;
        for seed in 0..64 {
            let (s2, g2) = augment(&stack, &gt, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (h, v, r) = (rng.gen::<bool>(), rng.gen::<bool>(), rng.gen_range(0..4u32));
            if !h && !v && r == 0 {
                identity_seen = true;
                assert_eq!(s2.images[0].data(), stack.images[0].data());
                assert_eq!(g2.data(), gt.data());
            }
        }
        assert!(identity_seen);

        // Double horizontal flip and four quarter turns are identities.
        let once = flip_h(&gt);
        assert_eq!(flip_h(&once).data(), gt.data());
        let mut r = gt.clone();
        for _ in 0..4 {
            r = rot90(&r).unwrap();
        }
        assert_eq!(r.data(), gt.data());
    }

    #[test]
    fn augment_applies_one_transform_to_all_images() {
        let (stack, gt) = toy_pair(9);
        let (s2, g2) = augment(&stack, &gt, 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (h, v, r) = (rng.gen::<bool>(), rng.gen::<bool>(), rng.gen_range(0..4u32));
        let apply = |t: &Tensor<f32>| {
            let mut out = t.clone();
            if h {
                out = flip_h(&out);
            }
            if v {
                out = flip_v(&out);
            }
            for _ in 0..r {
                out = rot90(&out).unwrap();
            }
            out
        };
        for i in 0..3 {
            assert_eq!(s2.images[i].data(), apply(&stack.images[i]).data());
        }
        assert_eq!(g2.data(), apply(&gt).data());
    }

    #[test]
    fn rotation_of_non_square_is_shape_error() {
        let t = Tensor::<f32>::zeros(1, 3, 2, 4);
        assert!(rot90(&t).is_err());
    }
}
