//! Reverse-mode differentiation over a linear op tape.
//!
//! Forward ops append nodes holding their output value and the ids of their
//! inputs; [`Tape::backward`] replays the tape in exact reverse execution
//! order and accumulates (sums) gradients into every node that requires
//! them, so a parameter used several times collects all of its
//! contributions. One tape is one forward/backward episode; weights live
//! outside and are bound in as leaves per episode.

use crate::error::{Error, Result};
use crate::ops::conv::{self, ConvCfg};
use crate::ops::dwt;
use crate::ops::elem::{self, Activation};
use crate::ops::grid;
use crate::ops::pool::{self, PoolCfg};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        cfg: ConvCfg,
    },
    GridSample {
        input: NodeId,
        offsets: NodeId,
    },
    Pool {
        input: NodeId,
        cfg: PoolCfg,
    },
    GlobalAvgPool {
        input: NodeId,
    },
    UpsampleX2 {
        input: NodeId,
    },
    Activation {
        input: NodeId,
        kind: Activation,
    },
    Concat {
        inputs: Vec<NodeId>,
    },
    SliceChannels {
        input: NodeId,
        start: usize,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Affine {
        input: NodeId,
        mul: f64,
    },
    SoftmaxChannels {
        input: NodeId,
    },
    SumChannels {
        input: NodeId,
    },
    Dwt2d {
        input: NodeId,
    },
    Idwt2d {
        input: NodeId,
        crop: (bool, bool),
    },
    ToneMap {
        input: NodeId,
        mu: f64,
    },
    L1Loss {
        a: NodeId,
        b: NodeId,
    },
    SumAll {
        input: NodeId,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    /// Value of a scalar node.
    pub fn scalar_value(&self, id: NodeId) -> T {
        self.nodes[id.0].value.data()[0]
    }

    /// Gradient accumulated by the last backward pass, if any.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        cfg: ConvCfg,
    ) -> Result<NodeId> {
        self.value(input).ensure_finite("conv2d input")?;
        self.value(kernel).ensure_finite("conv2d kernel")?;
        if let Some(b) = bias {
            self.value(b).ensure_finite("conv2d bias")?;
        }
        let out = conv::conv2d_forward(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            &cfg,
        )?;
        let rg = self.requires(input)
            || self.requires(kernel)
            || bias.is_some_and(|b| self.requires(b));
        Ok(self.push(
            out,
            rg,
            Op::Conv2d {
                input,
                kernel,
                bias,
                cfg,
            },
        ))
    }

    pub fn grid_sample(&mut self, input: NodeId, offsets: NodeId) -> Result<NodeId> {
        let out = grid::grid_sample_forward(self.value(input), self.value(offsets))?;
        let rg = self.requires(input) || self.requires(offsets);
        Ok(self.push(out, rg, Op::GridSample { input, offsets }))
    }

    pub fn pool2d(&mut self, input: NodeId, cfg: PoolCfg) -> Result<NodeId> {
        let out = pool::pool2d_forward(self.value(input), &cfg)?;
        let rg = self.requires(input);
        Ok(self.push(out, rg, Op::Pool { input, cfg }))
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> NodeId {
        let out = pool::global_avg_pool_forward(self.value(input));
        let rg = self.requires(input);
        self.push(out, rg, Op::GlobalAvgPool { input })
    }

    pub fn upsample_x2(&mut self, input: NodeId) -> NodeId {
        let out = grid::upsample_x2_forward(self.value(input));
        let rg = self.requires(input);
        self.push(out, rg, Op::UpsampleX2 { input })
    }

    pub fn activation(&mut self, input: NodeId, kind: Activation) -> NodeId {
        let out = elem::activation_forward(self.value(input), kind);
        let rg = self.requires(input);
        self.push(out, rg, Op::Activation { input, kind })
    }

    pub fn leaky_relu(&mut self, input: NodeId) -> NodeId {
        self.activation(input, Activation::LeakyRelu)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor<T>> = inputs.iter().map(|&i| self.value(i)).collect();
        let out = elem::concat_channels_forward(&tensors)?;
        let rg = inputs.iter().any(|&i| self.requires(i));
        Ok(self.push(
            out,
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        ))
    }

    pub fn slice_channels(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let out = elem::slice_channels_forward(self.value(input), start, len)?;
        let rg = self.requires(input);
        Ok(self.push(out, rg, Op::SliceChannels { input, start }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = elem::add_forward(self.value(a), self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, rg, Op::Add { a, b }))
    }

    /// Elementwise product; the right operand may broadcast over channels
    /// (B, 1, H, W) or pixels (B, C, 1, 1).
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = elem::mul_forward(self.value(a), self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, rg, Op::Mul { a, b }))
    }

    pub fn affine(&mut self, input: NodeId, mul: f64, add: f64) -> NodeId {
        let out = elem::affine_forward(self.value(input), mul, add);
        let rg = self.requires(input);
        self.push(out, rg, Op::Affine { input, mul })
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        self.affine(input, factor, 0.0)
    }

    pub fn softmax_channels(&mut self, input: NodeId) -> NodeId {
        let out = elem::softmax_channels_forward(self.value(input));
        let rg = self.requires(input);
        self.push(out, rg, Op::SoftmaxChannels { input })
    }

    pub fn sum_channels(&mut self, input: NodeId) -> NodeId {
        let out = elem::sum_channels_forward(self.value(input));
        let rg = self.requires(input);
        self.push(out, rg, Op::SumChannels { input })
    }

    /// Haar analysis to packed [LL | LH | HL | HH] subbands.
    pub fn dwt2d(&mut self, input: NodeId) -> NodeId {
        let out = dwt::dwt2d_packed_forward(self.value(input));
        let rg = self.requires(input);
        self.push(out, rg, Op::Dwt2d { input })
    }

    /// Haar synthesis from packed subbands, cropping padded extents.
    pub fn idwt2d(&mut self, input: NodeId, crop: (bool, bool)) -> Result<NodeId> {
        let out = dwt::idwt2d_packed_forward(self.value(input), crop)?;
        let rg = self.requires(input);
        Ok(self.push(out, rg, Op::Idwt2d { input, crop }))
    }

    pub fn tone_map(&mut self, input: NodeId, mu: f64) -> Result<NodeId> {
        let out = elem::tone_map_forward(self.value(input), mu)?;
        let rg = self.requires(input);
        Ok(self.push(out, rg, Op::ToneMap { input, mu }))
    }

    pub fn l1_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = elem::l1_loss_forward(self.value(a), self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, rg, Op::L1Loss { a, b }))
    }

    pub fn sum_all(&mut self, input: NodeId) -> NodeId {
        let out = elem::sum_all_forward(self.value(input));
        let rg = self.requires(input);
        self.push(out, rg, Op::SumAll { input })
    }

    /// Inputs of piecewise-linear activations on this tape, paired with the
    /// bias leaf when the input came straight from a biased convolution.
    /// The gradient checker uses this to keep check points away from kinks.
    pub fn kink_sites(&self) -> Vec<(NodeId, Option<NodeId>)> {
        let mut sites = Vec::new();
        for node in &self.nodes {
            if let Op::Activation {
                input,
                kind: Activation::LeakyRelu | Activation::Relu,
            } = node.op
            {
                let bias = match self.nodes[input.0].op {
                    Op::Conv2d { bias, .. } => bias,
                    _ => None,
                };
                sites.push((input, bias));
            }
        }
        sites
    }

    /// Smallest top-two gap over all max-pool windows on this tape;
    /// infinity when no max pooling was recorded.
    pub fn min_max_pool_gap(&self) -> f64 {
        let mut min_gap = f64::INFINITY;
        for node in &self.nodes {
            if let Op::Pool { input, cfg } = node.op {
                if cfg.mode == pool::PoolMode::Max {
                    min_gap = min_gap.min(pool::min_top_two_gap(&self.nodes[input.0].value, &cfg));
                }
            }
        }
        min_gap
    }

    /// Smallest bilinear-kink margin over all grid-sample sites on this
    /// tape; infinity when none were recorded.
    pub fn min_grid_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            if let Op::GridSample { input, offsets } = node.op {
                margin = margin.min(grid::min_coord_margin(
                    &self.nodes[input.0].value,
                    &self.nodes[offsets.0].value,
                ));
            }
        }
        margin
    }

    fn accumulate(&mut self, id: NodeId, delta: Tensor<T>) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (dst, src) in g.data_mut().iter_mut().zip(delta.data()) {
                    *dst += *src;
                }
            }
            None => node.grad = Some(delta),
        }
    }

    /// Reverse pass from a scalar loss node. Gradients of earlier backward
    /// calls on the same tape are cleared first.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward: loss must be scalar, got shape {}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            // Interior gradients are consumed exactly once in the reverse
            // sweep, so they move out instead of cloning; leaves keep
            // theirs for the caller.
            let grad_out = self.nodes[i].grad.take().expect("checked above");
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    cfg,
                } => {
                    let grads = conv::conv2d_backward(
                        self.value(input),
                        self.value(kernel),
                        bias.is_some(),
                        &cfg,
                        &grad_out,
                    );
                    self.accumulate(input, grads.input);
                    self.accumulate(kernel, grads.kernel);
                    if let (Some(b), Some(gb)) = (bias, grads.bias) {
                        self.accumulate(b, gb);
                    }
                }
                Op::GridSample { input, offsets } => {
                    let (gi, go) = grid::grid_sample_backward(
                        self.value(input),
                        self.value(offsets),
                        &grad_out,
                    );
                    self.accumulate(input, gi);
                    self.accumulate(offsets, go);
                }
                Op::Pool { input, cfg } => {
                    let gi = pool::pool2d_backward(self.value(input), &cfg, &grad_out);
                    self.accumulate(input, gi);
                }
                Op::GlobalAvgPool { input } => {
                    let gi = pool::global_avg_pool_backward(self.shape(input), &grad_out);
                    self.accumulate(input, gi);
                }
                Op::UpsampleX2 { input } => {
                    let gi = grid::upsample_x2_backward(self.shape(input), &grad_out);
                    self.accumulate(input, gi);
                }
                Op::Activation { input, kind } => {
                    let gi = elem::activation_backward(
                        self.value(input),
                        &self.nodes[i].value,
                        kind,
                        &grad_out,
                    );
                    self.accumulate(input, gi);
                }
                Op::Concat { inputs } => {
                    let shapes: Vec<Shape> = inputs.iter().map(|&n| self.shape(n)).collect();
                    let grads = elem::concat_channels_backward(&shapes, &grad_out);
                    for (&n, g) in inputs.iter().zip(grads) {
                        self.accumulate(n, g);
                    }
                }
                Op::SliceChannels { input, start } => {
                    let gi = elem::slice_channels_backward(self.shape(input), start, &grad_out);
                    self.accumulate(input, gi);
                }
                Op::Add { a, b } => {
                    self.accumulate(a, grad_out.clone());
                    self.accumulate(b, grad_out);
                }
                Op::Mul { a, b } => {
                    let (ga, gb) = elem::mul_backward(self.value(a), self.value(b), &grad_out);
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::Affine { input, mul } => {
                    let gi = grad_out.map(|g| g * T::of_f64(mul));
                    self.accumulate(input, gi);
                }
                Op::SoftmaxChannels { input } => {
                    let gi = elem::softmax_channels_backward(&self.nodes[i].value, &grad_out);
                    self.accumulate(input, gi);
                }
                Op::SumChannels { input } => {
                    let gi = elem::sum_channels_backward(self.shape(input), &grad_out);
                    self.accumulate(input, gi);
                }
                Op::Dwt2d { input } => {
                    let gi = dwt::dwt2d_packed_backward(self.shape(input), &grad_out);
                    self.accumulate(input, gi);
                }
                Op::Idwt2d { input, crop } => {
                    let gi = dwt::idwt2d_packed_backward(&grad_out, crop);
                    self.accumulate(input, gi);
                }
                Op::ToneMap { input, mu } => {
                    let gi = elem::tone_map_backward(self.value(input), mu, &grad_out);
                    self.accumulate(input, gi);
                }
                Op::L1Loss { a, b } => {
                    let (ga, gb) =
                        elem::l1_loss_backward(self.value(a), self.value(b), grad_out.data()[0]);
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::SumAll { input } => {
                    let g = grad_out.data()[0];
                    let sh = self.shape(input);
                    self.accumulate(input, Tensor::filled(sh.b, sh.c, sh.h, sh.w, g));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_loss_gives_unit_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::filled(1, 2, 3, 3, 0.5), true);
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_square_loss_gradient_is_input() {
        let data = vec![0.3f64, -0.7, 1.5, 0.0];
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(1, 1, 2, 2, data.clone()).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq);
        let loss = tape.scale(s, 0.5);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), data.as_slice());
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(1, 1, 2, 2), true);
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn shared_parameter_accumulates_from_all_uses() {
        // loss = sum(x * x') where both factors are the same node: d/dx = 2x.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::filled(1, 1, 1, 2, 3.0), true);
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0, 6.0]);
    }

    #[test]
    fn gradients_do_not_flow_into_constants() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::filled(1, 1, 1, 2, 2.0), true);
        let c = tape.constant(Tensor::filled(1, 1, 1, 2, 5.0));
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[5.0, 5.0]);
    }
}
