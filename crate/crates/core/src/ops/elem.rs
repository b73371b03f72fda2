//! Elementwise and per-pixel kernels: activations, channel softmax,
//! broadcast arithmetic, concat/slice, tone mapping and losses.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    LeakyRelu,
    Relu,
    Sigmoid,
}

pub fn activation_forward<T: Scalar>(input: &Tensor<T>, kind: Activation) -> Tensor<T> {
    let slope = T::of_f64(LEAKY_SLOPE);
    match kind {
        Activation::LeakyRelu => input.map(|v| if v > T::zero() { v } else { v * slope }),
        Activation::Relu => input.map(|v| v.max(T::zero())),
        Activation::Sigmoid => input.map(|v| {
            let one = T::one();
            one / (one + (-v).exp())
        }),
    }
}

/// Backward given the op's input and output values.
pub fn activation_backward<T: Scalar>(
    input: &Tensor<T>,
    output: &Tensor<T>,
    kind: Activation,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let slope = T::of_f64(LEAKY_SLOPE);
    let one = T::one();
    let mut grad = Tensor::zeros(
        input.shape().b,
        input.shape().c,
        input.shape().h,
        input.shape().w,
    );
    let gd = grad.data_mut();
    match kind {
        Activation::LeakyRelu => {
            for i in 0..gd.len() {
                let d = if input.data()[i] > T::zero() { one } else { slope };
                gd[i] = grad_out.data()[i] * d;
            }
        }
        Activation::Relu => {
            for i in 0..gd.len() {
                let d = if input.data()[i] > T::zero() { one } else { T::zero() };
                gd[i] = grad_out.data()[i] * d;
            }
        }
        Activation::Sigmoid => {
            for i in 0..gd.len() {
                let s = output.data()[i];
                gd[i] = grad_out.data()[i] * s * (one - s);
            }
        }
    }
    grad
}

/// Softmax over the channel dimension, one distribution per (b, y, x).
///
/// The per-pixel vector is shifted by its maximum, so scores of magnitude
/// 1e4 stay representable.
pub fn softmax_channels_forward<T: Scalar>(scores: &Tensor<T>) -> Tensor<T> {
    let sh = scores.shape();
    let mut out = Tensor::zeros(sh.b, sh.c, sh.h, sh.w);
    let hw = sh.h * sh.w;
    for b in 0..sh.b {
        for p in 0..hw {
            let mut m = f64::NEG_INFINITY;
            for c in 0..sh.c {
                m = m.max(scores.data()[(b * sh.c + c) * hw + p].as_f64());
            }
            let mut denom = 0.0f64;
            for c in 0..sh.c {
                denom += (scores.data()[(b * sh.c + c) * hw + p].as_f64() - m).exp();
            }
            for c in 0..sh.c {
                let e = (scores.data()[(b * sh.c + c) * hw + p].as_f64() - m).exp();
                out.data_mut()[(b * sh.c + c) * hw + p] = T::of_f64(e / denom);
            }
        }
    }
    out
}

pub fn softmax_channels_backward<T: Scalar>(
    output: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let sh = output.shape();
    let mut grad = Tensor::zeros(sh.b, sh.c, sh.h, sh.w);
    let hw = sh.h * sh.w;
    for b in 0..sh.b {
        for p in 0..hw {
            let mut dot = 0.0f64;
            for c in 0..sh.c {
                let i = (b * sh.c + c) * hw + p;
                dot += output.data()[i].as_f64() * grad_out.data()[i].as_f64();
            }
            for c in 0..sh.c {
                let i = (b * sh.c + c) * hw + p;
                let w = output.data()[i].as_f64();
                grad.data_mut()[i] = T::of_f64(w * (grad_out.data()[i].as_f64() - dot));
            }
        }
    }
    grad
}

/// Per-pixel sum over channels: (B, C, H, W) -> (B, 1, H, W).
pub fn sum_channels_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let sh = input.shape();
    let mut out = Tensor::zeros(sh.b, 1, sh.h, sh.w);
    let hw = sh.h * sh.w;
    for b in 0..sh.b {
        for p in 0..hw {
            let mut acc = 0.0f64;
            for c in 0..sh.c {
                acc += input.data()[(b * sh.c + c) * hw + p].as_f64();
            }
            out.data_mut()[b * hw + p] = T::of_f64(acc);
        }
    }
    out
}

pub fn sum_channels_backward<T: Scalar>(in_shape: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut grad = Tensor::zeros(in_shape.b, in_shape.c, in_shape.h, in_shape.w);
    let hw = in_shape.h * in_shape.w;
    for b in 0..in_shape.b {
        for c in 0..in_shape.c {
            for p in 0..hw {
                grad.data_mut()[(b * in_shape.c + c) * hw + p] = grad_out.data()[b * hw + p];
            }
        }
    }
    grad
}

pub fn concat_channels_forward<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
    let fsh = first.shape();
    let mut c_total = 0;
    for t in inputs {
        let sh = t.shape();
        if !sh.same_spatial(&fsh) {
            return Err(Error::shape(format!(
                "concat_channels: spatial mismatch {sh} vs {fsh}"
            )));
        }
        c_total += sh.c;
    }
    let mut out = Tensor::zeros(fsh.b, c_total, fsh.h, fsh.w);
    let hw = fsh.h * fsh.w;
    for b in 0..fsh.b {
        let mut c_off = 0;
        for t in inputs {
            let sh = t.shape();
            for c in 0..sh.c {
                let dst = (b * c_total + c_off + c) * hw;
                out.data_mut()[dst..dst + hw].copy_from_slice(t.plane(b, c));
            }
            c_off += sh.c;
        }
    }
    Ok(out)
}

/// Split the upstream gradient back into per-input slices.
pub fn concat_channels_backward<T: Scalar>(
    shapes: &[Shape],
    grad_out: &Tensor<T>,
) -> Vec<Tensor<T>> {
    let gsh = grad_out.shape();
    let hw = gsh.h * gsh.w;
    let mut grads: Vec<Tensor<T>> = shapes
        .iter()
        .map(|s| Tensor::zeros(s.b, s.c, s.h, s.w))
        .collect();
    for b in 0..gsh.b {
        let mut c_off = 0;
        for g in grads.iter_mut() {
            let sh = g.shape();
            for c in 0..sh.c {
                let src = (b * gsh.c + c_off + c) * hw;
                let dst = (b * sh.c + c) * hw;
                g.data_mut()[dst..dst + hw]
                    .copy_from_slice(&grad_out.data()[src..src + hw]);
            }
            c_off += sh.c;
        }
    }
    grads
}

pub fn slice_channels_forward<T: Scalar>(
    input: &Tensor<T>,
    start: usize,
    len: usize,
) -> Result<Tensor<T>> {
    let sh = input.shape();
    if start + len > sh.c {
        return Err(Error::shape(format!(
            "slice_channels: [{start}, {}) out of {} channels",
            start + len,
            sh.c
        )));
    }
    let mut out = Tensor::zeros(sh.b, len, sh.h, sh.w);
    let hw = sh.h * sh.w;
    for b in 0..sh.b {
        for c in 0..len {
            let dst = (b * len + c) * hw;
            out.data_mut()[dst..dst + hw].copy_from_slice(input.plane(b, start + c));
        }
    }
    Ok(out)
}

pub fn slice_channels_backward<T: Scalar>(
    in_shape: Shape,
    start: usize,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let gsh = grad_out.shape();
    let mut grad = Tensor::zeros(in_shape.b, in_shape.c, in_shape.h, in_shape.w);
    let hw = in_shape.h * in_shape.w;
    for b in 0..gsh.b {
        for c in 0..gsh.c {
            let dst = (b * in_shape.c + start + c) * hw;
            grad.data_mut()[dst..dst + hw].copy_from_slice(grad_out.plane(b, c));
        }
    }
    grad
}

/// How the right operand of a binary op maps onto the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    /// Identical shapes.
    None,
    /// rhs is (B, 1, H, W), repeated over channels.
    Channel,
    /// rhs is (B, C, 1, 1), repeated over pixels.
    Spatial,
}

pub fn broadcast_of(lhs: Shape, rhs: Shape) -> Result<Broadcast> {
    if lhs == rhs {
        Ok(Broadcast::None)
    } else if rhs.c == 1 && rhs.b == lhs.b && rhs.h == lhs.h && rhs.w == lhs.w {
        Ok(Broadcast::Channel)
    } else if rhs.h == 1 && rhs.w == 1 && rhs.b == lhs.b && rhs.c == lhs.c {
        Ok(Broadcast::Spatial)
    } else {
        Err(Error::shape(format!(
            "binary op: incompatible shapes {lhs} and {rhs}"
        )))
    }
}

#[inline]
fn rhs_index(sh: Shape, bc: Broadcast, b: usize, c: usize, p: usize, hw: usize) -> usize {
    match bc {
        Broadcast::None => (b * sh.c + c) * hw + p,
        Broadcast::Channel => b * hw + p,
        Broadcast::Spatial => b * sh.c + c,
    }
}

pub fn mul_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let bc = broadcast_of(a.shape(), b.shape())?;
    let sh = a.shape();
    let hw = sh.h * sh.w;
    let mut out = Tensor::zeros(sh.b, sh.c, sh.h, sh.w);
    for bi in 0..sh.b {
        for c in 0..sh.c {
            for p in 0..hw {
                let i = (bi * sh.c + c) * hw + p;
                out.data_mut()[i] = a.data()[i] * b.data()[rhs_index(sh, bc, bi, c, p, hw)];
            }
        }
    }
    Ok(out)
}

/// Gradients of a * b; the broadcast side reduces in f64 over its repeats.
pub fn mul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let sh = a.shape();
    let bsh = b.shape();
    let bc = broadcast_of(sh, bsh).expect("shapes checked in forward");
    let hw = sh.h * sh.w;
    let mut ga = Tensor::zeros(sh.b, sh.c, sh.h, sh.w);
    let mut gb64 = vec![0.0f64; bsh.numel()];
    for bi in 0..sh.b {
        for c in 0..sh.c {
            for p in 0..hw {
                let i = (bi * sh.c + c) * hw + p;
                let ri = rhs_index(sh, bc, bi, c, p, hw);
                let g = grad_out.data()[i];
                ga.data_mut()[i] = g * b.data()[ri];
                gb64[ri] += (g * a.data()[i]).as_f64();
            }
        }
    }
    let mut gb = Tensor::zeros(bsh.b, bsh.c, bsh.h, bsh.w);
    for (dst, src) in gb.data_mut().iter_mut().zip(&gb64) {
        *dst = T::of_f64(*src);
    }
    (ga, gb)
}

pub fn add_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "add: shape mismatch {} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += *v;
    }
    Ok(out)
}

/// mul * x + add, elementwise with scalar constants.
pub fn affine_forward<T: Scalar>(input: &Tensor<T>, mul: f64, add: f64) -> Tensor<T> {
    let (m, a) = (T::of_f64(mul), T::of_f64(add));
    input.map(|v| v * m + a)
}

/// mu-law range compression log(1 + mu x) / log(1 + mu); requires x >= 0.
pub fn tone_map_forward<T: Scalar>(input: &Tensor<T>, mu: f64) -> Result<Tensor<T>> {
    if mu <= 0.0 {
        return Err(Error::domain("tone_map: mu must be positive"));
    }
    if input.data().iter().any(|v| v.as_f64() < 0.0) {
        return Err(Error::domain("tone_map: negative input"));
    }
    let denom = (1.0 + mu).ln();
    Ok(input.map(|v| T::of_f64((1.0 + mu * v.as_f64()).ln() / denom)))
}

pub fn tone_map_backward<T: Scalar>(input: &Tensor<T>, mu: f64, grad_out: &Tensor<T>) -> Tensor<T> {
    let denom = (1.0 + mu).ln();
    let mut grad = input.clone();
    for (g, (x, up)) in grad
        .data_mut()
        .iter_mut()
        .zip(input.data().iter().zip(grad_out.data()))
    {
        *g = T::of_f64(mu / ((1.0 + mu * x.as_f64()) * denom) * up.as_f64());
    }
    grad
}

/// Mean absolute difference, accumulated in f64; returns a scalar tensor.
pub fn l1_loss_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "l1 loss: shape mismatch {} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    let acc: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .sum();
    Ok(Tensor::scalar(T::of_f64(acc / a.numel() as f64)))
}

pub fn l1_loss_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: T,
) -> (Tensor<T>, Tensor<T>) {
    let scale = grad_out.as_f64() / a.numel() as f64;
    let mut ga = Tensor::zeros(a.shape().b, a.shape().c, a.shape().h, a.shape().w);
    let mut gb = ga.clone();
    for i in 0..a.numel() {
        let d = a.data()[i].as_f64() - b.data()[i].as_f64();
        let s = if d > 0.0 {
            scale
        } else if d < 0.0 {
            -scale
        } else {
            0.0
        };
        ga.data_mut()[i] = T::of_f64(s);
        gb.data_mut()[i] = T::of_f64(-s);
    }
    (ga, gb)
}

/// Sum of all elements as a scalar tensor, accumulated in f64.
pub fn sum_all_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    Tensor::scalar(T::of_f64(input.sum_f64()))
}
