//! Activation, attention and weight binarizers.
//!
//! Each forward is a hard quantizer; each backward is the straight-through
//! surrogate rule, not the true derivative. The `*_relaxed` functions are
//! smooth forwards whose exact derivative in the input equals the surrogate
//! rule. They exist so that whole-graph gradients can be checked against
//! finite differences; training never uses them.

use crate::bitcore::{ChannelScale, PackedBitMatrix};
use crate::{Error, Real, Result};

/// Lower bound enforced on a binarizer scale after every optimizer step.
pub const MIN_SCALE: f64 = 1e-4;

/// Learnable scale `a` (> 0) and bias `b` of a binarizer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinarizerParams<T> {
    pub a: T,
    pub b: T,
}

impl<T: Real> BinarizerParams<T> {
    pub fn new(a: T, b: T) -> Result<Self> {
        if !(a > T::zero()) {
            return Err(Error::Config(format!(
                "binarizer scale must be > 0, got {a}"
            )));
        }
        Ok(Self { a, b })
    }

    /// Activation binarizer default: `a = 1`, `b = 0`.
    pub fn activation_default() -> Self {
        Self {
            a: T::one(),
            b: T::zero(),
        }
    }

    /// Attention binarizer default: `a = 1`, `b = 0.5`.
    pub fn attention_default() -> Self {
        Self {
            a: T::one(),
            b: T::lit(0.5),
        }
    }

    #[inline]
    fn offset(&self, x: T) -> T {
        (x - self.b) / self.a
    }
}

/// Clamp a learned scale back into the admissible range.
pub fn clamp_scale<T: Real>(a: T) -> T {
    a.max(T::lit(MIN_SCALE))
}

/// Sign with `sign(0) = +1`.
#[inline]
pub fn sign<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one()
    } else {
        -T::one()
    }
}

/// Round half away from zero.
#[inline]
pub fn round_half_away<T: Real>(x: T) -> T {
    // Float::round already breaks ties away from zero.
    x.round()
}

// ---------------------------------------------------------------- RSign

#[inline]
pub fn rsign<T: Real>(x: T, p: BinarizerParams<T>) -> T {
    sign(p.offset(x))
}

/// Surrogate `∂Â/∂A`: `2 + 2u` on `[b-a, b)`, `2 - 2u` on `[b, b+a)`, else 0,
/// with `u = (A - b) / a`.
#[inline]
pub fn rsign_surrogate<T: Real>(x: T, p: BinarizerParams<T>) -> T {
    let two = T::lit(2.0);
    if x >= p.b - p.a && x < p.b {
        two + two * p.offset(x)
    } else if x >= p.b && x < p.b + p.a {
        two - two * p.offset(x)
    } else {
        T::zero()
    }
}

pub fn rsign_forward<T: Real>(x: &[T], p: BinarizerParams<T>) -> Vec<T> {
    x.iter().map(|&v| rsign(v, p)).collect()
}

pub fn rsign_backward<T: Real>(grad_out: &[T], x: &[T], p: BinarizerParams<T>) -> Vec<T> {
    grad_out
        .iter()
        .zip(x)
        .map(|(&g, &v)| g * rsign_surrogate(v, p))
        .collect()
}

/// Gradients for the binarizer's own `(a, b)` under the surrogate.
///
/// With `g(u)` the surrogate slope, `∂Â/∂b = -g(u)` and `∂Â/∂a = -u·g(u)`.
pub fn rsign_param_grads<T: Real>(grad_out: &[T], x: &[T], p: BinarizerParams<T>) -> (T, T) {
    let mut ga = T::zero();
    let mut gb = T::zero();
    for (&g, &v) in grad_out.iter().zip(x) {
        let s = g * rsign_surrogate(v, p);
        gb -= s;
        ga -= s * p.offset(v);
    }
    (ga, gb)
}

/// Piecewise-quadratic sign approximation; `d/du` is `2 ± 2u` on `[-1, 1)`.
#[inline]
pub fn approx_sign<T: Real>(u: T) -> T {
    let two = T::lit(2.0);
    if u < -T::one() {
        -T::one()
    } else if u < T::zero() {
        two * u + u * u
    } else if u < T::one() {
        two * u - u * u
    } else {
        T::one()
    }
}

/// Smooth forward matching the RSign surrogate at `a = 1`.
#[inline]
pub fn rsign_relaxed<T: Real>(x: T, p: BinarizerParams<T>) -> T {
    approx_sign(p.offset(x))
}

/// True derivatives of [`rsign_relaxed`] in `(x, a, b)`.
#[inline]
pub fn rsign_relaxed_grads<T: Real>(x: T, p: BinarizerParams<T>) -> (T, T, T) {
    let u = p.offset(x);
    let du = rsign_surrogate(x, p);
    let dx = du / p.a;
    (dx, -dx * u, -dx)
}

// ---------------------------------------------------------------- attention

#[inline]
pub fn att_binarize<T: Real>(x: T, p: BinarizerParams<T>) -> T {
    p.a * round_half_away(p.offset(x)).max(T::zero()).min(T::one())
}

/// Surrogate `∂Â/∂A`: `a` on `[b, a + b)`, else 0.
#[inline]
pub fn att_surrogate<T: Real>(x: T, p: BinarizerParams<T>) -> T {
    if x >= p.b && x < p.a + p.b {
        p.a
    } else {
        T::zero()
    }
}

pub fn att_binarize_forward<T: Real>(x: &[T], p: BinarizerParams<T>) -> Vec<T> {
    x.iter().map(|&v| att_binarize(v, p)).collect()
}

pub fn att_binarize_backward<T: Real>(grad_out: &[T], x: &[T], p: BinarizerParams<T>) -> Vec<T> {
    grad_out
        .iter()
        .zip(x)
        .map(|(&g, &v)| g * att_surrogate(v, p))
        .collect()
}

/// `(∂L/∂a, ∂L/∂b)`: the explicit factor `a` gives `∂Â/∂a = Â/a`; the
/// threshold path gives `∂Â/∂b = -a` inside the window.
pub fn att_param_grads<T: Real>(grad_out: &[T], x: &[T], p: BinarizerParams<T>) -> (T, T) {
    let mut ga = T::zero();
    let mut gb = T::zero();
    for (&g, &v) in grad_out.iter().zip(x) {
        ga += g * att_binarize(v, p) / p.a;
        gb -= g * att_surrogate(v, p);
    }
    (ga, gb)
}

/// Smooth forward whose `∂/∂A` equals the attention surrogate:
/// `a · clamp(A - b, 0, a)`.
#[inline]
pub fn att_relaxed<T: Real>(x: T, p: BinarizerParams<T>) -> T {
    p.a * (x - p.b).max(T::zero()).min(p.a)
}

/// True derivatives of [`att_relaxed`] in `(x, a, b)`.
#[inline]
pub fn att_relaxed_grads<T: Real>(x: T, p: BinarizerParams<T>) -> (T, T, T) {
    let d = x - p.b;
    if d < T::zero() {
        (T::zero(), T::zero(), T::zero())
    } else if d < p.a {
        (p.a, d, -p.a)
    } else {
        (T::zero(), p.a + p.a, T::zero())
    }
}

// ---------------------------------------------------------------- weights

/// Per-output-channel scale `G(|W_k|)`: mean absolute value of row `k` of a
/// `[out, in]` weight.
pub fn weight_scales<T: Real>(w: &[T], out_ch: usize, in_ch: usize) -> Vec<T> {
    assert_eq!(w.len(), out_ch * in_ch);
    let n = T::lit(in_ch.max(1) as f64);
    w.chunks(in_ch.max(1))
        .take(out_ch)
        .map(|row| row.iter().map(|v| v.abs()).sum::<T>() / n)
        .collect()
}

/// Binarize a `[out, in]` weight: packed signs plus per-channel scale.
pub fn weight_binarize<T: Real>(
    w: &[T],
    out_ch: usize,
    in_ch: usize,
) -> (PackedBitMatrix, ChannelScale<T>) {
    let packed = PackedBitMatrix::pack_signs_of(w, out_ch, in_ch);
    let scale = ChannelScale::new(weight_scales(w, out_ch, in_ch)).expect("mean |w| >= 0");
    (packed, scale)
}

/// Dense `G_k · sign(W_k)`, the effective weight the packed kernel applies.
pub fn weight_effective<T: Real>(w: &[T], scales: &[T], in_ch: usize) -> Vec<T> {
    w.iter()
        .enumerate()
        .map(|(i, &v)| scales[i / in_ch] * sign(v))
        .collect()
}

/// Smooth stand-in `G_k · clamp(W, -1, 1)` with `G` held constant.
pub fn weight_relaxed<T: Real>(w: &[T], scales: &[T], in_ch: usize) -> Vec<T> {
    w.iter()
        .enumerate()
        .map(|(i, &v)| scales[i / in_ch] * v.max(-T::one()).min(T::one()))
        .collect()
}

/// `∂L/∂W = G_k · ∂L/∂Ŵ · 1{|W| < 1}`.
pub fn weight_binarize_backward<T: Real>(
    grad_what: &[T],
    w: &[T],
    scales: &[T],
    in_ch: usize,
) -> Vec<T> {
    grad_what
        .iter()
        .zip(w)
        .enumerate()
        .map(|(i, (&g, &v))| {
            if v > -T::one() && v < T::one() {
                scales[i / in_ch] * g
            } else {
                T::zero()
            }
        })
        .collect()
}
