//! Forward recorders and backward rules for every tape operation.

use super::{BinarizeMode, Op, Tape, Var};
use crate::activations::{backward_kernel, forward_kernel};
use crate::binarize::{
    att_binarize, att_param_grads, att_relaxed, att_relaxed_grads, att_surrogate, rsign,
    rsign_param_grads, rsign_relaxed, rsign_relaxed_grads, rsign_surrogate, sign, weight_binarize,
    weight_binarize_backward, weight_effective, weight_relaxed, weight_scales, BinarizerParams,
};
use crate::bitcore::{binary_matmul_int_threads, PackedBitMatrix};
use crate::grid::{stencil3x3, stencil3x3_adjoint, stencil3x3_kernel_grad};
use crate::hfsc::{HAAR_HIGH, HAAR_LOW};
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc};
use crate::{bitcore, Error, Real, Result, Tensor};

/// Frequency band selected by [`Tape::haar`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Band {
    Low,
    High,
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn one_element<T: Real>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.len() != 1 {
        return Err(Error::Shape(format!(
            "{what} must hold one element, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn with_last_dim(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    match s.last_mut() {
        Some(l) => *l = last,
        None => s.push(last),
    }
    s
}

fn binarizer<T: Real>(tape: &Tape<T>, a: Var, b: Var) -> BinarizerParams<T> {
    BinarizerParams {
        a: tape.value(a).item(),
        b: tape.value(b).item(),
    }
}

fn head_geometry<T: Real>(
    x: &Tensor<T>,
    heads: usize,
    tokens: usize,
) -> Result<(usize, usize, usize)> {
    let c = x.cols();
    if heads == 0 || tokens == 0 || !c.is_multiple_of(heads) || !x.rows().is_multiple_of(tokens) {
        return Err(Error::Shape(format!(
            "{:?} does not split into {heads} heads over {tokens} tokens",
            x.shape()
        )));
    }
    Ok((x.rows() / tokens, c, c / heads))
}

fn softmax_row<T: Real>(row: &[T], scale: T, out: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v * scale));
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v * scale - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

impl<T: Real> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| p - q)
            .collect();
        let out = Tensor::new(x.shape(), data)?;
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| p * q)
            .collect();
        let out = Tensor::new(x.shape(), data)?;
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        one_element(self.value(s), "mul_scalar factor")?;
        let c = self.value(s).item();
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::MulScalar(x, s))
    }

    pub fn div_scalar(&mut self, a: Var, b: Var) -> Result<Var> {
        one_element(self.value(a), "div_scalar numerator")?;
        one_element(self.value(b), "div_scalar denominator")?;
        let out = Tensor::scalar(self.value(a).item() / self.value(b).item());
        self.push(out, Op::DivScalar(a, b))
    }

    /// `x + p` where `p` is repeated along the leading axis.
    pub fn add_tiled(&mut self, x: Var, p: Var) -> Result<Var> {
        let (xv, pv) = (self.value(x), self.value(p));
        if pv.is_empty() || xv.len() % pv.len() != 0 || pv.cols() != xv.cols() {
            return Err(Error::Shape(format!(
                "cannot tile {:?} over {:?}",
                pv.shape(),
                xv.shape()
            )));
        }
        let plen = pv.len();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + pv.data()[i % plen])
            .collect();
        let out = Tensor::new(xv.shape(), data)?;
        self.push(out, Op::AddTiled(x, p))
    }

    /// Full-precision `x · wᵀ` with `w` of shape `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (rows, inp) = (xv.rows(), xv.cols());
        if wv.shape().len() != 2 || wv.shape()[1] != inp {
            return Err(Error::Shape(format!(
                "linear: input {:?} with weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let outf = wv.shape()[0];
        let mut out = vec![T::zero(); rows * outf];
        matmul_nt_acc(xv.data(), wv.data(), &mut out, rows, inp, outf);
        let out = Tensor::new(&with_last_dim(xv.shape(), outf), out)?;
        self.push(out, Op::Linear(x, w))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let c = xv.cols();
        if gv.len() != c || bv.len() != c {
            return Err(Error::Shape(format!(
                "layer_norm over {c} channels with affine of {} / {}",
                gv.len(),
                bv.len()
            )));
        }
        let eps = T::lit(eps);
        let n = T::lit(c as f64);
        let mut mean = Vec::with_capacity(xv.rows());
        let mut rstd = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(c) {
            let mu = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            for (i, &v) in row.iter().enumerate() {
                out.push((v - mu) * r * gv.data()[i] + bv.data()[i]);
            }
            mean.push(mu);
            rstd.push(r);
        }
        let out = Tensor::new(xv.shape(), out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
        )
    }

    /// Learnable-threshold sign binarizer.
    pub fn rsign(&mut self, x: Var, a: Var, b: Var) -> Result<Var> {
        one_element(self.value(a), "rsign scale")?;
        one_element(self.value(b), "rsign bias")?;
        let p = binarizer(self, a, b);
        let out = match self.mode {
            BinarizeMode::Hard => self.value(x).map(|v| rsign(v, p)),
            BinarizeMode::Relaxed => self.value(x).map(|v| rsign_relaxed(v, p)),
        };
        self.push(out, Op::RSign { x, a, b })
    }

    /// Binary linear core on an already binarized input.
    ///
    /// In hard mode `x` must be exactly ±1 and the product runs through the
    /// packed XNOR/popcount kernel.
    pub fn binary_linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (rows, inp) = (xv.rows(), xv.cols());
        if wv.shape().len() != 2 || wv.shape()[1] != inp {
            return Err(Error::Shape(format!(
                "binary_linear: input {:?} with weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let outf = wv.shape()[0];
        let (data, scales) = match self.mode {
            BinarizeMode::Hard => {
                let xb = PackedBitMatrix::pack(xv.data(), rows, inp)?;
                let (wb, scale) = weight_binarize(wv.data(), outf, inp);
                let core = binary_matmul_int_threads(&xb, &wb, bitcore::thread_limit())?;
                let s = scale.values();
                let data = core
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| s[i % outf] * T::lit(v as f64))
                    .collect();
                (data, s.to_vec())
            }
            BinarizeMode::Relaxed => {
                let scales = weight_scales(wv.data(), outf, inp);
                let weff = weight_relaxed(wv.data(), &scales, inp);
                let mut out = vec![T::zero(); rows * outf];
                matmul_nt_acc(xv.data(), &weff, &mut out, rows, inp, outf);
                (out, scales)
            }
        };
        let out = Tensor::new(&with_last_dim(xv.shape(), outf), data)?;
        self.push(out, Op::BinaryLinear { x, w, scales })
    }

    /// Per-head `Q Kᵀ` of ±1 inputs via the packed kernel (hard mode).
    /// Output is `[batch·heads·tokens, tokens]`.
    pub fn similarity_binary(
        &mut self,
        q: Var,
        k: Var,
        heads: usize,
        tokens: usize,
    ) -> Result<Var> {
        if self.mode == BinarizeMode::Relaxed {
            return self.similarity_float(q, k, heads, tokens);
        }
        let (qv, kv) = (self.value(q), self.value(k));
        same_shape(qv, kv, "similarity")?;
        let (batch, c, d) = head_geometry(qv, heads, tokens)?;
        for (idx, &v) in qv.data().iter().chain(kv.data()).enumerate() {
            if v != T::one() && v != -T::one() {
                return Err(Error::NotSign {
                    index: idx % qv.len(),
                    value: v.as_f64(),
                });
            }
        }
        let mut out = Vec::with_capacity(batch * heads * tokens * tokens);
        for b in 0..batch {
            for h in 0..heads {
                let at = |src: &[T], i: usize, e: usize| {
                    src[(b * tokens + i) * c + h * d + e] > T::zero()
                };
                let qb = PackedBitMatrix::from_fn(tokens, d, |i, e| at(qv.data(), i, e));
                let kb = PackedBitMatrix::from_fn(tokens, d, |i, e| at(kv.data(), i, e));
                let s = binary_matmul_int_threads(&qb, &kb, 1)?;
                out.extend(s.into_iter().map(|v| T::lit(v as f64)));
            }
        }
        let out = Tensor::new(&[batch * heads * tokens, tokens], out)?;
        self.push(
            out,
            Op::Similarity {
                q,
                k,
                heads,
                tokens,
            },
        )
    }

    /// Full-precision per-head `Q Kᵀ`.
    pub fn similarity_float(&mut self, q: Var, k: Var, heads: usize, tokens: usize) -> Result<Var> {
        let (qv, kv) = (self.value(q), self.value(k));
        same_shape(qv, kv, "similarity")?;
        let (batch, c, d) = head_geometry(qv, heads, tokens)?;
        let mut out = vec![T::zero(); batch * heads * tokens * tokens];
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * heads + h) * tokens * tokens;
                for i in 0..tokens {
                    let qi = &qv.data()[(b * tokens + i) * c + h * d..][..d];
                    for j in 0..tokens {
                        let kj = &kv.data()[(b * tokens + j) * c + h * d..][..d];
                        out[base + i * tokens + j] = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum();
                    }
                }
            }
        }
        let out = Tensor::new(&[batch * heads * tokens, tokens], out)?;
        self.push(
            out,
            Op::Similarity {
                q,
                k,
                heads,
                tokens,
            },
        )
    }

    /// Row-wise `softmax(scale · x)` over the last axis.
    pub fn softmax(&mut self, x: Var, scale: T) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = vec![T::zero(); xv.len()];
        for (row, o) in xv.data().chunks(c).zip(out.chunks_mut(c)) {
            softmax_row(row, scale, o);
        }
        let out = Tensor::new(xv.shape(), out)?;
        self.push(out, Op::Softmax { x, scale })
    }

    pub fn att_binarize(&mut self, x: Var, a: Var, b: Var) -> Result<Var> {
        one_element(self.value(a), "attention binarizer scale")?;
        one_element(self.value(b), "attention binarizer bias")?;
        let p = binarizer(self, a, b);
        let out = match self.mode {
            BinarizeMode::Hard => self.value(x).map(|v| att_binarize(v, p)),
            BinarizeMode::Relaxed => self.value(x).map(|v| att_relaxed(v, p)),
        };
        self.push(out, Op::AttBinarize { x, a, b })
    }

    /// Per-head `A · V` with `A` as produced by the similarity ops.
    pub fn attn_apply(&mut self, att: Var, v: Var, heads: usize, tokens: usize) -> Result<Var> {
        let (av, vv) = (self.value(att), self.value(v));
        let (batch, c, d) = head_geometry(vv, heads, tokens)?;
        if av.len() != batch * heads * tokens * tokens {
            return Err(Error::Shape(format!(
                "attention {:?} does not match values {:?} with {heads} heads",
                av.shape(),
                vv.shape()
            )));
        }
        let mut out = vec![T::zero(); vv.len()];
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * heads + h) * tokens * tokens;
                for i in 0..tokens {
                    let orow = (b * tokens + i) * c + h * d;
                    for j in 0..tokens {
                        let w = av.data()[base + i * tokens + j];
                        if w == T::zero() {
                            continue;
                        }
                        let vrow = (b * tokens + j) * c + h * d;
                        for e in 0..d {
                            out[orow + e] += w * vv.data()[vrow + e];
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vv.shape(), out)?;
        self.push(
            out,
            Op::AttnApply {
                att,
                v,
                heads,
                tokens,
            },
        )
    }

    /// Depthwise 3×3 stencil over `height × width` token grids, zero padded.
    pub fn stencil(&mut self, x: Var, kernel: Var, height: usize, width: usize) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        if kv.len() != 9 {
            return Err(Error::Shape(format!(
                "stencil kernel has {} taps",
                kv.len()
            )));
        }
        let tokens = height * width;
        if tokens == 0 || xv.rows() % tokens != 0 {
            return Err(Error::Shape(format!(
                "{:?} is not a batch of {height}x{width} grids",
                xv.shape()
            )));
        }
        let kernel_taps: [T; 9] = std::array::from_fn(|i| kv.data()[i]);
        let mut out = vec![T::zero(); xv.len()];
        stencil3x3(
            xv.data(),
            &mut out,
            xv.rows() / tokens,
            height,
            width,
            xv.cols(),
            &kernel_taps,
        );
        let out = Tensor::new(xv.shape(), out)?;
        self.push(
            out,
            Op::Stencil {
                x,
                kernel,
                height,
                width,
            },
        )
    }

    /// Non-subsampled diagonal Haar band of `x`.
    pub fn haar(&mut self, x: Var, band: Band, height: usize, width: usize) -> Result<Var> {
        let taps = match band {
            Band::Low => HAAR_LOW,
            Band::High => HAAR_HIGH,
        };
        let kernel = self.constant(Tensor::new(&[9], taps.map(T::lit).to_vec())?)?;
        self.stencil(x, kernel, height, width)
    }

    /// Concatenate along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::Shape(format!(
                "concat rows differ: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (c1, c2) = (av.cols(), bv.cols());
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for (ra, rb) in av.data().chunks(c1).zip(bv.data().chunks(c2)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let out = Tensor::new(&with_last_dim(av.shape(), c1 + c2), out)?;
        self.push(out, Op::Concat(a, b))
    }

    /// RPReLU (`t = None`) or its per-token-shift variant.
    pub fn activation(
        &mut self,
        x: Var,
        m: Var,
        n: Var,
        k: Var,
        t: Option<Var>,
        tokens: usize,
    ) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        for p in [m, n, k] {
            if self.value(p).len() != c {
                return Err(Error::Shape(format!(
                    "activation parameter of {} for {c} channels",
                    self.value(p).len()
                )));
            }
        }
        if tokens == 0 || !xv.rows().is_multiple_of(tokens) {
            return Err(Error::Shape(format!(
                "{:?} is not a batch of {tokens} tokens",
                xv.shape()
            )));
        }
        if let Some(t) = t {
            if self.value(t).len() != tokens {
                return Err(Error::Shape(format!(
                    "token shift of {} for {tokens} tokens",
                    self.value(t).len()
                )));
            }
        }
        let data = forward_kernel(
            xv.data(),
            self.value(m).data(),
            self.value(n).data(),
            self.value(k).data(),
            t.map(|t| self.value(t).data()),
            tokens,
        );
        let out = Tensor::new(xv.shape(), data)?;
        self.push(
            out,
            Op::Activation {
                x,
                m,
                n,
                k,
                t,
                tokens,
            },
        )
    }

    /// `[batch·tokens, C] → [batch, C]` average over tokens.
    pub fn mean_tokens(&mut self, x: Var, tokens: usize) -> Result<Var> {
        let xv = self.value(x);
        if tokens == 0 || !xv.rows().is_multiple_of(tokens) {
            return Err(Error::Shape(format!(
                "{:?} is not a batch of {tokens} tokens",
                xv.shape()
            )));
        }
        let (batch, c) = (xv.rows() / tokens, xv.cols());
        let inv = T::one() / T::lit(tokens as f64);
        let mut out = vec![T::zero(); batch * c];
        for (r, row) in xv.data().chunks(c).enumerate() {
            let o = &mut out[(r / tokens) * c..][..c];
            for (a, &v) in o.iter_mut().zip(row) {
                *a += v * inv;
            }
        }
        let out = Tensor::new(&[batch, c], out)?;
        self.push(out, Op::MeanTokens { x, tokens })
    }

    /// Mean cross-entropy of `[batch, classes]` logits against labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (batch, classes) = (lv.rows(), lv.cols());
        if labels.len() != batch {
            return Err(Error::Length {
                expected: batch,
                got: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label { label, classes });
        }
        let mut probs = vec![T::zero(); lv.len()];
        let mut loss = T::zero();
        for (r, (row, p)) in lv
            .data()
            .chunks(classes)
            .zip(probs.chunks_mut(classes))
            .enumerate()
        {
            softmax_row(row, T::one(), p);
            loss -= log_softmax_at(row, labels[r]);
        }
        let out = Tensor::scalar(loss / T::lit(batch as f64));
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Mean `KL(target ‖ softmax(logits))` with constant target rows.
    pub fn soft_target_kl(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let lv = self.value(logits);
        same_shape(lv, target, "soft_target_kl")?;
        let (batch, classes) = (lv.rows(), lv.cols());
        let mut probs = vec![T::zero(); lv.len()];
        let mut loss = T::zero();
        for ((row, p), t) in lv
            .data()
            .chunks(classes)
            .zip(probs.chunks_mut(classes))
            .zip(target.data().chunks(classes))
        {
            softmax_row(row, T::one(), p);
            for (j, &tj) in t.iter().enumerate() {
                if tj > T::zero() {
                    loss += tj * (tj.ln() - log_softmax_at(row, j));
                }
            }
        }
        let out = Tensor::scalar(loss / T::lit(batch as f64));
        self.push(
            out,
            Op::SoftTargetKl {
                logits,
                target: target.data().to_vec(),
                probs,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// `Σ x ⊙ w` against a constant weight tensor.
    pub fn dot_const(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        let xv = self.value(x);
        if weights.len() != xv.len() {
            return Err(Error::Length {
                expected: xv.len(),
                got: weights.len(),
            });
        }
        let s = xv.data().iter().zip(weights).map(|(&a, &b)| a * b).sum();
        self.push(
            Tensor::scalar(s),
            Op::DotConst {
                x,
                weights: weights.to_vec(),
            },
        )
    }
}

fn log_softmax_at<T: Real>(row: &[T], j: usize) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row[j] - lse
}

/// Backward rule of node `idx` given its output gradient.
pub(super) fn backward<T: Real>(
    tape: &Tape<T>,
    idx: usize,
    g: &Tensor<T>,
) -> Result<Vec<(Var, Tensor<T>)>> {
    let node = &tape.nodes[idx];
    let val = |v: Var| tape.value(v);
    let needs = |v: Var| tape.node(v).requires_grad;
    let gd = g.data();
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            out.push((*a, g.clone()));
            out.push((*b, g.clone()));
        }
        Op::Sub(a, b) => {
            out.push((*a, g.clone()));
            out.push((*b, g.map(|v| -v)));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let ga = gd.iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
            let gb = gd.iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
            out.push((*a, Tensor::new(av.shape(), ga)?));
            out.push((*b, Tensor::new(bv.shape(), gb)?));
        }
        Op::Scale(a, c) => out.push((*a, g.map(|v| v * *c))),
        Op::MulScalar(x, s) => {
            let c = val(*s).item();
            out.push((*x, g.map(|v| v * c)));
            if needs(*s) {
                let gs = gd.iter().zip(val(*x).data()).map(|(&p, &q)| p * q).sum();
                out.push((*s, Tensor::new(val(*s).shape(), vec![gs])?));
            }
        }
        Op::DivScalar(a, b) => {
            let (av, bv) = (val(*a).item(), val(*b).item());
            let g0 = gd[0];
            out.push((*a, Tensor::new(val(*a).shape(), vec![g0 / bv])?));
            out.push((
                *b,
                Tensor::new(val(*b).shape(), vec![-g0 * av / (bv * bv)])?,
            ));
        }
        Op::AddTiled(x, p) => {
            out.push((*x, g.clone()));
            if needs(*p) {
                let pv = val(*p);
                let mut gp = vec![T::zero(); pv.len()];
                for (i, &v) in gd.iter().enumerate() {
                    gp[i % pv.len()] += v;
                }
                out.push((*p, Tensor::new(pv.shape(), gp)?));
            }
        }
        Op::Linear(x, w) => {
            let (xv, wv) = (val(*x), val(*w));
            let (rows, inp, outf) = (xv.rows(), xv.cols(), wv.shape()[0]);
            if needs(*x) {
                let mut gx = vec![T::zero(); xv.len()];
                matmul_acc(gd, wv.data(), &mut gx, rows, outf, inp);
                out.push((*x, Tensor::new(xv.shape(), gx)?));
            }
            if needs(*w) {
                let mut gw = vec![T::zero(); wv.len()];
                matmul_tn_acc(gd, xv.data(), &mut gw, rows, outf, inp);
                out.push((*w, Tensor::new(wv.shape(), gw)?));
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            rstd,
        } => {
            let xv = val(*x);
            let gamma_v = val(*gamma).data();
            let c = xv.cols();
            let n = T::lit(c as f64);
            let mut gx = vec![T::zero(); xv.len()];
            let mut gg = vec![T::zero(); c];
            let mut gb = vec![T::zero(); c];
            for r in 0..xv.rows() {
                let row = &xv.data()[r * c..(r + 1) * c];
                let grow = &gd[r * c..(r + 1) * c];
                let (mu, rs) = (mean[r], rstd[r]);
                let mut sum_g = T::zero();
                let mut sum_gx = T::zero();
                for i in 0..c {
                    let xhat = (row[i] - mu) * rs;
                    let gxhat = grow[i] * gamma_v[i];
                    sum_g += gxhat;
                    sum_gx += gxhat * xhat;
                    gg[i] += grow[i] * xhat;
                    gb[i] += grow[i];
                }
                for i in 0..c {
                    let xhat = (row[i] - mu) * rs;
                    let gxhat = grow[i] * gamma_v[i];
                    gx[r * c + i] = rs * (gxhat - sum_g / n - xhat * sum_gx / n);
                }
            }
            out.push((*x, Tensor::new(xv.shape(), gx)?));
            out.push((*gamma, Tensor::new(val(*gamma).shape(), gg)?));
            out.push((*beta, Tensor::new(val(*beta).shape(), gb)?));
        }
        Op::RSign { x, a, b } => {
            let p = binarizer(tape, *a, *b);
            let xv = val(*x);
            match tape.mode {
                BinarizeMode::Hard => {
                    let gx = gd
                        .iter()
                        .zip(xv.data())
                        .map(|(&go, &v)| go * rsign_surrogate(v, p))
                        .collect();
                    out.push((*x, Tensor::new(xv.shape(), gx)?));
                    if needs(*a) || needs(*b) {
                        let (ga, gb) = rsign_param_grads(gd, xv.data(), p);
                        out.push((*a, Tensor::new(val(*a).shape(), vec![ga])?));
                        out.push((*b, Tensor::new(val(*b).shape(), vec![gb])?));
                    }
                }
                BinarizeMode::Relaxed => {
                    let mut gx = Vec::with_capacity(xv.len());
                    let (mut ga, mut gb) = (T::zero(), T::zero());
                    for (&go, &v) in gd.iter().zip(xv.data()) {
                        let (dx, da, db) = rsign_relaxed_grads(v, p);
                        gx.push(go * dx);
                        ga += go * da;
                        gb += go * db;
                    }
                    out.push((*x, Tensor::new(xv.shape(), gx)?));
                    out.push((*a, Tensor::new(val(*a).shape(), vec![ga])?));
                    out.push((*b, Tensor::new(val(*b).shape(), vec![gb])?));
                }
            }
        }
        Op::BinaryLinear { x, w, scales } => {
            let (xv, wv) = (val(*x), val(*w));
            let (rows, inp, outf) = (xv.rows(), xv.cols(), wv.shape()[0]);
            let weff = match tape.mode {
                BinarizeMode::Hard => weight_effective(wv.data(), scales, inp),
                BinarizeMode::Relaxed => weight_relaxed(wv.data(), scales, inp),
            };
            if needs(*x) {
                let mut gx = vec![T::zero(); xv.len()];
                matmul_acc(gd, &weff, &mut gx, rows, outf, inp);
                out.push((*x, Tensor::new(xv.shape(), gx)?));
            }
            if needs(*w) {
                let mut gwhat = vec![T::zero(); wv.len()];
                matmul_tn_acc(gd, xv.data(), &mut gwhat, rows, outf, inp);
                let mut gw = weight_binarize_backward(&gwhat, wv.data(), scales, inp);
                if tape.mode == BinarizeMode::Relaxed {
                    // exact derivative of the relaxed forward: add the path
                    // through the mean-|W| scale
                    let n = T::lit(inp as f64);
                    for ((gw_row, gh_row), w_row) in gw
                        .chunks_mut(inp)
                        .zip(gwhat.chunks(inp))
                        .zip(wv.data().chunks(inp))
                    {
                        let through_scale = gh_row
                            .iter()
                            .zip(w_row)
                            .map(|(&g, &v)| g * v.max(-T::one()).min(T::one()))
                            .sum::<T>()
                            / n;
                        for (g, &v) in gw_row.iter_mut().zip(w_row) {
                            *g += sign(v) * through_scale;
                        }
                    }
                }
                out.push((*w, Tensor::new(wv.shape(), gw)?));
            }
        }
        Op::Similarity {
            q,
            k,
            heads,
            tokens,
        } => {
            let (qv, kv) = (val(*q), val(*k));
            let (batch, c, d) = head_geometry(qv, *heads, *tokens)?;
            let n = *tokens;
            let mut gq = vec![T::zero(); qv.len()];
            let mut gk = vec![T::zero(); kv.len()];
            for b in 0..batch {
                for h in 0..*heads {
                    let base = (b * heads + h) * n * n;
                    for i in 0..n {
                        let qi = (b * n + i) * c + h * d;
                        for j in 0..n {
                            let s = gd[base + i * n + j];
                            if s == T::zero() {
                                continue;
                            }
                            let kj = (b * n + j) * c + h * d;
                            for e in 0..d {
                                gq[qi + e] += s * kv.data()[kj + e];
                                gk[kj + e] += s * qv.data()[qi + e];
                            }
                        }
                    }
                }
            }
            out.push((*q, Tensor::new(qv.shape(), gq)?));
            out.push((*k, Tensor::new(kv.shape(), gk)?));
        }
        Op::Softmax { x, scale } => {
            let y = node.value.data();
            let c = node.value.cols();
            let mut gx = vec![T::zero(); y.len()];
            for ((yr, gr), o) in y.chunks(c).zip(gd.chunks(c)).zip(gx.chunks_mut(c)) {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for ((o, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                    *o = *scale * yv * (gv - dot);
                }
            }
            out.push((*x, Tensor::new(val(*x).shape(), gx)?));
        }
        Op::AttBinarize { x, a, b } => {
            let p = binarizer(tape, *a, *b);
            let xv = val(*x);
            match tape.mode {
                BinarizeMode::Hard => {
                    let gx = gd
                        .iter()
                        .zip(xv.data())
                        .map(|(&go, &v)| go * att_surrogate(v, p))
                        .collect();
                    out.push((*x, Tensor::new(xv.shape(), gx)?));
                    if needs(*a) || needs(*b) {
                        let (ga, gb) = att_param_grads(gd, xv.data(), p);
                        out.push((*a, Tensor::new(val(*a).shape(), vec![ga])?));
                        out.push((*b, Tensor::new(val(*b).shape(), vec![gb])?));
                    }
                }
                BinarizeMode::Relaxed => {
                    let mut gx = Vec::with_capacity(xv.len());
                    let (mut ga, mut gb) = (T::zero(), T::zero());
                    for (&go, &v) in gd.iter().zip(xv.data()) {
                        let (dx, da, db) = att_relaxed_grads(v, p);
                        gx.push(go * dx);
                        ga += go * da;
                        gb += go * db;
                    }
                    out.push((*x, Tensor::new(xv.shape(), gx)?));
                    out.push((*a, Tensor::new(val(*a).shape(), vec![ga])?));
                    out.push((*b, Tensor::new(val(*b).shape(), vec![gb])?));
                }
            }
        }
        Op::AttnApply {
            att,
            v,
            heads,
            tokens,
        } => {
            let (av, vv) = (val(*att), val(*v));
            let (batch, c, d) = head_geometry(vv, *heads, *tokens)?;
            let n = *tokens;
            let mut ga = vec![T::zero(); av.len()];
            let mut gv = vec![T::zero(); vv.len()];
            for b in 0..batch {
                for h in 0..*heads {
                    let base = (b * heads + h) * n * n;
                    for i in 0..n {
                        let orow = (b * n + i) * c + h * d;
                        for j in 0..n {
                            let vrow = (b * n + j) * c + h * d;
                            let w = av.data()[base + i * n + j];
                            let mut acc = T::zero();
                            for e in 0..d {
                                let go = gd[orow + e];
                                acc += go * vv.data()[vrow + e];
                                gv[vrow + e] += w * go;
                            }
                            ga[base + i * n + j] = acc;
                        }
                    }
                }
            }
            out.push((*att, Tensor::new(av.shape(), ga)?));
            out.push((*v, Tensor::new(vv.shape(), gv)?));
        }
        Op::Stencil {
            x,
            kernel,
            height,
            width,
        } => {
            let (xv, kv) = (val(*x), val(*kernel));
            let tokens = height * width;
            let batch = xv.rows() / tokens;
            let taps: [T; 9] = std::array::from_fn(|i| kv.data()[i]);
            if needs(*x) {
                let mut gx = vec![T::zero(); xv.len()];
                stencil3x3_adjoint(gd, &mut gx, batch, *height, *width, xv.cols(), &taps);
                out.push((*x, Tensor::new(xv.shape(), gx)?));
            }
            if needs(*kernel) {
                let gk = stencil3x3_kernel_grad(xv.data(), gd, batch, *height, *width, xv.cols());
                out.push((*kernel, Tensor::new(kv.shape(), gk.to_vec())?));
            }
        }
        Op::Concat(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (c1, c2) = (av.cols(), bv.cols());
            let mut ga = Vec::with_capacity(av.len());
            let mut gb = Vec::with_capacity(bv.len());
            for row in gd.chunks(c1 + c2) {
                ga.extend_from_slice(&row[..c1]);
                gb.extend_from_slice(&row[c1..]);
            }
            out.push((*a, Tensor::new(av.shape(), ga)?));
            out.push((*b, Tensor::new(bv.shape(), gb)?));
        }
        Op::Activation {
            x,
            m,
            n,
            k,
            t,
            tokens,
        } => {
            let grads =
                backward_kernel(gd, val(*x).data(), val(*m).data(), val(*k).data(), *tokens);
            out.push((*x, Tensor::new(val(*x).shape(), grads.x)?));
            out.push((*m, Tensor::new(val(*m).shape(), grads.m)?));
            out.push((*n, Tensor::new(val(*n).shape(), grads.n)?));
            out.push((*k, Tensor::new(val(*k).shape(), grads.k)?));
            if let Some(t) = t {
                out.push((*t, Tensor::new(val(*t).shape(), grads.t)?));
            }
        }
        Op::MeanTokens { x, tokens } => {
            let xv = val(*x);
            let c = xv.cols();
            let inv = T::one() / T::lit(*tokens as f64);
            let mut gx = vec![T::zero(); xv.len()];
            for (r, row) in gx.chunks_mut(c).enumerate() {
                let src = &gd[(r / tokens) * c..][..c];
                for (o, &v) in row.iter_mut().zip(src) {
                    *o = v * inv;
                }
            }
            out.push((*x, Tensor::new(xv.shape(), gx)?));
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let lv = val(*logits);
            let classes = lv.cols();
            let scale = gd[0] / T::lit(labels.len() as f64);
            let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for (r, &l) in labels.iter().enumerate() {
                gl[r * classes + l] -= scale;
            }
            out.push((*logits, Tensor::new(lv.shape(), gl)?));
        }
        Op::SoftTargetKl {
            logits,
            target,
            probs,
        } => {
            let lv = val(*logits);
            let scale = gd[0] / T::lit(lv.rows() as f64);
            let gl = probs
                .iter()
                .zip(target)
                .map(|(&p, &t)| (p - t) * scale)
                .collect();
            out.push((*logits, Tensor::new(lv.shape(), gl)?));
        }
        Op::Sum(x) => out.push((*x, Tensor::full(val(*x).shape(), gd[0]))),
        Op::DotConst { x, weights } => {
            let gx = weights.iter().map(|&w| w * gd[0]).collect();
            out.push((*x, Tensor::new(val(*x).shape(), gx)?));
        }
    }
    Ok(out)
}
