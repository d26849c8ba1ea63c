//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every step. Each recorded node keeps its forward
//! value and an [`Op`] naming its inputs and whatever context its backward
//! rule needs. [`Tape::backward`] walks the nodes once in reverse creation
//! order and accumulates input gradients in node-index order, which keeps
//! results bit-reproducible on a single thread.
//!
//! Binarizing ops carry straight-through rules. In [`BinarizeMode::Relaxed`]
//! the same ops switch to smooth forwards whose true derivative equals those
//! rules, so the whole graph can be checked against finite differences.

mod ops;
mod optim;
mod params;

pub use ops::Band;
pub use optim::{cosine_lr, AdamW, AdamWConfig, DEFAULT_LR};
pub use params::{ParamId, ParamKind, ParamStore, Parameter};

use crate::{Error, Real, Result, Tensor};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BinarizeMode {
    /// Hard quantizers forward, straight-through rules backward.
    #[default]
    Hard,
    /// Smooth surrogate forwards; gradients are exact derivatives.
    Relaxed,
}

/// Recorded operation and its saved context.
#[derive(Clone, Debug)]
pub enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    /// Tensor times a one-element node.
    MulScalar(Var, Var),
    /// One-element quotient.
    DivScalar(Var, Var),
    /// `x + p` with `p` repeated to fill `x`.
    AddTiled(Var, Var),
    /// `x · wᵀ`, full precision.
    Linear(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    RSign {
        x: Var,
        a: Var,
        b: Var,
    },
    /// `x̂ · Ŵᵀ` with `Ŵ = G ⊙ sign(W)`; `scales` holds `G`.
    BinaryLinear {
        x: Var,
        w: Var,
        scales: Vec<T>,
    },
    Similarity {
        q: Var,
        k: Var,
        heads: usize,
        tokens: usize,
    },
    Softmax {
        x: Var,
        scale: T,
    },
    AttBinarize {
        x: Var,
        a: Var,
        b: Var,
    },
    AttnApply {
        att: Var,
        v: Var,
        heads: usize,
        tokens: usize,
    },
    Stencil {
        x: Var,
        kernel: Var,
        height: usize,
        width: usize,
    },
    Concat(Var, Var),
    Activation {
        x: Var,
        m: Var,
        n: Var,
        k: Var,
        t: Option<Var>,
        tokens: usize,
    },
    MeanTokens {
        x: Var,
        tokens: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    SoftTargetKl {
        logits: Var,
        target: Vec<T>,
        probs: Vec<T>,
    },
    Sum(Var),
    DotConst {
        x: Var,
        weights: Vec<T>,
    },
}

impl<T> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MulScalar(..) => "mul_scalar",
            Op::DivScalar(..) => "div_scalar",
            Op::AddTiled(..) => "add_tiled",
            Op::Linear(..) => "linear",
            Op::LayerNorm { .. } => "layer_norm",
            Op::RSign { .. } => "rsign",
            Op::BinaryLinear { .. } => "binary_linear",
            Op::Similarity { .. } => "similarity",
            Op::Softmax { .. } => "softmax",
            Op::AttBinarize { .. } => "att_binarize",
            Op::AttnApply { .. } => "attn_apply",
            Op::Stencil { .. } => "stencil",
            Op::Concat(..) => "concat",
            Op::Activation { .. } => "activation",
            Op::MeanTokens { .. } => "mean_tokens",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SoftTargetKl { .. } => "soft_target_kl",
            Op::Sum(..) => "sum",
            Op::DotConst { .. } => "dot_const",
        }
    }

    /// Input nodes in argument order.
    pub fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MulScalar(a, b)
            | Op::DivScalar(a, b)
            | Op::AddTiled(a, b)
            | Op::Linear(a, b)
            | Op::Concat(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Sum(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::RSign { x, a, b } | Op::AttBinarize { x, a, b } => vec![*x, *a, *b],
            Op::BinaryLinear { x, w, .. } => vec![*x, *w],
            Op::Similarity { q, k, .. } => vec![*q, *k],
            Op::Softmax { x, .. } | Op::MeanTokens { x, .. } | Op::DotConst { x, .. } => vec![*x],
            Op::AttnApply { att, v, .. } => vec![*att, *v],
            Op::Stencil { x, kernel, .. } => vec![*x, *kernel],
            Op::Activation { x, m, n, k, t, .. } => {
                let mut v = vec![*x, *m, *n, *k];
                v.extend(t.iter().copied());
                v
            }
            Op::CrossEntropy { logits, .. } | Op::SoftTargetKl { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
    pub param: Option<ParamId>,
}

#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    mode: BinarizeMode,
    sealed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new(BinarizeMode::Hard)
    }
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` if nothing reached it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl<T: Real> Tape<T> {
    pub fn new(mode: BinarizeMode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            sealed: false,
        }
    }

    pub fn mode(&self) -> BinarizeMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.sealed {
            return Err(Error::TapeSealed);
        }
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(
        &mut self,
        value: Tensor<T>,
        requires_grad: bool,
        param: Option<ParamId>,
    ) -> Result<Var> {
        if self.sealed {
            return Err(Error::TapeSealed);
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A differentiable input that is not a stored parameter.
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true, None)
    }

    /// A constant; no gradient is ever computed for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false, None)
    }

    /// A leaf holding a copy of a stored parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        let p = store.get(id);
        self.leaf(p.value.clone(), p.trainable, Some(id))
    }

    /// Reverse pass from a scalar `loss`. Seals the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.sealed {
            return Err(Error::TapeSealed);
        }
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.sealed = true;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(&shape, T::one()));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            let contributions = ops::backward(self, idx, &g)?;
            for (input, contrib) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds every parameter leaf's gradient into the store.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, grads.grads[i].as_ref()) {
                store.accumulate(id, g)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
