use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::binarize::clamp_scale;
use crate::{Error, Real, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the optimizer treats a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Weight matrix; receives weight decay.
    Weight,
    /// Bias, norm affine, activation shift: no decay.
    Free,
    /// Binarizer scale `a`: no decay, clamped to `MIN_SCALE` after a step.
    Scale,
    /// Scalar that must stay `≥ 0` (attention path scales).
    NonNegative,
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
    pub kind: ParamKind,
}

/// Ordered parameter collection; order is creation order and fixes both the
/// optimizer's update order and checkpoint layout.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> ParamId {
        self.push(name.into(), value, kind, true)
    }

    /// A parameter the optimizer never touches and that never accumulates.
    pub fn add_frozen(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, ParamKind::Free, false)
    }

    fn push(
        &mut self,
        name: String,
        value: Tensor<T>,
        kind: ParamKind,
        trainable: bool,
    ) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            value,
            grad,
            trainable,
            kind,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn scalar(&self, id: ParamId) -> T {
        self.params[id.0].value.item()
    }

    pub fn set_scalar(&mut self, id: ParamId, v: T) {
        self.params[id.0].value.data_mut()[0] = v;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds `g` into the gradient of `id`; frozen parameters ignore it.
    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if !p.trainable {
            return Ok(());
        }
        if p.grad.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient {:?} for parameter {} of shape {:?}",
                g.shape(),
                p.name,
                p.grad.shape()
            )));
        }
        p.grad.add_assign(g);
        Ok(())
    }

    /// Number of scalar elements across trainable parameters.
    pub fn trainable_elements(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Apply per-kind constraints after an update.
    pub fn enforce_constraints(&mut self) {
        for p in &mut self.params {
            match p.kind {
                ParamKind::Scale => p
                    .value
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = clamp_scale(*v)),
                ParamKind::NonNegative => p
                    .value
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = v.max(T::zero())),
                ParamKind::Weight | ParamKind::Free => {}
            }
        }
    }

    /// Hash of a parameter's exact bit pattern.
    pub fn fingerprint(&self, id: ParamId) -> u64 {
        let mut h = DefaultHasher::new();
        let p = &self.params[id.0];
        p.value.shape().hash(&mut h);
        for v in p.value.data() {
            v.as_f64().to_bits().hash(&mut h);
        }
        h.finish()
    }
}
