use super::{Gradients, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<F = f32> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Option<Vec<F>>,
}

/// Named trainable tensors plus their gradient buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F = f32> {
    params: Vec<Param<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&[F]> {
        self.params[id.0].grad.as_deref()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Populates every gradient buffer with zeros.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            match &mut p.grad {
                Some(g) => g.iter_mut().for_each(|x| *x = F::zero()),
                None => p.grad = Some(vec![F::zero(); p.value.numel()]),
            }
        }
    }

    pub fn clear_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds the gradients of every parameter leaf recorded in `grads`.
    pub fn accumulate(&mut self, grads: &Gradients<F>) {
        for (id, g) in grads.param_grads() {
            let p = &mut self.params[id.0];
            match &mut p.grad {
                Some(buf) => buf.iter_mut().zip(g.data()).for_each(|(b, &x)| *b = *b + x),
                None => p.grad = Some(g.data().to_vec()),
            }
        }
    }

    /// Copy with every tensor converted to another element type.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: None,
                })
                .collect(),
        }
    }

    /// Replaces the values of `self` with those of `other`, matching by position.
    pub fn load_values(&mut self, other: &ParamStore<F>) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Shape {
                op: "load_values",
                lhs: vec![self.params.len()],
                rhs: vec![other.params.len()],
            });
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.value.shape() != src.value.shape() || dst.name != src.name {
                return Err(Error::Shape {
                    op: "load_values",
                    lhs: dst.value.shape().to_vec(),
                    rhs: src.value.shape().to_vec(),
                });
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}
