use std::sync::Arc;

use crate::{Tensor, TensorError};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Arc<Tensor>,
    pub grad: Option<Tensor>,
    pub requires_grad: bool,
}

/// Ordered, named collection of parameters. Insertion order is the
/// canonical order used by the optimizer and by checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new trainable parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name,
            value: Arc::new(value),
            grad: None,
            requires_grad: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    /// Mutable access to a parameter value. Clones the buffer if a tape still holds it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `scale · grad` into the parameter's gradient buffer.
    pub fn accumulate_grad(
        &mut self,
        id: ParamId,
        grad: &[f64],
        scale: f64,
    ) -> Result<(), TensorError> {
        let p = &mut self.params[id.0];
        if grad.len() != p.value.len() {
            return Err(TensorError::Dimension {
                op: "accumulate_grad",
                lhs: p.value.shape().to_vec(),
                rhs: vec![grad.len()],
            });
        }
        let buf = p
            .grad
            .get_or_insert_with(|| Tensor::zeros(p.value.shape().to_vec()));
        for (b, g) in buf.data_mut().iter_mut().zip(grad) {
            *b += scale * g;
        }
        Ok(())
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<(), TensorError> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(TensorError::Dimension {
                op: "set_value",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = Arc::new(value);
        Ok(())
    }
}
