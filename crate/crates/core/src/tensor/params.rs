use super::{Graph, Scalar, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors with matching gradient buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Vec<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.grads.push(vec![T::zero(); value.len()]);
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalars across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.grads[id.0]
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_and_grads_mut(&mut self) -> (&mut [Tensor<T>], &[Vec<T>]) {
        (&mut self.values, &self.grads)
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Registers every parameter on the graph as a tracked leaf; the returned
    /// vector is indexed by [`ParamId::index`].
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.values.iter().map(|t| g.param(t.clone())).collect()
    }

    /// Adds the graph gradients of bound leaves into the gradient buffers.
    /// Returns how many parameters actually received a gradient.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, bound: &[Var]) -> usize {
        let mut touched = 0;
        for (buf, &v) in self.grads.iter_mut().zip(bound) {
            if let Some(src) = g.grad(v) {
                buf.iter_mut().zip(src).for_each(|(b, &s)| *b += s);
                touched += 1;
            }
        }
        touched
    }

    /// Replaces values from `(name, tensor)` pairs; every parameter must be
    /// present with a matching shape.
    pub fn load_named(&mut self, entries: &[(String, Tensor<T>)]) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let (_, t) = entries
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != self.values[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} in file, model expects {:?}",
                    t.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = t.clone();
        }
        Ok(())
    }
}
