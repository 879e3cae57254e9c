use super::{Element, Gradients, Graph, Result, Tensor, TensorError, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered collection of named trainable tensors.
///
/// Insertion order is the canonical order used by optimizers and
/// checkpoints.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Adds a parameter; it is marked as requiring gradients.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(TensorError::Invalid {
                op: "ParamStore::insert",
                reason: format!("duplicate parameter name `{name}`"),
            });
        }
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `graph`; the returned vector is indexed
    /// by [`ParamId`].
    pub fn bind<'p>(&'p self, graph: &Graph<'p, T>) -> Vec<Var> {
        self.tensors.iter().map(|t| graph.param(t)).collect()
    }

    /// Adds `scale * d(loss)/d(param)` into each parameter's gradient
    /// buffer. `bound` must come from [`ParamStore::bind`].
    pub fn accumulate(&mut self, bound: &[Var], grads: &Gradients<T>, scale: T) -> Result<()> {
        for (tensor, &var) in self.tensors.iter_mut().zip(bound) {
            if let Some(g) = grads.wrt(var) {
                tensor.accumulate_grad(g, scale)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Checks that `other` has the same names and shapes, in order.
    pub fn check_same_layout(&self, other: &ParamStore<T>) -> Result<()> {
        if self.names != other.names {
            return Err(TensorError::Invalid {
                op: "ParamStore layout",
                reason: "parameter names differ".into(),
            });
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "ParamStore layout",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Copies values (not gradients) from a store with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        self.check_same_layout(other)?;
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_rejects_duplicates_and_marks_trainable() {
        let mut store = ParamStore::<f32>::new();
        let id = store.insert("w", Tensor::zeros(&[2, 2])).unwrap();
        assert!(store.get(id).requires_grad());
        assert!(store.insert("w", Tensor::zeros(&[1])).is_err());
        assert_eq!(store.find("w"), Some(id));
        assert_eq!(store.num_scalars(), 4);
    }
}
