//! Named parameter storage.
//!
//! Model modules do not own their weights; they hold [`ParamId`] handles
//! into a [`ParamStore`] that is created once at model-build time. This
//! gives a single flat, ordered view of every trainable tensor, which is
//! what the optimizer (fixed update order), the checkpoint format (named
//! tensors) and the parameter census all iterate over.

use crate::error::Error;
use crate::num::Scalar;
use crate::tensor::Tensor;
use crate::Result;

/// Index of a parameter in its store. Creation order is update order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Flat ordered collection of named trainable tensors.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }

    /// Register a tensor under a unique dotted name, e.g.
    /// `"backbone.enc0.block0.conv1.w"`.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    /// Look up a parameter by its registered name.
    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Iterate `(name, tensor)` in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    /// Total element count across all parameters.
    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Element count restricted to names starting with `prefix`.
    pub fn elements_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Overwrite every tensor from a same-named source (checkpoint load).
    /// Errors if a name is missing or a shape differs.
    pub fn load_values(
        &mut self,
        mut lookup: impl FnMut(&str) -> Option<Tensor<T>>,
    ) -> Result<()> {
        for i in 0..self.tensors.len() {
            let name = self.names[i].clone();
            let src = lookup(&name).ok_or_else(|| {
                Error::Format { path: String::new(), detail: format!("missing parameter `{name}`") }
            })?;
            if src.shape() != self.tensors[i].shape() {
                return Err(Error::Format {
                    path: String::new(),
                    detail: format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        src.shape(),
                        self.tensors[i].shape()
                    ),
                });
            }
            let rg = self.tensors[i].requires_grad;
            self.tensors[i] = src;
            self.tensors[i].requires_grad = rg;
        }
        Ok(())
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registration_order_is_stable() {
        let mut s = ParamStore::<f32>::new();
        let a = s.add("a", Tensor::zeros(vec![2]));
        let b = s.add("b.w", Tensor::zeros(vec![3]));
        assert_eq!(a, ParamId(0));
        assert_eq!(b, ParamId(1));
        assert_eq!(s.name(b), "b.w");
        assert_eq!(s.find("a"), Some(a));
        assert_eq!(s.find("missing"), None);
        assert_eq!(s.total_elements(), 5);
    }

    #[test]
    fn prefix_census_counts() {
        let mut s = ParamStore::<f32>::new();
        s.add("backbone.c1", Tensor::zeros(vec![4, 4]));
        s.add("backbone.c2", Tensor::zeros(vec![4]));
        s.add("pip.0.bank", Tensor::zeros(vec![3, 8]));
        assert_eq!(s.elements_with_prefix("backbone."), 20);
        assert_eq!(s.elements_with_prefix("pip."), 24);
    }

    #[test]
    fn load_values_checks_names_and_shapes() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", Tensor::zeros(vec![2, 2]));
        // Wrong shape is rejected.
        let bad = s.load_values(|_| Some(Tensor::full(vec![3], 1.0)));
        assert!(bad.is_err());
        // Matching shape lands.
        s.load_values(|_| Some(Tensor::full(vec![2, 2], 1.5))).unwrap();
        assert_eq!(s.get(ParamId(0)).data(), &[1.5; 4]);
        assert!(s.get(ParamId(0)).requires_grad);
    }
}
