use std::collections::BTreeMap;

use crate::error::{invalid, Result};
use crate::Tensor;

/// Named trainable arrays.
///
/// Names are unique and iteration is in lexicographic name order, so every
/// consumer (optimizers, serializers, gradient reductions) sees parameters in
/// the same deterministic order. A shape is fixed once a name is inserted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    arrays: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a new parameter. Fails if the name is already taken.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.arrays.contains_key(&name) {
            return invalid(format!("duplicate parameter name `{name}`"));
        }
        self.arrays.insert(name, value);
        Ok(())
    }

    /// Overwrites an existing parameter with a value of the same shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.arrays.get_mut(name) {
            None => invalid(format!("unknown parameter `{name}`")),
            Some(slot) if slot.dim() != value.dim() => invalid(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                slot.dim(),
                value.dim()
            )),
            Some(slot) => {
                *slot = value;
                Ok(())
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.arrays.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.arrays.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    /// Total number of scalar entries over all parameters.
    pub fn num_scalars(&self) -> usize {
        self.arrays.values().map(|a| a.len()).sum()
    }

    /// A store with the same names and shapes, all zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            arrays: self
                .arrays
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.dim())))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn names_are_unique() {
        let mut p = ParamStore::new();
        p.insert("a", array![[1.0]]).unwrap();
        assert!(p.insert("a", array![[2.0]]).is_err());
    }

    #[test]
    fn shapes_are_fixed() {
        let mut p = ParamStore::new();
        p.insert("a", array![[1.0, 2.0]]).unwrap();
        assert!(p.set("a", array![[1.0]]).is_err());
        p.set("a", array![[3.0, 4.0]]).unwrap();
        assert_eq!(p.get("a").unwrap(), &array![[3.0, 4.0]]);
    }

    #[test]
    fn iteration_is_sorted() {
        let mut p = ParamStore::new();
        p.insert("b", array![[1.0]]).unwrap();
        p.insert("a", array![[1.0]]).unwrap();
        assert_eq!(p.names().collect::<Vec<_>>(), vec!["a", "b"]);
    }
}
