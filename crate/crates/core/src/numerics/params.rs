use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Gradients keyed by parameter path.
pub type GradMap = BTreeMap<String, Tensor>;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

/// Every learnable array of a model, addressed by a dotted path such as
/// `encoder.layer0.wq`. Iteration order is the lexicographic path order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert or replace a parameter; its gradient accumulator is reset.
    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) {
        let grad = Tensor::zeros(value.shape());
        self.entries.insert(path.into(), Param { value, grad });
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn value(&self, path: &str) -> Result<&Tensor> {
        self.entries
            .get(path)
            .map(|p| &p.value)
            .ok_or_else(|| Error::MissingParam(path.to_string()))
    }

    pub fn value_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(path)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::MissingParam(path.to_string()))
    }

    pub fn grad(&self, path: &str) -> Result<&Tensor> {
        self.entries
            .get(path)
            .map(|p| &p.grad)
            .ok_or_else(|| Error::MissingParam(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Param> {
        self.entries.get_mut(path)
    }

    /// Add `delta` into the gradient accumulator of `path`.
    pub fn accumulate(&mut self, path: &str, delta: &Tensor) -> Result<()> {
        let p = self
            .entries
            .get_mut(path)
            .ok_or_else(|| Error::MissingParam(path.to_string()))?;
        if p.grad.shape() != delta.shape() {
            return Err(Error::shape(
                "accumulate",
                format!(
                    "gradient {:?} does not match parameter `{path}` {:?}",
                    delta.shape(),
                    p.grad.shape()
                ),
            ));
        }
        p.grad.add_assign(delta);
        Ok(())
    }

    pub fn accumulate_all(&mut self, grads: &GradMap) -> Result<()> {
        for (path, g) in grads {
            self.accumulate(path, g)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    /// Global L2 norm of the accumulated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grads_clears_every_accumulator() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::ones(&[2, 3]));
        store.insert("b", Tensor::ones(&[4]));
        store.accumulate("a", &Tensor::full(&[2, 3], 0.5)).unwrap();
        store.accumulate("b", &Tensor::full(&[4], -2.0)).unwrap();
        store.zero_grads();
        for (_, p) in store.iter() {
            assert_eq!(p.grad.shape(), p.value.shape());
            assert!(p.grad.data().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn accumulate_rejects_shape_mismatch() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::ones(&[2, 2]));
        assert!(store.accumulate("w", &Tensor::ones(&[4])).is_err());
        assert!(matches!(
            store.accumulate("missing", &Tensor::ones(&[4])),
            Err(Error::MissingParam(_))
        ));
    }
}
