//! Named parameter storage with per-parameter gradient accumulators.

use std::collections::HashMap;

use super::{Array, NdError};

struct Entry {
    name: String,
    value: Array,
    grad: Array,
}

/// Flat collection of named parameters. Iteration order is insertion
/// order, which makes checkpoints and optimizer sweeps deterministic.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Register a parameter. Names must be unique for the store's lifetime.
    pub fn add(&mut self, name: &str, value: Array) -> Result<(), NdError> {
        if self.index.contains_key(name) {
            return Err(NdError::DuplicateParam {
                name: name.to_string(),
            });
        }
        let grad = Array::zeros(value.shape());
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            grad,
        });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn value(&self, name: &str) -> Result<&Array, NdError> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].value)
            .ok_or_else(|| NdError::UnknownParam {
                name: name.to_string(),
            })
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Array, NdError> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].value),
            None => Err(NdError::UnknownParam {
                name: name.to_string(),
            }),
        }
    }

    pub fn grad(&self, name: &str) -> Result<&Array, NdError> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].grad)
            .ok_or_else(|| NdError::UnknownParam {
                name: name.to_string(),
            })
    }

    /// Add `delta` into the gradient accumulator for `name`.
    pub fn accumulate_grad(&mut self, name: &str, delta: &[f64]) -> Result<(), NdError> {
        let i = *self.index.get(name).ok_or_else(|| NdError::UnknownParam {
            name: name.to_string(),
        })?;
        let grad = self.entries[i].grad.data_mut();
        debug_assert_eq!(grad.len(), delta.len());
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += *d as f32;
        }
        Ok(())
    }

    /// Reset every gradient accumulator to zero.
    pub fn zero_grads(&mut self) {
        for entry in &mut self.entries {
            entry.grad.data_mut().fill(0.0);
        }
    }

    /// Parameter names in insertion order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Names under a dotted group prefix, e.g. `group_names("enc")`
    /// yields every `enc.*` parameter in insertion order.
    pub fn group_names(&self, prefix: &str) -> Vec<String> {
        let needle = format!("{prefix}.");
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(&needle))
            .map(|e| e.name.clone())
            .collect()
    }

    /// `(name, value, grad)` triples in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array, &Array)> {
        self.entries
            .iter()
            .map(|e| (e.name.as_str(), &e.value, &e.grad))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Array::scalar(1.0)).unwrap();
        let err = store.add("w", Array::scalar(2.0)).unwrap_err();
        assert_eq!(
            err,
            NdError::DuplicateParam {
                name: "w".to_string()
            }
        );
    }

    #[test]
    fn grads_start_zero_and_accumulate() {
        let mut store = ParamStore::new();
        store
            .add("w", Array::from_vec(&[2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        assert_eq!(store.grad("w").unwrap().data(), &[0.0, 0.0]);
        store.accumulate_grad("w", &[0.5, -1.0]).unwrap();
        store.accumulate_grad("w", &[0.5, -1.0]).unwrap();
        assert_eq!(store.grad("w").unwrap().data(), &[1.0, -2.0]);
        store.zero_grads();
        assert_eq!(store.grad("w").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn group_names_filters_by_dotted_prefix() {
        let mut store = ParamStore::new();
        store.add("enc.w0", Array::scalar(0.0)).unwrap();
        store.add("encoder.w0", Array::scalar(0.0)).unwrap();
        store.add("enc.b0", Array::scalar(0.0)).unwrap();
        assert_eq!(store.group_names("enc"), vec!["enc.w0", "enc.b0"]);
    }
}
