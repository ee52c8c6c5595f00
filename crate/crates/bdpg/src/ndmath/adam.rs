//! Adam optimizer over a named parameter group.

use super::{NdError, ParamStore};

/// First/second-moment state for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Slot {
    pub name: String,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Adam with bias correction, owning moment buffers for every parameter
/// whose name falls under one of the dotted group prefixes it was built
/// with. Each network (policy, encoder, ...) gets its own instance so
/// learning rates and step counts stay independent.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub(crate) step: u64,
    pub(crate) slots: Vec<Slot>,
}

impl Adam {
    /// Standard coefficients: beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new(store: &ParamStore, prefixes: &[&str]) -> Self {
        Adam::with_coefficients(store, prefixes, 0.9, 0.999, 1e-8)
    }

    pub fn with_coefficients(
        store: &ParamStore,
        prefixes: &[&str],
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Self {
        let mut slots = Vec::new();
        for prefix in prefixes {
            for name in store.group_names(prefix) {
                let len = store.value(&name).expect("group name exists").len();
                slots.push(Slot {
                    name,
                    m: vec![0.0; len],
                    v: vec![0.0; len],
                });
            }
        }
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            slots,
        }
    }

    pub(crate) fn from_parts(
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: u64,
        slots: Vec<Slot>,
    ) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            step,
            slots,
        }
    }

    /// Number of scalar parameters this optimizer covers.
    pub fn num_scalars(&self) -> usize {
        self.slots.iter().map(|s| s.m.len()).sum()
    }

    /// Apply one update using the gradients currently accumulated in
    /// `store`. Rejects non-finite gradients before touching any state,
    /// so a failed step leaves parameters and moments unchanged.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<(), NdError> {
        for slot in &self.slots {
            let grad = store.grad(&slot.name)?;
            if grad.data().iter().any(|g| !g.is_finite()) {
                return Err(NdError::NanGradient {
                    param: slot.name.clone(),
                });
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for slot in &mut self.slots {
            let grad = store.grad(&slot.name)?.data().to_vec();
            let value = store.value_mut(&slot.name)?.data_mut();
            for i in 0..grad.len() {
                let g = grad[i] as f64;
                let m = self.beta1 * slot.m[i] as f64 + (1.0 - self.beta1) * g;
                let v = self.beta2 * slot.v[i] as f64 + (1.0 - self.beta2) * g * g;
                slot.m[i] = m as f32;
                slot.v[i] = v as f32;
                let update = lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
                value[i] = (value[i] as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndmath::Array;

    fn one_param_store(g: f32) -> ParamStore {
        let mut store = ParamStore::new();
        store.add("net.w", Array::scalar(1.0)).unwrap();
        store.accumulate_grad("net.w", &[g as f64]).unwrap();
        store
    }

    #[test]
    fn first_step_moves_by_roughly_lr() {
        let mut store = one_param_store(1.0);
        let mut adam = Adam::new(&store, &["net"]);
        adam.step(&mut store, 0.01).unwrap();
        let w = store.value("net.w").unwrap().data()[0];
        // Bias correction makes the first update lr / (1 + eps).
        assert!((w - 0.99).abs() < 1e-6, "w = {w}");
    }

    #[test]
    fn nan_gradient_is_rejected_by_name() {
        let mut store = one_param_store(f32::NAN);
        let mut adam = Adam::new(&store, &["net"]);
        let err = adam.step(&mut store, 0.01).unwrap_err();
        assert_eq!(
            err,
            NdError::NanGradient {
                param: "net.w".to_string()
            }
        );
        // The failed step must not have touched the parameter.
        assert_eq!(store.value("net.w").unwrap().data(), &[1.0]);
    }

    #[test]
    fn only_covered_groups_are_updated() {
        let mut store = ParamStore::new();
        store.add("a.w", Array::scalar(1.0)).unwrap();
        store.add("b.w", Array::scalar(1.0)).unwrap();
        store.accumulate_grad("a.w", &[1.0]).unwrap();
        store.accumulate_grad("b.w", &[1.0]).unwrap();
        let mut adam = Adam::new(&store, &["a"]);
        adam.step(&mut store, 0.1).unwrap();
        assert!(store.value("a.w").unwrap().data()[0] < 1.0);
        assert_eq!(store.value("b.w").unwrap().data(), &[1.0]);
    }

    #[test]
    fn zero_gradient_keeps_parameters_fixed() {
        let mut store = ParamStore::new();
        store.add("net.w", Array::scalar(0.5)).unwrap();
        let mut adam = Adam::new(&store, &["net"]);
        adam.step(&mut store, 0.1).unwrap();
        assert_eq!(store.value("net.w").unwrap().data(), &[0.5]);
    }
}
