//! Central-difference gradient verification.
//!
//! Used by the test suites and the `gradcheck` CLI command to compare
//! tape gradients against finite differences. Perturbations happen in
//! the parameters' native 32-bit representation; the divisor is the
//! actually realized step `(w + h) - (w - h)`, which removes the
//! rounding error the nominal `2h` would introduce.

use super::ParamStore;

/// Default perturbation size for 32-bit parameters.
pub const FD_STEP: f32 = 1e-3;

/// Central-difference gradient of `f` with respect to every listed
/// parameter, flattened in list order. `f` must be a pure function of
/// the store's current values (re-recording its tape on every call).
pub fn finite_difference_grad(
    store: &mut ParamStore,
    names: &[String],
    h: f32,
    f: &mut dyn FnMut(&ParamStore) -> f64,
) -> Vec<f64> {
    let mut grads = Vec::new();
    for name in names {
        let len = store.value(name).expect("gradcheck param exists").len();
        for i in 0..len {
            let w = store.value(name).unwrap().data()[i];
            let wp = w + h;
            let wm = w - h;
            let span = (wp as f64) - (wm as f64);
            store.value_mut(name).unwrap().data_mut()[i] = wp;
            let up = f(store);
            store.value_mut(name).unwrap().data_mut()[i] = wm;
            let down = f(store);
            store.value_mut(name).unwrap().data_mut()[i] = w;
            grads.push((up - down) / span);
        }
    }
    grads
}

/// Relative L2 error between two gradient vectors:
/// `||a - b|| / max(||a||, ||b||, 1e-12)`.
pub fn grad_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-12)
}

/// Flatten the accumulated analytic gradients of `names`, in list order.
pub fn collect_grads(store: &ParamStore, names: &[String]) -> Vec<f64> {
    let mut out = Vec::new();
    for name in names {
        for &g in store.grad(name).expect("gradcheck param exists").data() {
            out.push(g as f64);
        }
    }
    out
}
