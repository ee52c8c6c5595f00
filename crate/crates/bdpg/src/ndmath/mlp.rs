//! Multilayer perceptron construction on top of the tape.
//!
//! Networks are described by an [`MlpSpec`] (layer widths plus hidden and
//! output activations), registered into a [`ParamStore`] under a dotted
//! prefix (`enc.w0`, `enc.b0`, ...), and replayed onto a [`Tape`] per
//! forward pass. The same spec/prefix pair must be used for both steps.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Array, NdError, NodeId, ParamStore, Tape};

/// Pointwise nonlinearity applied between (or after) layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Softplus,
}

impl Activation {
    fn apply(self, tape: &mut Tape, id: NodeId) -> NodeId {
        match self {
            Activation::Identity => id,
            Activation::Relu => tape.relu(id),
            Activation::Tanh => tape.tanh(id),
            Activation::Softplus => tape.softplus(id),
        }
    }
}

/// Fully-connected network shape: `sizes` runs input width through every
/// hidden width to the output width, so `sizes.len() >= 2`.
#[derive(Debug, Clone)]
pub struct MlpSpec {
    pub sizes: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl MlpSpec {
    pub fn new(sizes: Vec<usize>, hidden: Activation, output: Activation) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output widths");
        assert!(sizes.iter().all(|&s| s > 0), "zero-width MLP layer");
        MlpSpec {
            sizes,
            hidden,
            output,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().unwrap()
    }
}

/// Register Xavier-uniform weights and zero biases for `spec` under
/// `prefix`. With `zero_final` the last layer's weights start at zero as
/// well, which pins the network's initial output to exactly zero — used
/// for policy heads so the untrained policy is uniform.
pub fn init_mlp(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    spec: &MlpSpec,
    zero_final: bool,
) -> Result<(), NdError> {
    for layer in 0..spec.num_layers() {
        let fan_in = spec.sizes[layer];
        let fan_out = spec.sizes[layer + 1];
        let weights = if zero_final && layer == spec.num_layers() - 1 {
            Array::zeros(&[fan_in, fan_out])
        } else {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..=bound) as f32)
                .collect();
            Array::from_vec(&[fan_in, fan_out], data)?
        };
        store.add(&format!("{prefix}.w{layer}"), weights)?;
        store.add(&format!("{prefix}.b{layer}"), Array::zeros(&[1, fan_out]))?;
    }
    Ok(())
}

/// Replay the network under `prefix` onto `tape`, starting from `input`
/// (shape `[batch, spec.input_width()]`). With `frozen = true` every
/// parameter enters as a constant, cutting all gradient paths into this
/// network.
pub fn forward_mlp(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    spec: &MlpSpec,
    input: NodeId,
    frozen: bool,
) -> Result<NodeId, NdError> {
    let mut x = input;
    for layer in 0..spec.num_layers() {
        let name_w = format!("{prefix}.w{layer}");
        let expected = spec.sizes[layer];
        let got = tape.dims(x).1;
        if got != expected {
            return Err(NdError::LayerShapeMismatch {
                layer: name_w,
                expected,
                got,
            });
        }
        let w = tape.param(store, &name_w, frozen)?;
        let b = tape.param(store, &format!("{prefix}.b{layer}"), frozen)?;
        x = tape.matmul(x, w);
        x = tape.add_row(x, b);
        let act = if layer + 1 == spec.num_layers() {
            spec.output
        } else {
            spec.hidden
        };
        x = act.apply(tape, x);
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn spec_2_4_3() -> MlpSpec {
        MlpSpec::new(vec![2, 4, 3], Activation::Tanh, Activation::Identity)
    }

    #[test]
    fn init_registers_weights_and_biases_in_order() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        init_mlp(&mut store, &mut rng, "net", &spec_2_4_3(), false).unwrap();
        let names: Vec<&str> = store.names().collect();
        assert_eq!(names, vec!["net.w0", "net.b0", "net.w1", "net.b1"]);
        assert_eq!(store.value("net.w0").unwrap().shape(), &[2, 4]);
        assert_eq!(store.value("net.b1").unwrap().shape(), &[1, 3]);
    }

    #[test]
    fn zero_final_head_outputs_exactly_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        init_mlp(&mut store, &mut rng, "pi", &spec_2_4_3(), true).unwrap();
        let mut tape = Tape::new();
        let input = tape.constant_parts(5, 2, vec![0.3; 10]);
        let out = forward_mlp(&mut tape, &store, "pi", &spec_2_4_3(), input, false).unwrap();
        assert!(tape.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_input_width_names_the_layer() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        init_mlp(&mut store, &mut rng, "net", &spec_2_4_3(), false).unwrap();
        let mut tape = Tape::new();
        let input = tape.constant_parts(1, 5, vec![0.0; 5]);
        let err = forward_mlp(&mut tape, &store, "net", &spec_2_4_3(), input, false).unwrap_err();
        assert_eq!(
            err,
            NdError::LayerShapeMismatch {
                layer: "net.w0".to_string(),
                expected: 2,
                got: 5
            }
        );
    }

    #[test]
    fn same_seed_reproduces_initialization() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        let mut rng_a = ChaCha8Rng::seed_from_u64(42);
        let mut rng_b = ChaCha8Rng::seed_from_u64(42);
        init_mlp(&mut a, &mut rng_a, "net", &spec_2_4_3(), false).unwrap();
        init_mlp(&mut b, &mut rng_b, "net", &spec_2_4_3(), false).unwrap();
        assert_eq!(
            a.value("net.w0").unwrap().data(),
            b.value("net.w0").unwrap().data()
        );
    }
}
