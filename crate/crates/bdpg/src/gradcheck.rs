//! Randomized finite-difference audit of every trainable loss.
//!
//! Each check builds a fresh random instance — shapes, data, and a
//! parameter perturbation — computes analytic gradients through the
//! tape, recomputes them by central differences, and keeps the worst
//! relative error per loss family. The binary's `gradcheck` subcommand
//! and the gradient acceptance gate both run this suite. Instances use
//! constant shape ranges that satisfy every constructor contract, so
//! construction failures in here are bugs, not inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ndmath::{
    collect_grads, finite_difference_grad, grad_relative_error, Array, NodeId, ParamStore, Tape,
    FD_STEP,
};
use crate::policy::{Action, ActionSpace, PolicyNet};
use crate::return_model::{sample_minibatch_noise, states_to_array, MinibatchNoise, ReturnModel};
use crate::trainer::QrHead;

/// Largest relative error any loss family may show.
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Worst observed relative error for one loss family.
#[derive(Debug, Clone, PartialEq)]
pub struct LossCheck {
    pub loss: &'static str,
    pub instances: usize,
    pub worst_rel_err: f64,
}

impl LossCheck {
    pub fn passed(&self) -> bool {
        self.worst_rel_err < GRADCHECK_TOL
    }
}

/// Run `instances` randomized checks per loss family; deterministic in
/// `seed`. Report order is fixed: discriminator, encoder/prior,
/// reconstruction, ppo, quantile Huber.
pub fn run_suite(instances: usize, seed: u64) -> Vec<LossCheck> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let families: [(&'static str, fn(&mut ChaCha8Rng) -> f64); 5] = [
        ("discriminator", check_discriminator),
        ("encoder_prior", check_encoder_prior),
        ("reconstruction", check_reconstruction),
        ("ppo", check_ppo),
        ("qr_huber", check_qr_huber),
    ];
    families
        .iter()
        .map(|&(loss, check)| {
            let mut worst = 0.0f64;
            for _ in 0..instances {
                let mut rng = ChaCha8Rng::seed_from_u64(master.gen());
                worst = worst.max(check(&mut rng));
            }
            LossCheck {
                loss,
                instances,
                worst_rel_err: worst,
            }
        })
        .collect()
}

/// True when every family beat the tolerance.
pub fn all_pass(report: &[LossCheck]) -> bool {
    report.iter().all(LossCheck::passed)
}

/// Analytic-vs-central-difference relative error of `loss` over the
/// named parameter groups.
fn fd_error(
    store: &mut ParamStore,
    groups: &[&str],
    mut loss: impl FnMut(&mut Tape, &ParamStore) -> NodeId,
) -> f64 {
    let mut names = Vec::new();
    for group in groups {
        names.extend(store.group_names(group));
    }
    store.zero_grads();
    let mut tape = Tape::new();
    let node = loss(&mut tape, store);
    tape.backward(node, store).expect("loss differentiates");
    let analytic = collect_grads(store, &names);
    let fd = finite_difference_grad(store, &names, FD_STEP, &mut |s| {
        let mut t = Tape::new();
        let node = loss(&mut t, s);
        t.value_scalar(node)
    });
    grad_relative_error(&analytic, &fd)
}

/// Kick every parameter off its init so no head sits at a symmetric
/// stationary point (zeroed output layers included).
fn perturb_all(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f32) {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        for v in store.value_mut(&name).expect("listed name").data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

fn random_hidden(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let width = *[4usize, 6, 10].choose_rng(rng);
    let layers = rng.gen_range(1..=2);
    vec![width; layers]
}

/// `choose` without pulling the slice-random trait into every caller.
trait ChooseRng<T> {
    fn choose_rng(&self, rng: &mut ChaCha8Rng) -> &T;
}

impl<T> ChooseRng<T> for [T] {
    fn choose_rng(&self, rng: &mut ChaCha8Rng) -> &T {
        &self[rng.gen_range(0..self.len())]
    }
}

fn random_states(rng: &mut ChaCha8Rng, n: usize, obs: usize) -> Array {
    let states: Vec<Vec<f32>> = (0..n)
        .map(|_| (0..obs).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    states_to_array(&states, obs).expect("uniform widths")
}

struct ModelInstance {
    model: ReturnModel,
    store: ParamStore,
    states: Array,
    x: Vec<f64>,
    noise: MinibatchNoise,
}

fn model_instance(rng: &mut ChaCha8Rng) -> ModelInstance {
    let obs = rng.gen_range(1..=4);
    let latent = rng.gen_range(1..=3);
    let hidden = random_hidden(rng);
    let n = rng.gen_range(3..=8);
    let mut store = ParamStore::new();
    let model = ReturnModel::new(&mut store, rng, obs, latent, &hidden).expect("static shapes");
    perturb_all(&mut store, rng, 0.2);
    let states = random_states(rng, n, obs);
    let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let noise = sample_minibatch_noise(n, latent, rng);
    ModelInstance {
        model,
        store,
        states,
        x,
        noise,
    }
}

fn check_discriminator(rng: &mut ChaCha8Rng) -> f64 {
    let ModelInstance {
        model,
        mut store,
        states,
        x,
        noise,
    } = model_instance(rng);
    fd_error(&mut store, &["disc"], |tape, store| {
        model
            .discriminator_loss(tape, store, &states, &x, &noise)
            .expect("valid batch")
    })
}

fn check_encoder_prior(rng: &mut ChaCha8Rng) -> f64 {
    let ModelInstance {
        model,
        mut store,
        states,
        x,
        noise,
    } = model_instance(rng);
    fd_error(&mut store, &["enc", "prior"], |tape, store| {
        model
            .encoder_prior_loss(tape, store, &states, &x, &noise)
            .expect("valid batch")
    })
}

fn check_reconstruction(rng: &mut ChaCha8Rng) -> f64 {
    let ModelInstance {
        model,
        mut store,
        states,
        x,
        noise,
    } = model_instance(rng);
    fd_error(&mut store, &["gen"], |tape, store| {
        model
            .reconstruction_loss(tape, store, &states, &x, &noise)
            .expect("valid batch")
    })
}

fn check_ppo(rng: &mut ChaCha8Rng) -> f64 {
    let obs = rng.gen_range(1..=4);
    let hidden = random_hidden(rng);
    let n = rng.gen_range(3..=8);
    let space = if rng.gen_bool(0.5) {
        ActionSpace::Discrete {
            actions: rng.gen_range(2..=4),
        }
    } else {
        ActionSpace::Continuous {
            dim: rng.gen_range(1..=3),
        }
    };
    let mut store = ParamStore::new();
    let policy = PolicyNet::new(&mut store, rng, obs, space, &hidden).expect("static shapes");
    perturb_all(&mut store, rng, 0.2);
    let states = random_states(rng, n, obs);
    let actions: Vec<Action> = (0..n)
        .map(|_| match space {
            ActionSpace::Discrete { actions } => Action::Discrete(rng.gen_range(0..actions)),
            ActionSpace::Continuous { dim } => {
                Action::Continuous((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            }
        })
        .collect();
    let logp_old: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..-0.1)).collect();
    let advantages: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    // The policy objective as trained: clipped surrogate plus the
    // entropy bonus, both differentiated through the same tape.
    fd_error(&mut store, &["pi"], |tape, store| {
        let surrogate = policy
            .ppo_loss(tape, store, &states, &actions, &logp_old, &advantages, 0.2)
            .expect("valid batch");
        let entropy = policy
            .entropy_node(tape, store, &states)
            .expect("valid batch");
        let bonus = tape.scale(entropy, 0.01);
        tape.add(surrogate, bonus)
    })
}

fn check_qr_huber(rng: &mut ChaCha8Rng) -> f64 {
    let obs = rng.gen_range(1..=4);
    let hidden = random_hidden(rng);
    let n = rng.gen_range(3..=8);
    let m = rng.gen_range(1..=5);
    let kappa = rng.gen_range(0.3..2.0);
    let mut store = ParamStore::new();
    let head = QrHead::new(&mut store, rng, obs, m, &hidden, kappa).expect("static shapes");
    perturb_all(&mut store, rng, 0.2);
    let states = random_states(rng, n, obs);
    let targets: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    fd_error(&mut store, &["qr"], |tape, store| {
        head.loss(tape, store, &states, &targets)
            .expect("valid batch")
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a_short_suite_covers_all_five_losses_and_passes() {
        let report = run_suite(3, 11);
        assert_eq!(report.len(), 5);
        for check in &report {
            assert_eq!(check.instances, 3);
            assert!(check.passed(), "{}: {}", check.loss, check.worst_rel_err);
        }
        assert!(all_pass(&report));
    }

    #[test]
    fn reports_are_deterministic_in_the_seed() {
        assert_eq!(run_suite(2, 5), run_suite(2, 5));
    }
}
