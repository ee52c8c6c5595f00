//! Stochastic policies and the clipped-surrogate update.
//!
//! A [`PolicyNet`] maps observations through a shared MLP torso to either
//! categorical logits (discrete actions) or a Gaussian mean paired with a
//! state-independent log-std vector (continuous actions). Rollouts draw
//! from [`PolicyNet::sample_action`]; updates ascend [`PolicyNet::ppo_loss`]
//! plus an entropy bonus, both built on the tape so the optimizer sees
//! exact gradients. Zero-initialized heads make the untrained policy
//! uniform (or a unit Gaussian), which pins down cold-start behaviour.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::ndmath::{
    forward_mlp, init_mlp, Activation, Array, MlpSpec, NdError, NodeId, ParamStore, Tape,
};

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyError {
    ObsDimMismatch { expected: usize, got: usize },
    ActionSpaceMismatch,
    BatchLengthMismatch { states: usize, other: usize },
    EmptyBatch,
    ActionOutOfRange { action: usize, actions: usize },
    ClipOutOfRange { eps: f64 },
    NonFinite { what: &'static str },
    Math(NdError),
}

impl fmt::Display for PolicyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyError::ObsDimMismatch { expected, got } => {
                write!(
                    f,
                    "observation has {got} features, policy expects {expected}"
                )
            }
            PolicyError::ActionSpaceMismatch => {
                write!(f, "action kind does not match the policy's action space")
            }
            PolicyError::BatchLengthMismatch { states, other } => {
                write!(
                    f,
                    "batch carries {states} states but {other} companion entries"
                )
            }
            PolicyError::EmptyBatch => write!(f, "empty policy batch"),
            PolicyError::ActionOutOfRange { action, actions } => {
                write!(f, "discrete action {action} outside 0..{actions}")
            }
            PolicyError::ClipOutOfRange { eps } => {
                write!(f, "clip radius must lie in (0, 1), got {eps}")
            }
            PolicyError::NonFinite { what } => write!(f, "non-finite {what}"),
            PolicyError::Math(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for PolicyError {}

impl From<NdError> for PolicyError {
    fn from(e: NdError) -> Self {
        PolicyError::Math(e)
    }
}

/// The action interface a policy serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionSpace {
    Discrete { actions: usize },
    Continuous { dim: usize },
}

/// One emitted action.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

/// Policy distribution at a single state, with analytic accessors used
/// by metrics and tests. Gradient paths go through the tape builders on
/// [`PolicyNet`] instead.
#[derive(Debug, Clone)]
pub enum PolicyDistribution {
    Categorical { logits: Vec<f64> },
    Gaussian { mean: Vec<f64>, log_std: Vec<f64> },
}

impl PolicyDistribution {
    /// Action probabilities of a categorical policy (stable softmax).
    pub fn probs(&self) -> Option<Vec<f64>> {
        match self {
            PolicyDistribution::Categorical { logits } => {
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let total: f64 = exps.iter().sum();
                Some(exps.iter().map(|e| e / total).collect())
            }
            PolicyDistribution::Gaussian { .. } => None,
        }
    }

    /// Analytic differential/Shannon entropy.
    pub fn entropy(&self) -> f64 {
        match self {
            PolicyDistribution::Categorical { .. } => {
                let probs = self.probs().unwrap();
                -probs
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|&p| p * p.ln())
                    .sum::<f64>()
            }
            PolicyDistribution::Gaussian { log_std, .. } => {
                let d = log_std.len() as f64;
                0.5 * d * (1.0 + (2.0 * std::f64::consts::PI).ln()) + log_std.iter().sum::<f64>()
            }
        }
    }

    /// Exact log-density/log-mass of `action` under this distribution.
    pub fn log_prob(&self, action: &Action) -> Result<f64, PolicyError> {
        match (self, action) {
            (PolicyDistribution::Categorical { logits }, Action::Discrete(a)) => {
                if *a >= logits.len() {
                    return Err(PolicyError::ActionOutOfRange {
                        action: *a,
                        actions: logits.len(),
                    });
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let log_norm = logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln() + m;
                Ok(logits[*a] - log_norm)
            }
            (PolicyDistribution::Gaussian { mean, log_std }, Action::Continuous(a)) => {
                if a.len() != mean.len() {
                    return Err(PolicyError::ActionSpaceMismatch);
                }
                let mut logp = -0.5 * mean.len() as f64 * (2.0 * std::f64::consts::PI).ln();
                for i in 0..mean.len() {
                    let z = (a[i] - mean[i]) * (-log_std[i]).exp();
                    logp -= 0.5 * z * z + log_std[i];
                }
                Ok(logp)
            }
            _ => Err(PolicyError::ActionSpaceMismatch),
        }
    }
}

/// Subtract the batch mean and divide by the batch standard deviation,
/// the normalization applied to advantages before the surrogate loss. A
/// near-constant batch divides by a floor instead of exploding.
pub fn normalize_advantages(advantages: &[f64]) -> Vec<f64> {
    if advantages.is_empty() {
        return Vec::new();
    }
    let n = advantages.len() as f64;
    let mean = advantages.iter().sum::<f64>() / n;
    let var = advantages
        .iter()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / n;
    let denom = var.sqrt().max(1e-8);
    advantages.iter().map(|a| (a - mean) / denom).collect()
}

/// MLP policy with parameters under the `pi` prefix (plus `pi.log_std`
/// for continuous action spaces).
#[derive(Debug, Clone)]
pub struct PolicyNet {
    obs_dim: usize,
    space: ActionSpace,
    spec: MlpSpec,
}

const LOG_STD_NAME: &str = "pi.log_std";

impl PolicyNet {
    /// Register the policy network. The final layer starts at zero, so an
    /// untrained discrete policy is uniform and an untrained continuous
    /// policy is a unit Gaussian around zero.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        obs_dim: usize,
        space: ActionSpace,
        hidden: &[usize],
    ) -> Result<Self, PolicyError> {
        assert!(obs_dim > 0, "degenerate observation width");
        assert!(!hidden.is_empty(), "at least one hidden layer");
        let out = match space {
            ActionSpace::Discrete { actions } => {
                assert!(actions >= 2, "a discrete policy needs at least two actions");
                actions
            }
            ActionSpace::Continuous { dim } => {
                assert!(dim > 0, "degenerate action dimension");
                dim
            }
        };
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(out);
        let spec = MlpSpec::new(sizes, Activation::Tanh, Activation::Identity);
        init_mlp(store, rng, "pi", &spec, true)?;
        if let ActionSpace::Continuous { dim } = space {
            store.add(LOG_STD_NAME, Array::zeros(&[1, dim]))?;
        }
        Ok(PolicyNet {
            obs_dim,
            space,
            spec,
        })
    }

    /// Rebuild the handles for parameters already present in a store.
    pub fn attach(obs_dim: usize, space: ActionSpace, hidden: &[usize]) -> Self {
        let out = match space {
            ActionSpace::Discrete { actions } => actions,
            ActionSpace::Continuous { dim } => dim,
        };
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(out);
        PolicyNet {
            obs_dim,
            space,
            spec: MlpSpec::new(sizes, Activation::Tanh, Activation::Identity),
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn action_space(&self) -> ActionSpace {
        self.space
    }

    fn check_state(&self, s: &[f32]) -> Result<(), PolicyError> {
        if s.len() != self.obs_dim {
            return Err(PolicyError::ObsDimMismatch {
                expected: self.obs_dim,
                got: s.len(),
            });
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(PolicyError::NonFinite {
                what: "observation",
            });
        }
        Ok(())
    }

    fn check_batch(&self, states: &Array, len: usize) -> Result<usize, PolicyError> {
        let (n, d) = states.dims2();
        if n == 0 {
            return Err(PolicyError::EmptyBatch);
        }
        if d != self.obs_dim {
            return Err(PolicyError::ObsDimMismatch {
                expected: self.obs_dim,
                got: d,
            });
        }
        if len != n {
            return Err(PolicyError::BatchLengthMismatch {
                states: n,
                other: len,
            });
        }
        Ok(n)
    }

    /// The policy distribution at one state, for rollouts and metrics.
    pub fn distribution(
        &self,
        store: &ParamStore,
        s: &[f32],
    ) -> Result<PolicyDistribution, PolicyError> {
        self.check_state(s)?;
        let mut tape = Tape::new();
        let input = tape.constant_parts(1, self.obs_dim, s.iter().map(|&v| v as f64).collect());
        let head = forward_mlp(&mut tape, store, "pi", &self.spec, input, true)?;
        match self.space {
            ActionSpace::Discrete { .. } => Ok(PolicyDistribution::Categorical {
                logits: tape.value(head).to_vec(),
            }),
            ActionSpace::Continuous { .. } => {
                let log_std = store.value(LOG_STD_NAME)?;
                Ok(PolicyDistribution::Gaussian {
                    mean: tape.value(head).to_vec(),
                    log_std: log_std.data().iter().map(|&v| v as f64).collect(),
                })
            }
        }
    }

    /// Draw an action and its exact log-probability. The log-probability
    /// is evaluated through the same graph as [`PolicyNet::log_prob_nodes`],
    /// so the first importance ratio of an update recomputing it is
    /// bitwise one — an analytic shortcut would differ in the last ulp.
    pub fn sample_action(
        &self,
        store: &ParamStore,
        s: &[f32],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Action, f64), PolicyError> {
        let dist = self.distribution(store, s)?;
        let action = match &dist {
            PolicyDistribution::Categorical { .. } => {
                let probs = dist.probs().unwrap();
                let draw: f64 = rng.gen();
                let mut acc = 0.0;
                let mut chosen = probs.len() - 1;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if draw < acc {
                        chosen = i;
                        break;
                    }
                }
                Action::Discrete(chosen)
            }
            PolicyDistribution::Gaussian { mean, log_std } => {
                let a = mean
                    .iter()
                    .zip(log_std)
                    .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                Action::Continuous(a)
            }
        };
        let states = Array::from_vec(&[1, self.obs_dim], s.to_vec())?;
        let mut tape = Tape::new();
        let node = self.log_prob_nodes(&mut tape, store, &states, std::slice::from_ref(&action))?;
        let logp = tape.value_scalar(node);
        Ok((action, logp))
    }

    /// Differentiable per-sample log π(a|s) for a batch, shape `[n, 1]`.
    pub fn log_prob_nodes(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        states: &Array,
        actions: &[Action],
    ) -> Result<NodeId, PolicyError> {
        let n = self.check_batch(states, actions.len())?;
        let input = tape.constant(states);
        let head = forward_mlp(tape, store, "pi", &self.spec, input, false)?;
        match self.space {
            ActionSpace::Discrete { actions: count } => {
                let mut indices = Vec::with_capacity(n);
                for action in actions {
                    match action {
                        Action::Discrete(a) if *a < count => indices.push(*a),
                        Action::Discrete(a) => {
                            return Err(PolicyError::ActionOutOfRange {
                                action: *a,
                                actions: count,
                            })
                        }
                        Action::Continuous(_) => return Err(PolicyError::ActionSpaceMismatch),
                    }
                }
                let log_probs = tape.log_softmax(head);
                Ok(tape.col_pick(log_probs, &indices))
            }
            ActionSpace::Continuous { dim } => {
                let mut flat = Vec::with_capacity(n * dim);
                for action in actions {
                    match action {
                        Action::Continuous(a) if a.len() == dim => flat.extend_from_slice(a),
                        Action::Continuous(_) => return Err(PolicyError::ActionSpaceMismatch),
                        Action::Discrete(_) => return Err(PolicyError::ActionSpaceMismatch),
                    }
                }
                if flat.iter().any(|v| !v.is_finite()) {
                    return Err(PolicyError::NonFinite { what: "action" });
                }
                let a_node = tape.constant_parts(n, dim, flat);
                let log_std = tape.param(store, LOG_STD_NAME, false)?;
                let diff = tape.sub(a_node, head);
                let neg_ls = tape.scale(log_std, -1.0);
                let inv_std = tape.exp(neg_ls);
                let z = tape.mul_row(diff, inv_std);
                let sq = tape.square(z);
                let row_sum = tape.sum_rows(sq);
                let quad = tape.scale(row_sum, -0.5);
                let ls_total = tape.sum_all(log_std);
                let neg_ls_total = tape.scale(ls_total, -1.0);
                let with_ls = tape.add_row(quad, neg_ls_total);
                let shift = -0.5 * dim as f64 * (2.0 * std::f64::consts::PI).ln();
                Ok(tape.add_scalar(with_ls, shift))
            }
        }
    }

    /// PPO clipped surrogate, a scalar to ascend:
    /// `mean min(ρ·Â, clip(ρ, 1-ε, 1+ε)·Â)` with ρ the importance ratio
    /// against the collection-time log-probabilities. Advantages are
    /// consumed as given — normalize them first.
    pub fn ppo_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        states: &Array,
        actions: &[Action],
        logp_old: &[f64],
        advantages: &[f64],
        eps_clip: f64,
    ) -> Result<NodeId, PolicyError> {
        if !(eps_clip > 0.0 && eps_clip < 1.0) {
            return Err(PolicyError::ClipOutOfRange { eps: eps_clip });
        }
        let n = self.check_batch(states, actions.len())?;
        if logp_old.len() != n || advantages.len() != n {
            return Err(PolicyError::BatchLengthMismatch {
                states: n,
                other: logp_old.len().min(advantages.len()),
            });
        }
        if logp_old.iter().chain(advantages).any(|v| !v.is_finite()) {
            return Err(PolicyError::NonFinite {
                what: "surrogate input",
            });
        }
        let logp_new = self.log_prob_nodes(tape, store, states, actions)?;
        let old = tape.constant_parts(n, 1, logp_old.to_vec());
        let adv = tape.constant_parts(n, 1, advantages.to_vec());
        let delta = tape.sub(logp_new, old);
        let rho = tape.exp(delta);
        let unclipped = tape.mul(rho, adv);
        let rho_clipped = tape.clamp(rho, 1.0 - eps_clip, 1.0 + eps_clip);
        let clipped = tape.mul(rho_clipped, adv);
        let per_sample = tape.min_elem(unclipped, clipped);
        Ok(tape.mean_all(per_sample))
    }

    /// Mean policy entropy over a batch of states as a tape node, the
    /// regularizer added to the surrogate. For a Gaussian policy the
    /// entropy depends only on the shared log-std, so the batch collapses
    /// to a constant plus that parameter.
    pub fn entropy_node(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        states: &Array,
    ) -> Result<NodeId, PolicyError> {
        let (n, _) = states.dims2();
        self.check_batch(states, n)?;
        match self.space {
            ActionSpace::Discrete { .. } => {
                let input = tape.constant(states);
                let head = forward_mlp(tape, store, "pi", &self.spec, input, false)?;
                let log_probs = tape.log_softmax(head);
                let probs = tape.exp(log_probs);
                let plogp = tape.mul(probs, log_probs);
                let row = tape.sum_rows(plogp);
                let neg = tape.scale(row, -1.0);
                Ok(tape.mean_all(neg))
            }
            ActionSpace::Continuous { dim } => {
                let log_std = tape.param(store, LOG_STD_NAME, false)?;
                let total = tape.sum_all(log_std);
                let shift = 0.5 * dim as f64 * (1.0 + (2.0 * std::f64::consts::PI).ln());
                Ok(tape.add_scalar(total, shift))
            }
        }
    }
}
