//! Desk-scale environments: hard-exploration chains and grids plus
//! stochastic-reward tasks whose exact return distributions the tabular
//! oracle can reproduce.
//!
//! Every environment follows the same protocol: [`Env::reset`] seeds the
//! episode's private noise stream and returns the initial state,
//! [`Env::step`] consumes one action and reports `(state, reward, done)`.
//! Episodes end either at a terminal transition or at the episode cap;
//! the two are distinguished by [`EnvState::truncated`] so a training
//! loop can bootstrap through time limits but not through real endings.
//! Tabular environments additionally expose their reward and transition
//! structure under a fixed policy through [`Env::tabular_view`], which is
//! what the oracle cross-checks consume.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

use crate::policy::{Action, ActionSpace};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EnvError {
    StepBeforeReset,
    StepAfterDone,
    WrongActionKind,
    ActionOutOfRange { action: usize, actions: usize },
    ActionNotFinite,
    NoTabularForm,
    PolicyShapeMismatch { expected_states: usize, got: usize },
    PolicyRowInvalid { state: usize },
    PolicyNotDeterministic { state: usize },
    InvalidParameter(&'static str),
}

impl fmt::Display for EnvError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvError::StepBeforeReset => write!(f, "step called before the first reset"),
            EnvError::StepAfterDone => write!(f, "step called on a finished episode"),
            EnvError::WrongActionKind => write!(f, "action kind does not match the env"),
            EnvError::ActionOutOfRange { action, actions } => {
                write!(f, "discrete action {action} outside 0..{actions}")
            }
            EnvError::ActionNotFinite => write!(f, "non-finite continuous action"),
            EnvError::NoTabularForm => write!(f, "environment has no tabular form"),
            EnvError::PolicyShapeMismatch {
                expected_states,
                got,
            } => write!(
                f,
                "policy table has {got} rows, env has {expected_states} states"
            ),
            EnvError::PolicyRowInvalid { state } => {
                write!(f, "policy row {state} is not a probability vector")
            }
            EnvError::PolicyNotDeterministic { state } => {
                write!(
                    f,
                    "policy row {state} mixes actions with action-dependent rewards"
                )
            }
            EnvError::InvalidParameter(what) => write!(f, "invalid env parameter: {what}"),
        }
    }
}

impl std::error::Error for EnvError {}

/// Snapshot of an environment after reset or one step.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub observation: Vec<f32>,
    pub done: bool,
    /// Steps taken since the last reset.
    pub steps: usize,
    /// The episode ended by hitting the cap rather than a terminal
    /// transition; only meaningful while `done` is set. Targets should
    /// bootstrap through truncations and stop at real terminals.
    pub truncated: bool,
}

/// Reward atoms, transition rows, and the initial state distribution of
/// a tabular environment under a fixed policy, in the exact shape
/// [`crate::bellman::TabularMdp::new`] accepts.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularView {
    /// `rewards[s]` lists `(atom, probability)` pairs for R(s).
    pub rewards: Vec<Vec<(f64, f64)>>,
    /// `transitions[s][s']` is P(s' | s) under the policy.
    pub transitions: Vec<Vec<f64>>,
    /// Distribution over tabular states right after reset.
    pub start: Vec<f64>,
}

pub trait Env: Send {
    fn obs_dim(&self) -> usize;
    fn action_space(&self) -> ActionSpace;
    /// Hard step limit per episode; hitting it truncates.
    fn episode_cap(&self) -> usize;
    /// Start a fresh episode, seeding the episode's noise stream.
    fn reset(&mut self, seed: u64) -> EnvState;
    /// Advance one step. Errors before the first reset and on finished
    /// episodes.
    fn step(&mut self, action: &Action) -> Result<(EnvState, f64, bool), EnvError>;
    /// The environment's reward/transition structure under `policy`
    /// (`policy[s][a]` is the action law at tabular state `s`), where a
    /// tabular form exists. Environments whose rewards depend on the
    /// action accept only deterministic rows, because marginal reward
    /// and transition tables cannot express the reward-transition
    /// coupling a mixed policy would induce.
    fn tabular_view(&self, policy: &[Vec<f64>]) -> Result<TabularView, EnvError> {
        let _ = policy;
        Err(EnvError::NoTabularForm)
    }
}

/// Environment selector carried by config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum EnvSpec {
    ChainWorld {
        n: usize,
    },
    SparseGrid {
        width: usize,
        height: usize,
    },
    BimodalBandit {
        #[serde(default = "default_bandit_len")]
        episode_len: usize,
    },
    NoisyChain {
        n: usize,
    },
    #[serde(rename = "point_mass_1d")]
    PointMass1d {
        #[serde(default = "default_point_mass_len")]
        episode_len: usize,
    },
}

impl EnvSpec {
    /// The config-facing name of the selected environment.
    pub fn name(&self) -> &'static str {
        match self {
            EnvSpec::ChainWorld { .. } => "chain_world",
            EnvSpec::SparseGrid { .. } => "sparse_grid",
            EnvSpec::BimodalBandit { .. } => "bimodal_bandit",
            EnvSpec::NoisyChain { .. } => "noisy_chain",
            EnvSpec::PointMass1d { .. } => "point_mass_1d",
        }
    }
}

fn default_bandit_len() -> usize {
    32
}

fn default_point_mass_len() -> usize {
    64
}

/// Build the environment a spec names. Each worker calls this once and
/// owns the instance.
pub fn make_env(spec: &EnvSpec) -> Result<Box<dyn Env>, EnvError> {
    match *spec {
        EnvSpec::ChainWorld { n } => Ok(Box::new(ChainWorld::new(n)?)),
        EnvSpec::SparseGrid { width, height } => Ok(Box::new(SparseGrid::new(width, height)?)),
        EnvSpec::BimodalBandit { episode_len } => Ok(Box::new(BimodalBandit::new(episode_len)?)),
        EnvSpec::NoisyChain { n } => Ok(Box::new(NoisyChain::new(n)?)),
        EnvSpec::PointMass1d { episode_len } => Ok(Box::new(PointMass1d::new(episode_len)?)),
    }
}

/// Step counting, cap enforcement, and the reset-before-step guard
/// shared by every environment.
#[derive(Debug, Clone)]
struct EpisodeClock {
    cap: usize,
    steps: usize,
    started: bool,
    done: bool,
}

impl EpisodeClock {
    fn new(cap: usize) -> Self {
        EpisodeClock {
            cap,
            steps: 0,
            started: false,
            done: false,
        }
    }

    fn restart(&mut self) {
        self.steps = 0;
        self.started = true;
        self.done = false;
    }

    fn guard(&self) -> Result<(), EnvError> {
        if !self.started {
            return Err(EnvError::StepBeforeReset);
        }
        if self.done {
            return Err(EnvError::StepAfterDone);
        }
        Ok(())
    }

    /// Count one step; `terminal` marks a real ending. Returns
    /// `(done, truncated)`.
    fn tick(&mut self, terminal: bool) -> (bool, bool) {
        self.steps += 1;
        let truncated = !terminal && self.steps >= self.cap;
        self.done = terminal || truncated;
        (self.done, truncated)
    }
}

fn one_hot(index: usize, width: usize) -> Vec<f32> {
    let mut v = vec![0.0; width];
    v[index] = 1.0;
    v
}

fn decode_discrete(action: &Action, actions: usize) -> Result<usize, EnvError> {
    match action {
        Action::Discrete(a) if *a < actions => Ok(*a),
        Action::Discrete(a) => Err(EnvError::ActionOutOfRange {
            action: *a,
            actions,
        }),
        Action::Continuous(_) => Err(EnvError::WrongActionKind),
    }
}

fn check_policy_shape(policy: &[Vec<f64>], states: usize, actions: usize) -> Result<(), EnvError> {
    if policy.len() != states {
        return Err(EnvError::PolicyShapeMismatch {
            expected_states: states,
            got: policy.len(),
        });
    }
    for (s, row) in policy.iter().enumerate() {
        let total: f64 = row.iter().sum();
        if row.len() != actions || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(EnvError::PolicyRowInvalid { state: s });
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(EnvError::PolicyRowInvalid { state: s });
        }
    }
    Ok(())
}

/// The single action a deterministic policy row selects.
fn deterministic_action(row: &[f64], state: usize) -> Result<usize, EnvError> {
    for (a, &p) in row.iter().enumerate() {
        if (p - 1.0).abs() < 1e-9 {
            return Ok(a);
        }
    }
    Err(EnvError::PolicyNotDeterministic { state })
}

/// Hard-exploration chain. Positions `0..n`, start at the left end. The
/// left action always pays a small distractor reward and drags the agent
/// toward the wall; the right action pays nothing until it finally lands
/// on the rightmost position, which pays the sparse goal reward and
/// ends the episode. A myopic agent camps at the wall forever.
#[derive(Debug, Clone)]
pub struct ChainWorld {
    n: usize,
    position: usize,
    clock: EpisodeClock,
}

pub const CHAIN_DISTRACTOR: f64 = 0.001;
pub const CHAIN_GOAL: f64 = 1.0;

impl ChainWorld {
    pub fn new(n: usize) -> Result<Self, EnvError> {
        if n < 2 {
            return Err(EnvError::InvalidParameter("chain length below 2"));
        }
        Ok(ChainWorld {
            n,
            position: 0,
            clock: EpisodeClock::new(4 * n),
        })
    }

    fn snapshot(&self, truncated: bool) -> EnvState {
        EnvState {
            observation: one_hot(self.position, self.n),
            done: self.clock.done,
            steps: self.clock.steps,
            truncated,
        }
    }
}

impl Env for ChainWorld {
    fn obs_dim(&self) -> usize {
        self.n
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete { actions: 2 }
    }

    fn episode_cap(&self) -> usize {
        4 * self.n
    }

    fn reset(&mut self, _seed: u64) -> EnvState {
        self.position = 0;
        self.clock.restart();
        self.snapshot(false)
    }

    fn step(&mut self, action: &Action) -> Result<(EnvState, f64, bool), EnvError> {
        self.clock.guard()?;
        let a = decode_discrete(action, 2)?;
        let reward;
        let terminal;
        if a == 0 {
            self.position = self.position.saturating_sub(1);
            reward = CHAIN_DISTRACTOR;
            terminal = false;
        } else {
            self.position += 1;
            terminal = self.position == self.n - 1;
            reward = if terminal { CHAIN_GOAL } else { 0.0 };
        }
        let (done, truncated) = self.clock.tick(terminal);
        Ok((self.snapshot(truncated), reward, done))
    }

    fn tabular_view(&self, policy: &[Vec<f64>]) -> Result<TabularView, EnvError> {
        check_policy_shape(policy, self.n, 2)?;
        let mut rewards = Vec::with_capacity(self.n);
        let mut transitions = vec![vec![0.0; self.n]; self.n];
        for s in 0..self.n - 1 {
            // Rewards depend on the chosen action, so only deterministic
            // rows translate into an exact per-state reward law.
            let a = deterministic_action(&policy[s], s)?;
            if a == 0 {
                rewards.push(vec![(CHAIN_DISTRACTOR, 1.0)]);
                transitions[s][s.saturating_sub(1)] = 1.0;
            } else {
                let bonus = if s + 1 == self.n - 1 { CHAIN_GOAL } else { 0.0 };
                rewards.push(vec![(bonus, 1.0)]);
                transitions[s][s + 1] = 1.0;
            }
        }
        // The goal absorbs with zero reward: the return stops accruing.
        rewards.push(vec![(0.0, 1.0)]);
        transitions[self.n - 1][self.n - 1] = 1.0;
        let mut start = vec![0.0; self.n];
        start[0] = 1.0;
        Ok(TabularView {
            rewards,
            transitions,
            start,
        })
    }
}

/// 2-D grid with a single terminal goal reward in the far corner and
/// nothing anywhere else. Actions move one cell (north, south, west,
/// east); walls clamp.
#[derive(Debug, Clone)]
pub struct SparseGrid {
    width: usize,
    height: usize,
    x: usize,
    y: usize,
    clock: EpisodeClock,
}

pub const GRID_GOAL: f64 = 1.0;

impl SparseGrid {
    pub fn new(width: usize, height: usize) -> Result<Self, EnvError> {
        if width < 2 || height < 2 {
            return Err(EnvError::InvalidParameter("grid side below 2"));
        }
        Ok(SparseGrid {
            width,
            height,
            x: 0,
            y: 0,
            clock: EpisodeClock::new(4 * width * height),
        })
    }

    fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    fn snapshot(&self, truncated: bool) -> EnvState {
        EnvState {
            observation: one_hot(self.index(self.x, self.y), self.width * self.height),
            done: self.clock.done,
            steps: self.clock.steps,
            truncated,
        }
    }

    fn moved(&self, x: usize, y: usize, a: usize) -> (usize, usize) {
        match a {
            0 => (x, (y + 1).min(self.height - 1)),
            1 => (x, y.saturating_sub(1)),
            2 => (x.saturating_sub(1), y),
            _ => ((x + 1).min(self.width - 1), y),
        }
    }
}

impl Env for SparseGrid {
    fn obs_dim(&self) -> usize {
        self.width * self.height
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete { actions: 4 }
    }

    fn episode_cap(&self) -> usize {
        4 * self.width * self.height
    }

    fn reset(&mut self, _seed: u64) -> EnvState {
        self.x = 0;
        self.y = 0;
        self.clock.restart();
        self.snapshot(false)
    }

    fn step(&mut self, action: &Action) -> Result<(EnvState, f64, bool), EnvError> {
        self.clock.guard()?;
        let a = decode_discrete(action, 4)?;
        let (nx, ny) = self.moved(self.x, self.y, a);
        self.x = nx;
        self.y = ny;
        let terminal = nx == self.width - 1 && ny == self.height - 1;
        let reward = if terminal { GRID_GOAL } else { 0.0 };
        let (done, truncated) = self.clock.tick(terminal);
        Ok((self.snapshot(truncated), reward, done))
    }

    fn tabular_view(&self, policy: &[Vec<f64>]) -> Result<TabularView, EnvError> {
        let states = self.width * self.height;
        check_policy_shape(policy, states, 4)?;
        let goal = self.index(self.width - 1, self.height - 1);
        let mut rewards = Vec::with_capacity(states);
        let mut transitions = vec![vec![0.0; states]; states];
        for s in 0..states {
            if s == goal {
                rewards.push(vec![(0.0, 1.0)]);
                transitions[s][s] = 1.0;
                continue;
            }
            let a = deterministic_action(&policy[s], s)?;
            let (nx, ny) = self.moved(s % self.width, s / self.width, a);
            let next = self.index(nx, ny);
            let bonus = if next == goal { GRID_GOAL } else { 0.0 };
            rewards.push(vec![(bonus, 1.0)]);
            transitions[s][next] = 1.0;
        }
        let mut start = vec![0.0; states];
        start[0] = 1.0;
        Ok(TabularView {
            rewards,
            transitions,
            start,
        })
    }
}

/// Single observed state whose per-step reward is +1 or -1 depending on
/// a hidden mode drawn once per episode with even odds. Conditioned on
/// the observation alone the return distribution is an even two-atom
/// mixture at the discounted mode values — the canonical bimodal target
/// for a return model. Actions change nothing; episodes end only by
/// truncation.
#[derive(Debug, Clone)]
pub struct BimodalBandit {
    mode: f64,
    clock: EpisodeClock,
}

impl BimodalBandit {
    pub fn new(episode_len: usize) -> Result<Self, EnvError> {
        if episode_len == 0 {
            return Err(EnvError::InvalidParameter("zero-length bandit episode"));
        }
        Ok(BimodalBandit {
            mode: 1.0,
            clock: EpisodeClock::new(episode_len),
        })
    }

    fn snapshot(&self, truncated: bool) -> EnvState {
        EnvState {
            observation: vec![1.0],
            done: self.clock.done,
            steps: self.clock.steps,
            truncated,
        }
    }
}

impl Env for BimodalBandit {
    fn obs_dim(&self) -> usize {
        1
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete { actions: 2 }
    }

    fn episode_cap(&self) -> usize {
        self.clock.cap
    }

    fn reset(&mut self, seed: u64) -> EnvState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.mode = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        self.clock.restart();
        self.snapshot(false)
    }

    fn step(&mut self, action: &Action) -> Result<(EnvState, f64, bool), EnvError> {
        self.clock.guard()?;
        decode_discrete(action, 2)?;
        let (done, truncated) = self.clock.tick(false);
        Ok((self.snapshot(truncated), self.mode, done))
    }

    /// Two hidden states, one per mode, each absorbing with its own
    /// deterministic reward. Rewards ignore the action, so any policy
    /// row is acceptable (and unused).
    fn tabular_view(&self, policy: &[Vec<f64>]) -> Result<TabularView, EnvError> {
        check_policy_shape(policy, 2, 2)?;
        Ok(TabularView {
            rewards: vec![vec![(1.0, 1.0)], vec![(-1.0, 1.0)]],
            transitions: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            start: vec![0.5, 0.5],
        })
    }
}

/// Chain whose every step pays a fair +-1 coin flip regardless of the
/// action, so the return distribution is a rich multi-atom law the
/// oracle can compute for any policy. Reaching the right end terminates;
/// there is no reward signal to learn from — this is a distribution-
/// shape stress test, not a control task.
#[derive(Debug, Clone)]
pub struct NoisyChain {
    n: usize,
    position: usize,
    rng: Option<ChaCha8Rng>,
    clock: EpisodeClock,
}

impl NoisyChain {
    pub fn new(n: usize) -> Result<Self, EnvError> {
        if n < 2 {
            return Err(EnvError::InvalidParameter("chain length below 2"));
        }
        Ok(NoisyChain {
            n,
            position: 0,
            rng: None,
            clock: EpisodeClock::new(4 * n),
        })
    }

    fn snapshot(&self, truncated: bool) -> EnvState {
        EnvState {
            observation: one_hot(self.position, self.n),
            done: self.clock.done,
            steps: self.clock.steps,
            truncated,
        }
    }
}

impl Env for NoisyChain {
    fn obs_dim(&self) -> usize {
        self.n
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete { actions: 2 }
    }

    fn episode_cap(&self) -> usize {
        4 * self.n
    }

    fn reset(&mut self, seed: u64) -> EnvState {
        self.rng = Some(ChaCha8Rng::seed_from_u64(seed));
        self.position = 0;
        self.clock.restart();
        self.snapshot(false)
    }

    fn step(&mut self, action: &Action) -> Result<(EnvState, f64, bool), EnvError> {
        self.clock.guard()?;
        let a = decode_discrete(action, 2)?;
        let rng = self.rng.as_mut().expect("guard ensures reset happened");
        let reward = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        self.position = if a == 0 {
            self.position.saturating_sub(1)
        } else {
            self.position + 1
        };
        let terminal = self.position == self.n - 1;
        let (done, truncated) = self.clock.tick(terminal);
        Ok((self.snapshot(truncated), reward, done))
    }

    /// Rewards are action-independent coin flips, so the marginal tables
    /// are exact under any stochastic policy.
    fn tabular_view(&self, policy: &[Vec<f64>]) -> Result<TabularView, EnvError> {
        check_policy_shape(policy, self.n, 2)?;
        let mut rewards = Vec::with_capacity(self.n);
        let mut transitions = vec![vec![0.0; self.n]; self.n];
        for s in 0..self.n - 1 {
            rewards.push(vec![(-1.0, 0.5), (1.0, 0.5)]);
            transitions[s][s.saturating_sub(1)] += policy[s][0];
            transitions[s][s + 1] += policy[s][1];
        }
        rewards.push(vec![(0.0, 1.0)]);
        transitions[self.n - 1][self.n - 1] = 1.0;
        let mut start = vec![0.0; self.n];
        start[0] = 1.0;
        Ok(TabularView {
            rewards,
            transitions,
            start,
        })
    }
}

/// Continuous control stand-in: a point on a line, pushed by a bounded
/// action, paying a quadratic cost for distance from the origin. Start
/// positions are drawn from the episode seed; dynamics are otherwise
/// deterministic.
#[derive(Debug, Clone)]
pub struct PointMass1d {
    x: f64,
    rng: Option<ChaCha8Rng>,
    clock: EpisodeClock,
}

pub const POINT_MASS_BOUND: f64 = 2.0;
pub const POINT_MASS_GAIN: f64 = 0.2;

impl PointMass1d {
    pub fn new(episode_len: usize) -> Result<Self, EnvError> {
        if episode_len == 0 {
            return Err(EnvError::InvalidParameter("zero-length point-mass episode"));
        }
        Ok(PointMass1d {
            x: 0.0,
            rng: None,
            clock: EpisodeClock::new(episode_len),
        })
    }

    fn snapshot(&self, truncated: bool) -> EnvState {
        EnvState {
            // Normalized to [-1, 1] by the position bound.
            observation: vec![(self.x / POINT_MASS_BOUND) as f32],
            done: self.clock.done,
            steps: self.clock.steps,
            truncated,
        }
    }
}

impl Env for PointMass1d {
    fn obs_dim(&self) -> usize {
        1
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous { dim: 1 }
    }

    fn episode_cap(&self) -> usize {
        self.clock.cap
    }

    fn reset(&mut self, seed: u64) -> EnvState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.x = rng.gen_range(-1.5..1.5);
        self.rng = Some(rng);
        self.clock.restart();
        self.snapshot(false)
    }

    fn step(&mut self, action: &Action) -> Result<(EnvState, f64, bool), EnvError> {
        self.clock.guard()?;
        let push = match action {
            Action::Continuous(a) if a.len() == 1 => a[0],
            Action::Continuous(_) => return Err(EnvError::WrongActionKind),
            Action::Discrete(_) => return Err(EnvError::WrongActionKind),
        };
        if !push.is_finite() {
            return Err(EnvError::ActionNotFinite);
        }
        let bounded = push.clamp(-1.0, 1.0);
        self.x = (self.x + POINT_MASS_GAIN * bounded).clamp(-POINT_MASS_BOUND, POINT_MASS_BOUND);
        let reward = -0.25 * self.x * self.x;
        let (done, truncated) = self.clock.tick(false);
        Ok((self.snapshot(truncated), reward, done))
    }
}
