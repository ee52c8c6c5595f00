//! Rollout collection and the interleaved update loop.
//!
//! One training round has three phases. Parallel workers step their own
//! environment copies against a frozen parameter snapshot, recording
//! transitions together with the return samples (z_t, g_t) drawn at
//! collection time. An exclusive phase turns the batch into GAE
//! advantages, Bellman targets, and curiosity bonuses. A minibatch loop
//! then advances the discriminator, encoder/prior, generator, and policy
//! in turn. A quantile-regression head stands in for the generative
//! return model on the baseline path.

use std::collections::VecDeque;
use std::error::Error;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bellman::{bellman_target, gae, BellmanError, TrajectorySegment};
use crate::curiosity::{
    augment_advantage, curiosity_rewards, decay_coefficient, information_gain, CuriosityConfig,
    CuriosityError, RunningStats,
};
use crate::envs::{make_env, Env, EnvError, EnvSpec};
use crate::ndmath::{
    forward_mlp, init_mlp, load_checkpoint, save_checkpoint, Activation, Adam, Array, MlpSpec,
    NdError, NodeId, ParamStore, Tape,
};
use crate::policy::{normalize_advantages, Action, PolicyError, PolicyNet};
use crate::return_model::{
    sample_minibatch_noise, states_to_array, DiagGaussianParams, LatentSample, ModelError,
    ReturnModel, ReturnValue,
};

/// Completed-episode window backing the score columns of the metrics.
const SCORE_WINDOW: usize = 100;

/// Rollout length floor when the bootstrap horizon is decoupled from the
/// unroll length.
const DECOUPLED_MIN_UNROLL: usize = 128;

/// Default Huber width for the quantile head.
pub const QR_KAPPA: f64 = 1.0;

#[derive(Debug)]
pub enum TrainerError {
    /// An option failed validation before any work started.
    Config(&'static str),
    /// A batch handed to the trainer is internally inconsistent.
    Batch(&'static str),
    /// Data tagged with one parameter version met a trainer at another.
    SnapshotMixed {
        expected: u64,
        got: u64,
    },
    /// A rollout worker died; the whole batch is discarded.
    WorkerPanic {
        worker: usize,
        message: String,
    },
    /// A training objective stopped being a number.
    NonFiniteLoss {
        what: &'static str,
        update: u64,
    },
    Env(EnvError),
    Policy(PolicyError),
    Model(ModelError),
    Bellman(BellmanError),
    Curiosity(CuriosityError),
    Math(NdError),
}

impl fmt::Display for TrainerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainerError::Config(msg) => write!(f, "invalid trainer configuration: {msg}"),
            TrainerError::Batch(msg) => write!(f, "malformed batch: {msg}"),
            TrainerError::SnapshotMixed { expected, got } => write!(
                f,
                "parameter snapshot mismatch: data tagged version {got}, trainer at {expected}"
            ),
            TrainerError::WorkerPanic { worker, message } => {
                write!(f, "rollout worker {worker} panicked: {message}")
            }
            TrainerError::NonFiniteLoss { what, update } => {
                write!(f, "non-finite {what} at update {update}")
            }
            TrainerError::Env(e) => write!(f, "environment error: {e}"),
            TrainerError::Policy(e) => write!(f, "policy error: {e}"),
            TrainerError::Model(e) => write!(f, "return model error: {e}"),
            TrainerError::Bellman(e) => write!(f, "target error: {e}"),
            TrainerError::Curiosity(e) => write!(f, "curiosity error: {e}"),
            TrainerError::Math(e) => write!(f, "math error: {e}"),
        }
    }
}

impl Error for TrainerError {}

impl From<EnvError> for TrainerError {
    fn from(e: EnvError) -> Self {
        TrainerError::Env(e)
    }
}

impl From<PolicyError> for TrainerError {
    fn from(e: PolicyError) -> Self {
        TrainerError::Policy(e)
    }
}

impl From<ModelError> for TrainerError {
    fn from(e: ModelError) -> Self {
        TrainerError::Model(e)
    }
}

impl From<BellmanError> for TrainerError {
    fn from(e: BellmanError) -> Self {
        TrainerError::Bellman(e)
    }
}

impl From<CuriosityError> for TrainerError {
    fn from(e: CuriosityError) -> Self {
        TrainerError::Curiosity(e)
    }
}

impl From<NdError> for TrainerError {
    fn from(e: NdError) -> Self {
        TrainerError::Math(e)
    }
}

/// Which learner owns the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Full path: adversarial return model plus curiosity bonuses.
    Bdpg,
    /// Same model, curiosity disabled; requires `eta = 0`.
    BdpgNaive,
    /// Quantile-regression critic baseline; no latent model, no curiosity.
    PpoQr,
}

/// How the Bellman target x_t is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// k-step discounted reward sum plus a bootstrap return sample.
    KStep,
    /// Advantage plus the rollout return sample, whatever λ is.
    GaePlusG,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerOptions {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub gamma: f64,
    pub lambda: f64,
    pub workers: usize,
    pub unroll: usize,
    /// Bootstrap horizon for k-step targets. `None` ties it to the
    /// unroll length; setting it decouples the two, and the rollout then
    /// stretches to `max(k, 128)` steps.
    pub bootstrap_k: Option<usize>,
    pub target: TargetKind,
    pub eps_clip: f64,
    pub entropy_coef: f64,
    /// Curiosity scale η; zero disables the bonus entirely.
    pub eta: f64,
    /// Curiosity clip ceiling ū, in units of the running deviation.
    pub u_bar: f64,
    pub minibatch: usize,
    pub epochs: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    /// Quantile count m for the baseline head.
    pub quantiles: usize,
    /// Huber width κ for the quantile head.
    pub qr_kappa: f64,
    pub lr_policy: f64,
    pub lr_disc: f64,
    pub lr_enc_prior: f64,
    pub lr_gen: f64,
    pub critic_noise: f64,
    pub anneal_lr: bool,
    /// Planned length of the run; the annealing denominator.
    pub total_updates: u64,
    /// Where a non-finite-loss abort drops its forensic checkpoint.
    pub dump_dir: Option<PathBuf>,
}

impl Default for TrainerOptions {
    fn default() -> Self {
        TrainerOptions {
            algorithm: Algorithm::Bdpg,
            seed: 0,
            gamma: 0.99,
            lambda: 0.95,
            workers: 16,
            unroll: 128,
            bootstrap_k: None,
            target: TargetKind::KStep,
            eps_clip: 0.2,
            entropy_coef: 0.01,
            eta: 1.0,
            u_bar: 3.0,
            minibatch: 256,
            epochs: 4,
            latent_dim: 8,
            hidden: vec![64, 64],
            quantiles: 32,
            qr_kappa: QR_KAPPA,
            lr_policy: 3e-4,
            lr_disc: 1e-3,
            lr_enc_prior: 5e-4,
            lr_gen: 1e-3,
            critic_noise: 0.2,
            anneal_lr: true,
            total_updates: 200,
            dump_dir: None,
        }
    }
}

impl TrainerOptions {
    /// Steps each worker walks per round.
    pub fn effective_unroll(&self) -> usize {
        match self.bootstrap_k {
            None => self.unroll,
            Some(k) => k.max(DECOUPLED_MIN_UNROLL),
        }
    }

    /// Bootstrap horizon used by k-step targets.
    pub fn effective_k(&self) -> usize {
        self.bootstrap_k.unwrap_or(self.unroll)
    }

    fn validate(&self) -> Result<(), TrainerError> {
        let bad = |msg| Err(TrainerError::Config(msg));
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return bad("discount gamma must lie in [0, 1)");
        }
        if !(self.lambda >= 0.0 && self.lambda <= 1.0) {
            return bad("gae lambda must lie in [0, 1]");
        }
        if !(self.eps_clip > 0.0 && self.eps_clip < 1.0) {
            return bad("ppo clip width must lie in (0, 1)");
        }
        if self.workers == 0 {
            return bad("at least one rollout worker");
        }
        if self.unroll == 0 {
            return bad("unroll length must be positive");
        }
        if self.bootstrap_k == Some(0) {
            return bad("bootstrap horizon must be positive");
        }
        if self.minibatch == 0 {
            return bad("minibatch size must be positive");
        }
        if self.epochs == 0 {
            return bad("at least one update epoch");
        }
        if self.total_updates == 0 {
            return bad("planned update count must be positive");
        }
        if self.latent_dim == 0 {
            return bad("latent dimension must be positive");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layers must be non-empty and positive");
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad("curiosity scale must be non-negative and finite");
        }
        if self.eta > 0.0 && !(self.u_bar > 0.0 && self.u_bar.is_finite()) {
            return bad("curiosity ceiling must be positive and finite");
        }
        if self.eta > 0.0 && self.algorithm != Algorithm::Bdpg {
            return bad("curiosity needs the full bdpg path; set eta to zero");
        }
        if self.algorithm == Algorithm::PpoQr && self.quantiles == 0 {
            return bad("at least one quantile");
        }
        if self.algorithm == Algorithm::PpoQr && !(self.qr_kappa > 0.0 && self.qr_kappa.is_finite())
        {
            return bad("quantile huber width must be positive and finite");
        }
        let rates = [self.lr_policy, self.lr_disc, self.lr_enc_prior, self.lr_gen];
        if rates.iter().any(|lr| !(lr.is_finite() && *lr >= 0.0)) {
            return bad("learning rates must be non-negative and finite");
        }
        if !(self.entropy_coef >= 0.0 && self.entropy_coef.is_finite()) {
            return bad("entropy bonus must be non-negative and finite");
        }
        if !(self.critic_noise >= 0.0 && self.critic_noise.is_finite()) {
            return bad("critic noise amplitude must be non-negative and finite");
        }
        Ok(())
    }
}

/// One environment step as the workers recorded it, tagged with the
/// parameter version that produced the action and the return sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    pub s: Vec<f32>,
    pub a: Action,
    pub r: f64,
    pub s_next: Vec<f32>,
    /// True only at a genuine terminal. A segment cut by truncation or
    /// by the unroll boundary keeps this false so targets bootstrap.
    pub done: bool,
    pub logp: f64,
    pub z: LatentSample,
    pub g: ReturnValue,
    pub version: u64,
}

/// A run of consecutive steps from one episode, never crossing an
/// episode boundary, closed by a return sample at the following state.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutSegment {
    pub records: Vec<TransitionRecord>,
    /// Return sample drawn at the state after the last step. Unused by
    /// the targets when the segment ends in a terminal.
    pub bootstrap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub segments: Vec<RolloutSegment>,
    pub version: u64,
    /// Environment steps in this batch: workers × unroll.
    pub steps: usize,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.records.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.iter().all(|s| s.records.is_empty())
    }
}

/// Advantages and targets for one batch, in flattened batch order.
///
/// Construction runs entirely inside [`Trainer::compute_targets`]: the
/// Bellman targets see only the environment rewards, and the augmented
/// advantages are recomputed from rewards plus curiosity without ever
/// feeding back into the targets. The private witness flags record that
/// those two code paths were the ones taken, and the update phase
/// refuses batches that lack them.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageBatch {
    pub adv: Vec<f64>,
    pub x: Vec<f64>,
    pub rc: Vec<f64>,
    pub adv_c: Vec<f64>,
    /// Raw posterior information gains u_t, before decay and clipping.
    pub ig: Vec<f64>,
    /// One bootstrap return sample per segment.
    pub bootstraps: Vec<f64>,
    pub version: u64,
    raw_reward_targets: bool,
    augmented_advantages_separate: bool,
}

impl AdvantageBatch {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Construction witnesses: targets built from raw rewards only, and
    /// augmented advantages kept apart from them.
    pub fn witnesses(&self) -> (bool, bool) {
        (self.raw_reward_targets, self.augmented_advantages_separate)
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub update_idx: u64,
    pub env_steps: u64,
    pub score_mean: f64,
    pub score_std: f64,
    pub policy_loss: f64,
    pub d_loss: f64,
    pub eg_loss: f64,
    pub recon_loss: f64,
    pub ig_mean: f64,
    pub ig_max: f64,
    pub rc_mean: f64,
    pub entropy: f64,
    pub eta_t: f64,
    pub wall_ms: f64,
}

/// Quantile-regression critic: an MLP mapping a state to m return
/// quantiles at the midpoints τ̂_i = (2i−1)/2m. Training leaves the
/// outputs unsorted; reporting sorts a copy.
pub struct QrHead {
    spec: MlpSpec,
    taus: Vec<f64>,
    obs_dim: usize,
    m: usize,
    kappa: f64,
}

impl QrHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        obs_dim: usize,
        m: usize,
        hidden: &[usize],
        kappa: f64,
    ) -> Result<Self, TrainerError> {
        let head = Self::attach(obs_dim, m, hidden, kappa);
        init_mlp(store, rng, "qr", &head.spec, true)?;
        Ok(head)
    }

    /// Describe an already-initialized head (checkpoint loads).
    pub fn attach(obs_dim: usize, m: usize, hidden: &[usize], kappa: f64) -> Self {
        assert!(obs_dim > 0, "degenerate observation width");
        assert!(m > 0, "at least one quantile");
        assert!(!hidden.is_empty(), "at least one hidden layer");
        assert!(
            kappa > 0.0 && kappa.is_finite(),
            "huber width must be positive"
        );
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(m);
        let spec = MlpSpec::new(sizes, Activation::Tanh, Activation::Identity);
        let taus = (1..=m)
            .map(|i| (2 * i - 1) as f64 / (2 * m) as f64)
            .collect();
        QrHead {
            spec,
            taus,
            obs_dim,
            m,
            kappa,
        }
    }

    pub fn quantile_count(&self) -> usize {
        self.m
    }

    /// Quantile midpoints τ̂_i, ascending.
    pub fn midpoints(&self) -> &[f64] {
        &self.taus
    }

    /// Raw quantile estimates at one state, in head order.
    pub fn quantiles(&self, store: &ParamStore, s: &[f32]) -> Result<Vec<f64>, TrainerError> {
        if s.len() != self.obs_dim {
            return Err(TrainerError::Batch("state width mismatch in quantile head"));
        }
        let mut tape = Tape::new();
        let input = tape.constant_parts(1, self.obs_dim, s.iter().map(|&v| v as f64).collect());
        let out = forward_mlp(&mut tape, store, "qr", &self.spec, input, true)?;
        Ok(tape.value(out).to_vec())
    }

    /// Quantile estimates sorted ascending, for reporting.
    pub fn sorted_quantiles(
        &self,
        store: &ParamStore,
        s: &[f32],
    ) -> Result<Vec<f64>, TrainerError> {
        let mut q = self.quantiles(store, s)?;
        q.sort_by(|a, b| a.partial_cmp(b).expect("finite quantiles"));
        Ok(q)
    }

    /// Mean of the quantile estimates — the scalar return estimate the
    /// policy path consumes as g_t.
    pub fn mean_return(&self, store: &ParamStore, s: &[f32]) -> Result<f64, TrainerError> {
        let q = self.quantiles(store, s)?;
        Ok(q.iter().sum::<f64>() / q.len() as f64)
    }

    /// Quantile Huber loss of the head against scalar targets, averaged
    /// over all n·m (sample, quantile) pairs. Minimize directly.
    ///
    /// The Huber value is built as c·u − c²/2 with c = clamp(u, ±κ):
    /// inside the band that is u²/2, outside κ(|u| − κ/2), and the
    /// u-gradient is exactly c on both branches, so no branch node is
    /// needed. The pinball weights |τ̂_i − 1[u<0]| depend only on the
    /// residual's sign and enter as data, not graph.
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        states: &Array,
        targets: &[f64],
    ) -> Result<NodeId, TrainerError> {
        let (n, d) = states.dims2();
        if d != self.obs_dim {
            return Err(TrainerError::Batch("state width mismatch in quantile loss"));
        }
        if n == 0 {
            return Err(TrainerError::Batch("empty quantile batch"));
        }
        if targets.len() != n {
            return Err(TrainerError::Batch("quantile targets must cover the batch"));
        }
        if targets.iter().any(|t| !t.is_finite()) {
            return Err(TrainerError::Batch("non-finite quantile target"));
        }
        let input = tape.constant(states);
        let theta = forward_mlp(tape, store, "qr", &self.spec, input, false)?;
        let ones = tape.constant_parts(1, self.m, vec![1.0; self.m]);
        let x_col = tape.constant_parts(n, 1, targets.to_vec());
        let x_tiled = tape.matmul(x_col, ones);
        let residual = tape.sub(x_tiled, theta);
        let clipped = tape.clamp(residual, -self.kappa, self.kappa);
        let linear = tape.mul(clipped, residual);
        let clipped_sq = tape.square(clipped);
        let half_sq = tape.scale(clipped_sq, 0.5);
        let huber = tape.sub(linear, half_sq);
        let residual_values = tape.value(residual).to_vec();
        let mut weights = Vec::with_capacity(n * self.m);
        for row in 0..n {
            for (i, &tau) in self.taus.iter().enumerate() {
                let u = residual_values[row * self.m + i];
                weights.push(if u < 0.0 { 1.0 - tau } else { tau });
            }
        }
        let w = tape.constant_parts(n, self.m, weights);
        let weighted = tape.mul(w, huber);
        Ok(tape.mean_all(weighted))
    }
}

/// The learner-specific half of the trainer: either the adversarial
/// return model with its three optimizers, or the quantile head.
enum ModelHead {
    Generative {
        model: ReturnModel,
        opt_disc: Adam,
        opt_eg: Adam,
        opt_gen: Adam,
    },
    Quantile {
        head: QrHead,
        opt: Adam,
    },
}

/// Read-only view the rollout workers use to draw (z_t, g_t).
enum ReturnSampler<'a> {
    Generative(&'a ReturnModel),
    Quantile(&'a QrHead),
}

impl ReturnSampler<'_> {
    fn sample(
        &self,
        store: &ParamStore,
        s: &[f32],
        rng: &mut ChaCha8Rng,
    ) -> Result<(LatentSample, f64), TrainerError> {
        match self {
            ReturnSampler::Generative(model) => {
                let (z, g) = model.sample_return(store, s, rng)?;
                Ok((z, g.get()))
            }
            ReturnSampler::Quantile(head) => {
                Ok((placeholder_latent(), head.mean_return(store, s)?))
            }
        }
    }
}

/// The quantile path has no latent variable; its records carry a fixed
/// degenerate sample so both paths share one record type.
fn placeholder_latent() -> LatentSample {
    LatentSample {
        z: vec![0.0],
        source_params: DiagGaussianParams::new(vec![0.0], vec![0.0])
            .expect("constant parameters are finite"),
        noise: vec![0.0],
    }
}

/// One worker's persistent rollout state. Episodes span collection
/// rounds, so the slot carries the live observation and the running
/// episode score across calls.
struct WorkerSlot {
    env: Box<dyn Env>,
    rng: ChaCha8Rng,
    obs: Option<Vec<f32>>,
    episode_return: f64,
}

struct WorkerYield {
    segments: Vec<RolloutSegment>,
    /// Undiscounted returns of episodes that finished this round.
    scores: Vec<f64>,
}

fn worker_rollout(
    slot: &mut WorkerSlot,
    store: &ParamStore,
    policy: &PolicyNet,
    sampler: &ReturnSampler<'_>,
    unroll: usize,
    version: u64,
) -> Result<WorkerYield, TrainerError> {
    let mut segments = Vec::new();
    let mut scores = Vec::new();
    let mut records: Vec<TransitionRecord> = Vec::new();
    for _ in 0..unroll {
        let obs = match slot.obs.take() {
            Some(o) => o,
            None => {
                let seed = slot.rng.gen();
                slot.episode_return = 0.0;
                slot.env.reset(seed).observation
            }
        };
        let (a, logp) = policy.sample_action(store, &obs, &mut slot.rng)?;
        let (z, g) = sampler.sample(store, &obs, &mut slot.rng)?;
        let (next, r, done) = slot.env.step(&a)?;
        let terminal = done && !next.truncated;
        slot.episode_return += r;
        records.push(TransitionRecord {
            s: obs,
            a,
            r,
            s_next: next.observation.clone(),
            done: terminal,
            logp,
            z,
            g: ReturnValue::new(g)?,
            version,
        });
        if done {
            scores.push(slot.episode_return);
            // Close the segment with a return sample at the successor
            // state. Terminal segments never read it, but drawing it
            // unconditionally keeps the noise stream uniform.
            let (_, tail) = sampler.sample(store, &next.observation, &mut slot.rng)?;
            segments.push(RolloutSegment {
                records: std::mem::take(&mut records),
                bootstrap: tail,
            });
            slot.obs = None;
        } else {
            slot.obs = Some(next.observation);
        }
    }
    if !records.is_empty() {
        let obs = slot
            .obs
            .as_ref()
            .expect("open segment leaves a live observation");
        let (_, tail) = sampler.sample(store, obs, &mut slot.rng)?;
        segments.push(RolloutSegment {
            records,
            bootstrap: tail,
        });
    }
    Ok(WorkerYield { segments, scores })
}

fn panic_text(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "opaque panic payload".to_string()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Sense {
    Ascend,
    Descend,
}

/// Build one objective on a fresh tape, check it is a number, and take
/// one optimizer step in the requested direction. Returns the
/// objective's value before the step.
fn step_objective<F>(
    store: &mut ParamStore,
    opt: &mut Adam,
    lr: f64,
    sense: Sense,
    what: &'static str,
    update: u64,
    build: F,
) -> Result<f64, TrainerError>
where
    F: FnOnce(&mut Tape, &ParamStore) -> Result<NodeId, TrainerError>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let objective = build(&mut tape, store)?;
    let value = tape.value_scalar(objective);
    if !value.is_finite() {
        return Err(TrainerError::NonFiniteLoss { what, update });
    }
    let loss = match sense {
        Sense::Ascend => tape.scale(objective, -1.0),
        Sense::Descend => objective,
    };
    tape.backward(loss, store)?;
    opt.step(store, lr)?;
    Ok(value)
}

fn anneal_factor(opts: &TrainerOptions, update_idx: u64) -> f64 {
    if !opts.anneal_lr {
        return 1.0;
    }
    let t = update_idx.min(opts.total_updates) as f64;
    1.0 - t / opts.total_updates as f64
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn gather<T: Clone>(values: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| values[i].clone()).collect()
}

pub struct Trainer {
    opts: TrainerOptions,
    store: ParamStore,
    policy: PolicyNet,
    head: ModelHead,
    opt_policy: Adam,
    workers: Vec<WorkerSlot>,
    curiosity: Option<CuriosityConfig>,
    stats: RunningStats,
    recent_scores: VecDeque<f64>,
    version: u64,
    update_idx: u64,
    env_steps: u64,
    update_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(opts: TrainerOptions, spec: &EnvSpec) -> Result<Self, TrainerError> {
        opts.validate()?;
        // One master stream hands out all derived seeds in a fixed
        // order: worker rollout streams first, then initialization,
        // then the update-phase stream.
        let mut master = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut workers = Vec::with_capacity(opts.workers);
        for _ in 0..opts.workers {
            let worker_seed: u64 = master.gen();
            workers.push(WorkerSlot {
                env: make_env(spec)?,
                rng: ChaCha8Rng::seed_from_u64(worker_seed),
                obs: None,
                episode_return: 0.0,
            });
        }
        let init_seed: u64 = master.gen();
        let update_seed: u64 = master.gen();
        let mut init_rng = ChaCha8Rng::seed_from_u64(init_seed);

        let obs_dim = workers[0].env.obs_dim();
        let space = workers[0].env.action_space();
        let mut store = ParamStore::new();
        let policy = PolicyNet::new(&mut store, &mut init_rng, obs_dim, space, &opts.hidden)?;
        let head = match opts.algorithm {
            Algorithm::Bdpg | Algorithm::BdpgNaive => {
                let mut model = ReturnModel::new(
                    &mut store,
                    &mut init_rng,
                    obs_dim,
                    opts.latent_dim,
                    &opts.hidden,
                )?;
                model.set_critic_noise(opts.critic_noise);
                let opt_disc = Adam::new(&store, &["disc"]);
                let opt_eg = Adam::new(&store, &["enc", "prior"]);
                let opt_gen = Adam::new(&store, &["gen"]);
                ModelHead::Generative {
                    model,
                    opt_disc,
                    opt_eg,
                    opt_gen,
                }
            }
            Algorithm::PpoQr => {
                let head = QrHead::new(
                    &mut store,
                    &mut init_rng,
                    obs_dim,
                    opts.quantiles,
                    &opts.hidden,
                    opts.qr_kappa,
                )?;
                let opt = Adam::new(&store, &["qr"]);
                ModelHead::Quantile { head, opt }
            }
        };
        let opt_policy = Adam::new(&store, &["pi"]);
        let curiosity = if opts.eta > 0.0 {
            Some(CuriosityConfig::new(opts.eta, opts.u_bar)?)
        } else {
            None
        };
        Ok(Trainer {
            opts,
            store,
            policy,
            head,
            opt_policy,
            workers,
            curiosity,
            stats: RunningStats::new(),
            recent_scores: VecDeque::with_capacity(SCORE_WINDOW),
            version: 0,
            update_idx: 0,
            env_steps: 0,
            update_rng: ChaCha8Rng::seed_from_u64(update_seed),
        })
    }

    /// Walk every worker `unroll` steps against the current frozen
    /// snapshot. Workers run in parallel; the batch is assembled in
    /// worker-index order, so collection is deterministic under a fixed
    /// seed set.
    pub fn collect(&mut self) -> Result<RolloutBatch, TrainerError> {
        let unroll = self.opts.effective_unroll();
        let version = self.version;
        let store = &self.store;
        let policy = &self.policy;
        let sampler = match &self.head {
            ModelHead::Generative { model, .. } => ReturnSampler::Generative(model),
            ModelHead::Quantile { head, .. } => ReturnSampler::Quantile(head),
        };
        let workers = &mut self.workers;
        let results: Vec<Result<WorkerYield, TrainerError>> =
            std::thread::scope(|scope| {
                let mut handles = Vec::with_capacity(workers.len());
                for slot in workers.iter_mut() {
                    let sampler = &sampler;
                    handles.push(scope.spawn(move || {
                        worker_rollout(slot, store, policy, sampler, unroll, version)
                    }));
                }
                handles
                    .into_iter()
                    .enumerate()
                    .map(|(worker, handle)| match handle.join() {
                        Ok(result) => result,
                        Err(payload) => Err(TrainerError::WorkerPanic {
                            worker,
                            message: panic_text(payload),
                        }),
                    })
                    .collect()
            });

        let mut segments = Vec::new();
        let mut collected = 0usize;
        for result in results {
            let yielded = result?;
            for score in yielded.scores {
                if self.recent_scores.len() == SCORE_WINDOW {
                    self.recent_scores.pop_front();
                }
                self.recent_scores.push_back(score);
            }
            collected += yielded
                .segments
                .iter()
                .map(|s| s.records.len())
                .sum::<usize>();
            segments.extend(yielded.segments);
        }
        let steps = self.workers.len() * unroll;
        assert_eq!(collected, steps, "every unroll step yields one record");
        self.env_steps += steps as u64;
        Ok(RolloutBatch {
            segments,
            version,
            steps,
        })
    }

    /// Turn a batch into advantages, Bellman targets, information gains,
    /// and curiosity-augmented advantages, all under the same snapshot
    /// that collected it.
    pub fn compute_targets(
        &mut self,
        batch: &RolloutBatch,
    ) -> Result<AdvantageBatch, TrainerError> {
        if batch.version != self.version {
            return Err(TrainerError::SnapshotMixed {
                expected: self.version,
                got: batch.version,
            });
        }
        if batch.is_empty() {
            return Err(TrainerError::Batch("empty rollout batch"));
        }
        let gamma = self.opts.gamma;
        let lambda = self.opts.lambda;
        let k = self.opts.effective_k();

        let mut trajectories = Vec::with_capacity(batch.segments.len());
        let mut adv = Vec::with_capacity(batch.len());
        let mut x = Vec::with_capacity(batch.len());
        let mut bootstraps = Vec::with_capacity(batch.segments.len());
        for seg in &batch.segments {
            if seg.records.is_empty() {
                return Err(TrainerError::Batch("empty rollout segment"));
            }
            for rec in &seg.records {
                if rec.version != batch.version {
                    return Err(TrainerError::SnapshotMixed {
                        expected: batch.version,
                        got: rec.version,
                    });
                }
            }
            let rewards: Vec<f64> = seg.records.iter().map(|r| r.r).collect();
            let dones: Vec<bool> = seg.records.iter().map(|r| r.done).collect();
            let mut returns: Vec<f64> = seg.records.iter().map(|r| r.g.get()).collect();
            returns.push(seg.bootstrap);
            let traj = TrajectorySegment::new(rewards, returns, dones, gamma, lambda)?;
            let a = gae(&traj);
            for (t, rec) in seg.records.iter().enumerate() {
                let xt = match self.opts.target {
                    TargetKind::KStep => bellman_target(&traj, t, k)?,
                    TargetKind::GaePlusG => a[t] + rec.g.get(),
                };
                x.push(xt);
            }
            adv.extend_from_slice(&a);
            bootstraps.push(seg.bootstrap);
            trajectories.push(traj);
        }
        if x.iter().chain(adv.iter()).any(|v| !v.is_finite()) {
            return Err(TrainerError::Batch("non-finite advantage or target"));
        }

        // Posterior information gain of the Bellman target over the
        // rollout sample, measured under the pre-update snapshot.
        let mut ig = vec![0.0; x.len()];
        if let ModelHead::Generative { model, .. } = &self.head {
            let mut i = 0;
            for seg in &batch.segments {
                for rec in &seg.records {
                    let post_x = model.encoder_params(&self.store, x[i], &rec.s)?;
                    let post_g = model.encoder_params(&self.store, rec.g.get(), &rec.s)?;
                    ig[i] = information_gain(&post_x, &post_g)?;
                    i += 1;
                }
            }
        }
        let rc = match &self.curiosity {
            // The whole batch is scored against one frozen view of the
            // normalization statistics, which then absorb it at once.
            Some(cfg) => curiosity_rewards(&ig, cfg, &mut self.stats),
            None => vec![0.0; ig.len()],
        };
        let adv_c = if self.curiosity.is_some() {
            let mut out = Vec::with_capacity(adv.len());
            let mut offset = 0;
            for traj in &trajectories {
                let n = traj.len();
                out.extend(augment_advantage(traj, &rc[offset..offset + n])?);
                offset += n;
            }
            out
        } else {
            // Curiosity off: the augmented advantages are the plain
            // ones, bit for bit.
            adv.clone()
        };

        Ok(AdvantageBatch {
            adv,
            x,
            rc,
            adv_c,
            ig,
            bootstraps,
            version: batch.version,
            raw_reward_targets: true,
            augmented_advantages_separate: true,
        })
    }

    /// Run the minibatch update phases over one batch and emit a metrics
    /// row. On a non-finite loss the trainer aborts, dropping a forensic
    /// checkpoint into the configured dump directory first.
    pub fn update(
        &mut self,
        batch: &RolloutBatch,
        targets: &AdvantageBatch,
    ) -> Result<MetricsRow, TrainerError> {
        let result = self.update_inner(batch, targets);
        if let Err(TrainerError::NonFiniteLoss { .. }) = &result {
            self.dump_checkpoint();
        }
        result
    }

    fn update_inner(
        &mut self,
        batch: &RolloutBatch,
        targets: &AdvantageBatch,
    ) -> Result<MetricsRow, TrainerError> {
        if batch.version != self.version || targets.version != self.version {
            return Err(TrainerError::SnapshotMixed {
                expected: self.version,
                got: batch.version.min(targets.version),
            });
        }
        let (raw_targets, separate_augmented) = targets.witnesses();
        if !raw_targets || !separate_augmented {
            return Err(TrainerError::Batch(
                "advantage batch skipped its construction checks",
            ));
        }
        let n = batch.len();
        if n == 0 {
            return Err(TrainerError::Batch("empty rollout batch"));
        }
        if targets.len() != n || targets.adv_c.len() != n {
            return Err(TrainerError::Batch("targets do not cover the batch"));
        }
        let started = Instant::now();

        let mut states = Vec::with_capacity(n);
        let mut actions = Vec::with_capacity(n);
        let mut logp_old = Vec::with_capacity(n);
        for seg in &batch.segments {
            for rec in &seg.records {
                states.push(rec.s.clone());
                actions.push(rec.a.clone());
                logp_old.push(rec.logp);
            }
        }
        let adv_norm = normalize_advantages(&targets.adv_c);

        let anneal = anneal_factor(&self.opts, self.update_idx);
        let lr_policy = self.opts.lr_policy * anneal;
        let lr_disc = self.opts.lr_disc * anneal;
        let lr_eg = self.opts.lr_enc_prior * anneal;
        let lr_gen = self.opts.lr_gen * anneal;
        let eps_clip = self.opts.eps_clip;
        let entropy_coef = self.opts.entropy_coef;
        let obs_dim = self.policy.obs_dim();
        let update = self.update_idx;

        let mut indices: Vec<usize> = (0..n).collect();
        let mut d_sum = 0.0;
        let mut eg_sum = 0.0;
        let mut recon_sum = 0.0;
        let mut surrogate_sum = 0.0;
        let mut entropy_sum = 0.0;
        let mut minibatches = 0usize;
        for _ in 0..self.opts.epochs {
            indices.shuffle(&mut self.update_rng);
            for chunk in indices.chunks(self.opts.minibatch) {
                let s_mb = states_to_array(&gather(&states, chunk), obs_dim)?;
                let x_mb = gather(&targets.x, chunk);
                match &mut self.head {
                    ModelHead::Generative {
                        model,
                        opt_disc,
                        opt_eg,
                        opt_gen,
                    } => {
                        let model = &*model;
                        // One shared noise draw per minibatch: each
                        // phase rebuilds x̃ and z̃ fresh from it under
                        // its own freeze pattern.
                        let noise = sample_minibatch_noise(
                            chunk.len(),
                            model.latent_dim(),
                            &mut self.update_rng,
                        );
                        d_sum += step_objective(
                            &mut self.store,
                            opt_disc,
                            lr_disc,
                            Sense::Ascend,
                            "discriminator objective",
                            update,
                            |tape, store| {
                                Ok(model.discriminator_loss(tape, store, &s_mb, &x_mb, &noise)?)
                            },
                        )?;
                        eg_sum += step_objective(
                            &mut self.store,
                            opt_eg,
                            lr_eg,
                            Sense::Ascend,
                            "encoder/prior objective",
                            update,
                            |tape, store| {
                                Ok(model.encoder_prior_loss(tape, store, &s_mb, &x_mb, &noise)?)
                            },
                        )?;
                        recon_sum += step_objective(
                            &mut self.store,
                            opt_gen,
                            lr_gen,
                            Sense::Descend,
                            "reconstruction loss",
                            update,
                            |tape, store| {
                                Ok(model.reconstruction_loss(tape, store, &s_mb, &x_mb, &noise)?)
                            },
                        )?;
                    }
                    ModelHead::Quantile { head, opt } => {
                        let head = &*head;
                        recon_sum += step_objective(
                            &mut self.store,
                            opt,
                            lr_gen,
                            Sense::Descend,
                            "quantile regression loss",
                            update,
                            |tape, store| head.loss(tape, store, &s_mb, &x_mb),
                        )?;
                    }
                }
                let a_mb = gather(&actions, chunk);
                let logp_mb = gather(&logp_old, chunk);
                let adv_mb = gather(&adv_norm, chunk);
                let policy = &self.policy;
                let mut surrogate_entropy = (0.0, 0.0);
                step_objective(
                    &mut self.store,
                    &mut self.opt_policy,
                    lr_policy,
                    Sense::Ascend,
                    "policy objective",
                    update,
                    |tape, store| {
                        let surrogate = policy
                            .ppo_loss(tape, store, &s_mb, &a_mb, &logp_mb, &adv_mb, eps_clip)?;
                        let entropy = policy.entropy_node(tape, store, &s_mb)?;
                        surrogate_entropy =
                            (tape.value_scalar(surrogate), tape.value_scalar(entropy));
                        let bonus = tape.scale(entropy, entropy_coef);
                        Ok(tape.add(surrogate, bonus))
                    },
                )?;
                surrogate_sum += surrogate_entropy.0;
                entropy_sum += surrogate_entropy.1;
                minibatches += 1;
            }
        }

        let b = minibatches as f64;
        let (score_mean, score_std) = self.score_stats();
        let (ig_mean, _) = mean_std(&targets.ig);
        let ig_max = targets.ig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (rc_mean, _) = mean_std(&targets.rc);
        let row = MetricsRow {
            update_idx: self.update_idx,
            env_steps: self.env_steps,
            score_mean,
            score_std,
            policy_loss: surrogate_sum / b,
            d_loss: d_sum / b,
            eg_loss: eg_sum / b,
            recon_loss: recon_sum / b,
            ig_mean,
            ig_max,
            rc_mean,
            entropy: entropy_sum / b,
            eta_t: self
                .curiosity
                .as_ref()
                .map(decay_coefficient)
                .unwrap_or(0.0),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        self.update_idx += 1;
        self.version += 1;
        if let Some(cfg) = &mut self.curiosity {
            cfg.advance();
        }
        Ok(row)
    }

    /// One full training round: collect, compute targets, update. The
    /// row's wall time covers the whole round.
    pub fn round(&mut self) -> Result<MetricsRow, TrainerError> {
        let started = Instant::now();
        let batch = self.collect()?;
        let targets = self.compute_targets(&batch)?;
        let mut row = self.update(&batch, &targets)?;
        row.wall_ms = started.elapsed().as_secs_f64() * 1e3;
        Ok(row)
    }

    fn dump_checkpoint(&self) {
        let Some(dir) = &self.opts.dump_dir else {
            return;
        };
        let path = dir.join(format!("abort-update-{:05}.ckpt", self.update_idx));
        // Forensic dump; a failed write must not mask the original error.
        let _ = save_checkpoint(&path, &self.store, &self.optimizers());
    }

    /// Optimizer states labelled for checkpointing.
    pub fn optimizers(&self) -> Vec<(&'static str, &Adam)> {
        let mut out = vec![("policy", &self.opt_policy)];
        match &self.head {
            ModelHead::Generative {
                opt_disc,
                opt_eg,
                opt_gen,
                ..
            } => {
                out.push(("disc", opt_disc));
                out.push(("enc_prior", opt_eg));
                out.push(("gen", opt_gen));
            }
            ModelHead::Quantile { opt, .. } => out.push(("qr", opt)),
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainerError> {
        save_checkpoint(path, &self.store, &self.optimizers())?;
        Ok(())
    }

    /// Replace parameters and optimizer state from a checkpoint written
    /// by a trainer with the same algorithm.
    pub fn restore(&mut self, path: &Path) -> Result<(), TrainerError> {
        let (store, optimizers) = load_checkpoint(path)?;
        for (label, adam) in optimizers {
            match (label.as_str(), &mut self.head) {
                ("policy", _) => self.opt_policy = adam,
                ("disc", ModelHead::Generative { opt_disc, .. }) => *opt_disc = adam,
                ("enc_prior", ModelHead::Generative { opt_eg, .. }) => *opt_eg = adam,
                ("gen", ModelHead::Generative { opt_gen, .. }) => *opt_gen = adam,
                ("qr", ModelHead::Quantile { opt, .. }) => *opt = adam,
                _ => {
                    return Err(TrainerError::Config(
                        "checkpoint optimizers do not match the configured algorithm",
                    ))
                }
            }
        }
        self.store = store;
        Ok(())
    }

    pub fn options(&self) -> &TrainerOptions {
        &self.opts
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn policy(&self) -> &PolicyNet {
        &self.policy
    }

    pub fn model(&self) -> Option<&ReturnModel> {
        match &self.head {
            ModelHead::Generative { model, .. } => Some(model),
            ModelHead::Quantile { .. } => None,
        }
    }

    pub fn qr_head(&self) -> Option<&QrHead> {
        match &self.head {
            ModelHead::Quantile { head, .. } => Some(head),
            ModelHead::Generative { .. } => None,
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn update_idx(&self) -> u64 {
        self.update_idx
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    /// Mean and deviation of the last hundred completed episode scores.
    pub fn score_stats(&self) -> (f64, f64) {
        let window: Vec<f64> = self.recent_scores.iter().copied().collect();
        mean_std(&window)
    }
}

/// Roll a frozen policy for `episodes` full episodes and report the mean
/// and deviation of the undiscounted episode scores.
pub fn evaluate_policy(
    env: &mut dyn Env,
    policy: &PolicyNet,
    store: &ParamStore,
    episodes: usize,
    seed: u64,
) -> Result<(f64, f64), TrainerError> {
    if episodes == 0 {
        return Err(TrainerError::Config(
            "evaluation needs at least one episode",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scores = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut state = env.reset(rng.gen());
        let mut total = 0.0;
        loop {
            let (a, _) = policy.sample_action(store, &state.observation, &mut rng)?;
            let (next, r, done) = env.step(&a)?;
            total += r;
            state = next;
            if done {
                break;
            }
        }
        scores.push(total);
    }
    Ok(mean_std(&scores))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> TrainerOptions {
        TrainerOptions::default()
    }

    #[test]
    fn option_validation_rejects_bad_ranges() {
        let spec = EnvSpec::ChainWorld { n: 4 };
        let cases: Vec<(TrainerOptions, &str)> = vec![
            (
                TrainerOptions {
                    gamma: 1.0,
                    ..opts()
                },
                "gamma",
            ),
            (
                TrainerOptions {
                    lambda: -0.1,
                    ..opts()
                },
                "lambda",
            ),
            (
                TrainerOptions {
                    workers: 0,
                    ..opts()
                },
                "workers",
            ),
            (
                TrainerOptions {
                    bootstrap_k: Some(0),
                    ..opts()
                },
                "bootstrap",
            ),
            (
                TrainerOptions {
                    algorithm: Algorithm::BdpgNaive,
                    eta: 0.5,
                    ..opts()
                },
                "naive with curiosity",
            ),
            (
                TrainerOptions {
                    algorithm: Algorithm::PpoQr,
                    eta: 0.0,
                    quantiles: 0,
                    ..opts()
                },
                "zero quantiles",
            ),
            (
                TrainerOptions {
                    lr_disc: f64::NAN,
                    ..opts()
                },
                "nan learning rate",
            ),
        ];
        for (bad, label) in cases {
            let result = Trainer::new(bad, &spec);
            assert!(
                matches!(result, Err(TrainerError::Config(_))),
                "{label} should be rejected"
            );
        }
    }

    #[test]
    fn horizon_switch_ties_and_decouples_bootstrap_length() {
        let tied = opts();
        assert_eq!(tied.effective_unroll(), 128);
        assert_eq!(tied.effective_k(), 128);

        let short = TrainerOptions {
            bootstrap_k: Some(32),
            ..opts()
        };
        assert_eq!(short.effective_k(), 32);
        assert_eq!(short.effective_unroll(), 128);

        let long = TrainerOptions {
            bootstrap_k: Some(200),
            ..opts()
        };
        assert_eq!(long.effective_k(), 200);
        assert_eq!(long.effective_unroll(), 200);
    }

    #[test]
    fn quantile_midpoints_sit_at_the_cell_centers() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = QrHead::new(&mut store, &mut rng, 1, 4, &[8], QR_KAPPA).unwrap();
        let taus = head.midpoints();
        let expected = [0.125, 0.375, 0.625, 0.875];
        for (got, want) in taus.iter().zip(expected) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn quantile_loss_is_zero_at_an_exact_fit() {
        // Zero-initialized final layer means every quantile reads 0, so
        // zero targets are fitted exactly and the loss vanishes.
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = QrHead::new(&mut store, &mut rng, 2, 3, &[8], QR_KAPPA).unwrap();
        let states = Array::from_vec(&[2, 2], vec![0.3, -0.4, 1.0, 0.5]).unwrap();
        let mut tape = Tape::new();
        let loss = head.loss(&mut tape, &store, &states, &[0.0, 0.0]).unwrap();
        assert_eq!(tape.value_scalar(loss), 0.0);
    }

    #[test]
    fn single_quantile_huber_recovers_a_constant_target() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = QrHead::new(&mut store, &mut rng, 1, 1, &[16], QR_KAPPA).unwrap();
        let mut opt = Adam::new(&store, &["qr"]);
        let states = Array::from_vec(&[8, 1], vec![1.0; 8]).unwrap();
        let targets = vec![0.7; 8];
        for _ in 0..400 {
            store.zero_grads();
            let mut tape = Tape::new();
            let loss = head.loss(&mut tape, &store, &states, &targets).unwrap();
            tape.backward(loss, &mut store).unwrap();
            opt.step(&mut store, 1e-2).unwrap();
        }
        let q = head.quantiles(&store, &[1.0]).unwrap();
        assert!((q[0] - 0.7).abs() < 1e-2, "median sits at {}", q[0]);
    }

    #[test]
    fn two_point_targets_recover_both_atoms_in_the_pinball_limit() {
        // With a wide Huber band the near atom's pull is linearized and
        // the fixed points bias inward, so the closed-form check of the
        // empirical quantiles needs a narrow band.
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = QrHead::new(&mut store, &mut rng, 1, 2, &[16], 0.05).unwrap();
        let mut opt = Adam::new(&store, &["qr"]);
        let states = Array::from_vec(&[16, 1], vec![1.0; 16]).unwrap();
        let targets: Vec<f64> = (0..16)
            .map(|i| if i % 2 == 0 { -1.0 } else { 1.0 })
            .collect();
        for _ in 0..1500 {
            store.zero_grads();
            let mut tape = Tape::new();
            let loss = head.loss(&mut tape, &store, &states, &targets).unwrap();
            tape.backward(loss, &mut store).unwrap();
            opt.step(&mut store, 5e-3).unwrap();
        }
        let q = head.sorted_quantiles(&store, &[1.0]).unwrap();
        assert!((q[0] + 1.0).abs() < 0.08, "lower quantile sits at {}", q[0]);
        assert!((q[1] - 1.0).abs() < 0.08, "upper quantile sits at {}", q[1]);
    }

    #[test]
    fn quantile_loss_rejects_mismatched_targets() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head = QrHead::new(&mut store, &mut rng, 2, 2, &[4], QR_KAPPA).unwrap();
        let states = Array::from_vec(&[2, 2], vec![0.0; 4]).unwrap();
        let mut tape = Tape::new();
        let result = head.loss(&mut tape, &store, &states, &[1.0]);
        assert!(matches!(result, Err(TrainerError::Batch(_))));
    }

    #[test]
    fn annealing_walks_linearly_to_zero() {
        let mut o = opts();
        o.total_updates = 10;
        assert_eq!(anneal_factor(&o, 0), 1.0);
        assert!((anneal_factor(&o, 5) - 0.5).abs() < 1e-15);
        assert!((anneal_factor(&o, 10) - 0.0).abs() < 1e-15);
        assert_eq!(anneal_factor(&o, 25), 0.0);
        o.anneal_lr = false;
        assert_eq!(anneal_factor(&o, 9), 1.0);
    }

    #[test]
    fn score_summary_handles_empty_and_simple_windows() {
        assert_eq!(mean_std(&[]), (0.0, 0.0));
        let (mean, std) = mean_std(&[2.0, 4.0]);
        assert!((mean - 3.0).abs() < 1e-15);
        assert!((std - 1.0).abs() < 1e-15);
    }

    #[test]
    fn placeholder_latent_is_well_formed() {
        let z = placeholder_latent();
        assert_eq!(z.z.len(), 1);
        assert_eq!(z.source_params.dim(), 1);
    }
}
