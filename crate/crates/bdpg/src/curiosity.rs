//! Posterior information-gain curiosity.
//!
//! The intrinsic signal is the KL divergence between the encoder's
//! posterior conditioned on the Bellman target x(s) and the posterior
//! conditioned on the model's own return sample g(s) — once the return
//! model has converged the two conditionings agree and the gain
//! vanishes. Raw gains pass through a clip → normalize → floor → decay
//! pipeline before being added to rewards; the paper states the
//! truncation and running normalization without fixing their order, so
//! the order here is a documented choice pinned by a regression test.

use std::fmt;

use crate::bellman::{gae, BellmanError, TrajectorySegment};
use crate::return_model::DiagGaussianParams;

/// Guard for divisions by a running standard deviation.
const NORM_EPS: f64 = 1e-8;

/// Errors from curiosity configuration and reward computation.
#[derive(Debug, Clone, PartialEq)]
pub enum CuriosityError {
    EtaOutOfRange(f64),
    CapOutOfRange(f64),
    /// The decayed schedule needs log t > 0, so the counter starts at 2.
    StepTooSmall(u64),
    DimMismatch {
        left: usize,
        right: usize,
    },
    NonFinite {
        what: &'static str,
    },
    LengthMismatch {
        expected: usize,
        got: usize,
    },
    Segment(BellmanError),
}

impl fmt::Display for CuriosityError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CuriosityError::EtaOutOfRange(v) => write!(f, "eta must be positive, got {v}"),
            CuriosityError::CapOutOfRange(v) => {
                write!(f, "truncation cap must be positive, got {v}")
            }
            CuriosityError::StepTooSmall(t) => {
                write!(f, "decay counter must be at least 2, got {t}")
            }
            CuriosityError::DimMismatch { left, right } => {
                write!(f, "posterior dimensions differ: {left} vs {right}")
            }
            CuriosityError::NonFinite { what } => write!(f, "non-finite {what}"),
            CuriosityError::LengthMismatch { expected, got } => {
                write!(f, "expected {expected} curiosity rewards, got {got}")
            }
            CuriosityError::Segment(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CuriosityError {}

impl From<BellmanError> for CuriosityError {
    fn from(e: BellmanError) -> Self {
        CuriosityError::Segment(e)
    }
}

/// Streaming mean/variance accumulator in Welford form.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn new() -> Self {
        RunningStats::default()
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.mean
        }
    }

    /// Population variance; zero until two samples have arrived.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0)
        }
    }

    pub fn std(&self) -> f64 {
        self.variance().sqrt()
    }

    /// Scale used by the normalization pipeline: before two samples have
    /// arrived there is no spread estimate, so the scale defaults to 1
    /// and the pipeline degrades to plain truncation.
    fn effective_std(&self) -> f64 {
        if self.count < 2 {
            1.0
        } else {
            self.std().max(NORM_EPS)
        }
    }
}

/// Intrinsic-reward hyperparameters plus the global decay counter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CuriosityConfig {
    eta: f64,
    u_bar: f64,
    t: u64,
}

impl CuriosityConfig {
    /// `eta` is the initial coefficient, `u_bar` the truncation cap. The
    /// decay counter starts at 2 so `log t` is strictly positive.
    pub fn new(eta: f64, u_bar: f64) -> Result<Self, CuriosityError> {
        CuriosityConfig::with_step(eta, u_bar, 2)
    }

    pub fn with_step(eta: f64, u_bar: f64, t: u64) -> Result<Self, CuriosityError> {
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(CuriosityError::EtaOutOfRange(eta));
        }
        if !(u_bar > 0.0) || !u_bar.is_finite() {
            return Err(CuriosityError::CapOutOfRange(u_bar));
        }
        if t < 2 {
            return Err(CuriosityError::StepTooSmall(t));
        }
        Ok(CuriosityConfig { eta, u_bar, t })
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn u_bar(&self) -> f64 {
        self.u_bar
    }

    pub fn step(&self) -> u64 {
        self.t
    }

    /// Advance the per-update-round counter.
    pub fn advance(&mut self) {
        self.t += 1;
    }
}

/// KL(post_x ‖ post_g) between two diagonal Gaussians, summed over
/// latent coordinates. Nonnegative by construction; tiny negative
/// rounding residue is floored at zero.
pub fn information_gain(
    post_x: &DiagGaussianParams,
    post_g: &DiagGaussianParams,
) -> Result<f64, CuriosityError> {
    if post_x.dim() != post_g.dim() {
        return Err(CuriosityError::DimMismatch {
            left: post_x.dim(),
            right: post_g.dim(),
        });
    }
    let mut kl = 0.0;
    for i in 0..post_x.dim() {
        let (mx, lx) = (post_x.mean()[i], post_x.log_std()[i]);
        let (mg, lg) = (post_g.mean()[i], post_g.log_std()[i]);
        let var_ratio = (2.0 * (lx - lg)).exp();
        let mean_term = (mx - mg) * (mx - mg) * (-2.0 * lg).exp();
        kl += lg - lx + 0.5 * (var_ratio + mean_term) - 0.5;
    }
    if !kl.is_finite() {
        return Err(CuriosityError::NonFinite {
            what: "information gain",
        });
    }
    Ok(kl.max(0.0))
}

/// Decayed curiosity coefficient `η_t = η √(ln t / t)` at the config's
/// current counter.
pub fn decay_coefficient(cfg: &CuriosityConfig) -> f64 {
    decay_at(cfg.eta, cfg.t as f64)
}

/// The same schedule evaluated at a continuous point, for analysis.
pub fn decay_at(eta: f64, t: f64) -> f64 {
    eta * (t.ln() / t).sqrt()
}

/// Map one raw information gain to a bounded intrinsic reward against a
/// frozen view of the running statistics:
/// clip at `μ + ū·σ`, center and scale by (μ, σ), floor at zero, cap at
/// `ū`, then scale by `η_t`. Returns the reward and the clipped value
/// that the statistics should absorb.
fn reward_against(u: f64, cfg: &CuriosityConfig, stats: &RunningStats) -> (f64, f64) {
    let mu = stats.mean();
    let sigma = stats.effective_std();
    let raw_cap = mu + cfg.u_bar * sigma;
    let clipped = u.min(raw_cap);
    let normalized = ((clipped - mu) / sigma).max(0.0);
    let reward = decay_coefficient(cfg) * normalized.min(cfg.u_bar);
    (reward, clipped)
}

/// Single-observation form: compute the reward, then update the running
/// statistics with the clipped gain.
pub fn curiosity_reward(u: f64, cfg: &CuriosityConfig, stats: &mut RunningStats) -> f64 {
    let (reward, clipped) = reward_against(u.max(0.0), cfg, stats);
    stats.push(clipped);
    reward
}

/// Batch form used by the trainer: every reward in the batch is computed
/// against the same frozen snapshot of the statistics, then the snapshot
/// absorbs all clipped gains at once. This is deliberately not the fold
/// of the single-observation form — workers must not see statistics that
/// shift inside one update round.
pub fn curiosity_rewards(us: &[f64], cfg: &CuriosityConfig, stats: &mut RunningStats) -> Vec<f64> {
    let snapshot = *stats;
    let mut rewards = Vec::with_capacity(us.len());
    let mut clipped_values = Vec::with_capacity(us.len());
    for &u in us {
        let (reward, clipped) = reward_against(u.max(0.0), cfg, &snapshot);
        rewards.push(reward);
        clipped_values.push(clipped);
    }
    for c in clipped_values {
        stats.push(c);
    }
    rewards
}

/// Recompute GAE over a segment whose rewards are augmented by the
/// per-step curiosity bonus. The segment's original rewards — and hence
/// any Bellman targets derived from them — are untouched.
pub fn augment_advantage(
    seg: &TrajectorySegment,
    curiosity: &[f64],
) -> Result<Vec<f64>, CuriosityError> {
    if curiosity.len() != seg.len() {
        return Err(CuriosityError::LengthMismatch {
            expected: seg.len(),
            got: curiosity.len(),
        });
    }
    if curiosity.iter().any(|c| !c.is_finite()) {
        return Err(CuriosityError::NonFinite {
            what: "curiosity reward",
        });
    }
    let rewards: Vec<f64> = seg
        .rewards()
        .iter()
        .zip(curiosity)
        .map(|(&r, &c)| r + c)
        .collect();
    let augmented = TrajectorySegment::new(
        rewards,
        seg.returns().to_vec(),
        seg.dones().to_vec(),
        seg.gamma(),
        seg.lambda(),
    )?;
    Ok(gae(&augmented))
}
