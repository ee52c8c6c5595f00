//! Distributional Bellman machinery: k-step targets, GAE advantages,
//! exact 1-D Wasserstein distances, and a tabular distributional
//! dynamic-programming oracle.
//!
//! The oracle side works with return distributions represented as
//! probability masses on a fixed uniform support grid. Pushing such a
//! collection through a tabular MDP's transition/reward structure is
//! exact up to the final re-gridding step, which uses two-point linear
//! mass interpolation; that keeps total mass conserved and lets the
//! contraction of the operator be certified numerically.

use std::fmt;

use rand::Rng;

/// Errors from segment construction, transport computations and the
/// tabular oracle.
#[derive(Debug, Clone, PartialEq)]
pub enum BellmanError {
    /// Segment arrays disagree: `returns` must be one longer than
    /// `rewards`, `dones` the same length as `rewards`.
    LengthMismatch {
        rewards: usize,
        returns: usize,
        dones: usize,
    },
    DiscountOutOfRange(f64),
    LambdaOutOfRange(f64),
    NonFinite {
        what: &'static str,
        index: usize,
    },
    IndexOutOfRange {
        index: usize,
        len: usize,
    },
    ZeroHorizon,
    EmptyInput(&'static str),
    /// `wasserstein_1d` was given a grid law on one side and samples on
    /// the other.
    MixedRepresentation,
    SupportNotIncreasing {
        index: usize,
    },
    MassNotNormalized {
        total: f64,
    },
    NegativeMass {
        index: usize,
    },
    /// Distributions that must share a support grid do not.
    SupportMismatch,
    TransitionRowNotNormalized {
        state: usize,
        total: f64,
    },
    BadRewardTable {
        state: usize,
    },
    StateCountMismatch {
        expected: usize,
        got: usize,
    },
}

impl fmt::Display for BellmanError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BellmanError::LengthMismatch {
                rewards,
                returns,
                dones,
            } => write!(
                f,
                "segment lengths inconsistent: {rewards} rewards, {returns} returns, {dones} dones"
            ),
            BellmanError::DiscountOutOfRange(g) => {
                write!(f, "discount {g} outside [0, 1)")
            }
            BellmanError::LambdaOutOfRange(l) => write!(f, "lambda {l} outside [0, 1]"),
            BellmanError::NonFinite { what, index } => {
                write!(f, "non-finite {what} at index {index}")
            }
            BellmanError::IndexOutOfRange { index, len } => {
                write!(f, "index {index} out of range for length {len}")
            }
            BellmanError::ZeroHorizon => write!(f, "bootstrap horizon k must be at least 1"),
            BellmanError::EmptyInput(what) => write!(f, "empty {what}"),
            BellmanError::MixedRepresentation => {
                write!(f, "cannot mix grid and sample representations")
            }
            BellmanError::SupportNotIncreasing { index } => {
                write!(f, "support not strictly increasing at index {index}")
            }
            BellmanError::MassNotNormalized { total } => {
                write!(f, "probability mass sums to {total}, not 1")
            }
            BellmanError::NegativeMass { index } => {
                write!(f, "negative probability mass at index {index}")
            }
            BellmanError::SupportMismatch => write!(f, "support grids differ"),
            BellmanError::TransitionRowNotNormalized { state, total } => {
                write!(f, "transition row for state {state} sums to {total}")
            }
            BellmanError::BadRewardTable { state } => {
                write!(f, "reward atoms for state {state} are invalid")
            }
            BellmanError::StateCountMismatch { expected, got } => {
                write!(f, "expected {expected} per-state distributions, got {got}")
            }
        }
    }
}

impl std::error::Error for BellmanError {}

/// A contiguous slice of experience: `rewards[t]` and `dones[t]` describe
/// the transition out of step `t`, and `returns[t]` is the sampled return
/// estimate g(s_t) — with one extra entry at the end for bootstrapping.
#[derive(Debug, Clone)]
pub struct TrajectorySegment {
    rewards: Vec<f64>,
    returns: Vec<f64>,
    dones: Vec<bool>,
    gamma: f64,
    lambda: f64,
}

impl TrajectorySegment {
    pub fn new(
        rewards: Vec<f64>,
        returns: Vec<f64>,
        dones: Vec<bool>,
        gamma: f64,
        lambda: f64,
    ) -> Result<Self, BellmanError> {
        if rewards.is_empty() || returns.len() != rewards.len() + 1 || dones.len() != rewards.len()
        {
            return Err(BellmanError::LengthMismatch {
                rewards: rewards.len(),
                returns: returns.len(),
                dones: dones.len(),
            });
        }
        if !(gamma >= 0.0 && gamma < 1.0) {
            return Err(BellmanError::DiscountOutOfRange(gamma));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(BellmanError::LambdaOutOfRange(lambda));
        }
        for (i, r) in rewards.iter().enumerate() {
            if !r.is_finite() {
                return Err(BellmanError::NonFinite {
                    what: "reward",
                    index: i,
                });
            }
        }
        for (i, g) in returns.iter().enumerate() {
            if !g.is_finite() {
                return Err(BellmanError::NonFinite {
                    what: "return",
                    index: i,
                });
            }
        }
        Ok(TrajectorySegment {
            rewards,
            returns,
            dones,
            gamma,
            lambda,
        })
    }

    /// Number of transitions (one less than the number of return entries).
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn returns(&self) -> &[f64] {
        &self.returns
    }

    pub fn dones(&self) -> &[bool] {
        &self.dones
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

/// k-step bootstrapped return target
/// `x_t = Σ_{i<j} γ^i r_{t+i} + γ^j g_{t+j}` with `j = min(k, steps to
/// done, steps to segment end)`; the bootstrap term is dropped entirely
/// when the episode terminates inside the window.
pub fn bellman_target(seg: &TrajectorySegment, t: usize, k: usize) -> Result<f64, BellmanError> {
    if k == 0 {
        return Err(BellmanError::ZeroHorizon);
    }
    if t >= seg.len() {
        return Err(BellmanError::IndexOutOfRange {
            index: t,
            len: seg.len(),
        });
    }
    let mut acc = 0.0;
    let mut discount = 1.0;
    let steps = k.min(seg.len() - t);
    for i in 0..steps {
        acc += discount * seg.rewards[t + i];
        if seg.dones[t + i] {
            return Ok(acc);
        }
        discount *= seg.gamma;
    }
    Ok(acc + discount * seg.returns[t + steps])
}

/// Generalized advantage estimates for every step of the segment:
/// `Â_t = Σ_i (γλ)^i δ_{t+i}` with
/// `δ_t = r_t + γ g_{t+1} 1[not done_t] − g_t`, the sum truncating at
/// episode boundaries. Computed by the usual backward recursion.
pub fn gae(seg: &TrajectorySegment) -> Vec<f64> {
    let n = seg.len();
    let mut advantages = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let not_done = if seg.dones[t] { 0.0 } else { 1.0 };
        let delta = seg.rewards[t] + seg.gamma * seg.returns[t + 1] * not_done - seg.returns[t];
        acc = delta + seg.gamma * seg.lambda * not_done * acc;
        advantages[t] = acc;
    }
    advantages
}

/// Order of the Wasserstein distance; only p = 1 and p = 2 appear in
/// the training and certification paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WassersteinOrder {
    One,
    Two,
}

impl WassersteinOrder {
    fn exponent(self) -> f64 {
        match self {
            WassersteinOrder::One => 1.0,
            WassersteinOrder::Two => 2.0,
        }
    }
}

/// Probability masses on a strictly increasing support grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularReturnDistribution {
    support: Vec<f64>,
    probs: Vec<f64>,
}

/// How far a mass vector may stray from summing to one.
const MASS_TOL: f64 = 1e-9;

impl TabularReturnDistribution {
    pub fn new(support: Vec<f64>, probs: Vec<f64>) -> Result<Self, BellmanError> {
        if support.is_empty() {
            return Err(BellmanError::EmptyInput("support"));
        }
        if support.len() != probs.len() {
            return Err(BellmanError::StateCountMismatch {
                expected: support.len(),
                got: probs.len(),
            });
        }
        for i in 1..support.len() {
            if !(support[i] > support[i - 1]) {
                return Err(BellmanError::SupportNotIncreasing { index: i });
            }
        }
        let mut total = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !(p >= 0.0) {
                return Err(BellmanError::NegativeMass { index: i });
            }
            total += p;
        }
        if (total - 1.0).abs() > MASS_TOL {
            return Err(BellmanError::MassNotNormalized { total });
        }
        Ok(TabularReturnDistribution { support, probs })
    }

    /// All mass at the grid point nearest-bracketing `x`, split linearly.
    /// `x` outside the grid is clipped to the boundary.
    pub fn point_mass(support: Vec<f64>, x: f64) -> Result<Self, BellmanError> {
        let mut probs = vec![0.0; support.len()];
        {
            let mut scatter = |idx: usize, mass: f64| probs[idx] += mass;
            project_mass(&support, x, 1.0, &mut scatter);
        }
        TabularReturnDistribution::new(support, probs)
    }

    pub fn uniform(support: Vec<f64>) -> Result<Self, BellmanError> {
        let n = support.len();
        TabularReturnDistribution::new(support, vec![1.0 / n as f64; n])
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn mean(&self) -> f64 {
        self.support
            .iter()
            .zip(&self.probs)
            .map(|(&x, &p)| x * p)
            .sum()
    }

    /// Width of the widest grid cell (uniform grids: the cell width).
    pub fn max_cell(&self) -> f64 {
        self.support
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }
}

/// Uniform grid of `m` points spanning `[lo, hi]`.
pub fn support_grid(lo: f64, hi: f64, m: usize) -> Vec<f64> {
    assert!(m >= 2, "a support grid needs at least two points");
    assert!(hi > lo, "support grid bounds inverted");
    let step = (hi - lo) / (m - 1) as f64;
    (0..m).map(|i| lo + step * i as f64).collect()
}

/// One side of a 1-D transport problem: either masses on a grid or an
/// unweighted sample set.
#[derive(Debug, Clone, Copy)]
pub enum ReturnLaw<'a> {
    Grid(&'a TabularReturnDistribution),
    Samples(&'a [f64]),
}

/// Exact p-Wasserstein distance between two 1-D laws via quantile-
/// function integration (sorted matching for equal-size sample sets is
/// the special case of equal uniform weights).
pub fn wasserstein_1d(
    a: ReturnLaw<'_>,
    b: ReturnLaw<'_>,
    p: WassersteinOrder,
) -> Result<f64, BellmanError> {
    match (a, b) {
        (ReturnLaw::Grid(ga), ReturnLaw::Grid(gb)) => {
            let wa: Vec<(f64, f64)> = ga
                .support
                .iter()
                .zip(&ga.probs)
                .map(|(&x, &m)| (x, m))
                .collect();
            let wb: Vec<(f64, f64)> = gb
                .support
                .iter()
                .zip(&gb.probs)
                .map(|(&x, &m)| (x, m))
                .collect();
            Ok(wasserstein_atoms(&wa, &wb, p))
        }
        (ReturnLaw::Samples(sa), ReturnLaw::Samples(sb)) => {
            if sa.is_empty() || sb.is_empty() {
                return Err(BellmanError::EmptyInput("sample set"));
            }
            for (i, x) in sa.iter().chain(sb.iter()).enumerate() {
                if !x.is_finite() {
                    return Err(BellmanError::NonFinite {
                        what: "sample",
                        index: i,
                    });
                }
            }
            let mut xs = sa.to_vec();
            let mut ys = sb.to_vec();
            xs.sort_by(|u, v| u.partial_cmp(v).unwrap());
            ys.sort_by(|u, v| u.partial_cmp(v).unwrap());
            let wa: Vec<(f64, f64)> = xs.iter().map(|&x| (x, 1.0 / xs.len() as f64)).collect();
            let wb: Vec<(f64, f64)> = ys.iter().map(|&y| (y, 1.0 / ys.len() as f64)).collect();
            Ok(wasserstein_atoms(&wa, &wb, p))
        }
        _ => Err(BellmanError::MixedRepresentation),
    }
}

/// Convenience wrapper for two grid laws.
pub fn wasserstein_grid(
    a: &TabularReturnDistribution,
    b: &TabularReturnDistribution,
    p: WassersteinOrder,
) -> Result<f64, BellmanError> {
    wasserstein_1d(ReturnLaw::Grid(a), ReturnLaw::Grid(b), p)
}

/// Convenience wrapper for two sample sets.
pub fn wasserstein_samples(a: &[f64], b: &[f64], p: WassersteinOrder) -> Result<f64, BellmanError> {
    wasserstein_1d(ReturnLaw::Samples(a), ReturnLaw::Samples(b), p)
}

/// Two-pointer merge over the CDFs of two sorted atomic laws. Each step
/// transports the smaller of the two remaining atom masses between the
/// current quantile positions.
fn wasserstein_atoms(a: &[(f64, f64)], b: &[(f64, f64)], p: WassersteinOrder) -> f64 {
    let exponent = p.exponent();
    let mut cost = 0.0;
    let mut i = 0;
    let mut j = 0;
    let mut rem_a = if a.is_empty() { 0.0 } else { a[0].1 };
    let mut rem_b = if b.is_empty() { 0.0 } else { b[0].1 };
    while i < a.len() && j < b.len() {
        let step = rem_a.min(rem_b);
        if step > 0.0 {
            let gap = (a[i].0 - b[j].0).abs();
            cost += step * gap.powf(exponent);
        }
        rem_a -= step;
        rem_b -= step;
        if rem_a <= 0.0 {
            i += 1;
            if i < a.len() {
                rem_a = a[i].1;
            }
        }
        if rem_b <= 0.0 {
            j += 1;
            if j < b.len() {
                rem_b = b[j].1;
            }
        }
    }
    match p {
        WassersteinOrder::One => cost,
        WassersteinOrder::Two => cost.sqrt(),
    }
}

/// Finite MDP under a fixed policy: per-state stochastic rewards (finite
/// atom lists) and the marginal next-state transition matrix.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    /// `rewards[s]` lists `(atom, probability)` pairs for R(s).
    rewards: Vec<Vec<(f64, f64)>>,
    /// `transitions[s][s']` is P(s' | s) under the policy.
    transitions: Vec<Vec<f64>>,
    gamma: f64,
}

impl TabularMdp {
    pub fn new(
        rewards: Vec<Vec<(f64, f64)>>,
        transitions: Vec<Vec<f64>>,
        gamma: f64,
    ) -> Result<Self, BellmanError> {
        if rewards.is_empty() {
            return Err(BellmanError::EmptyInput("state set"));
        }
        if transitions.len() != rewards.len() {
            return Err(BellmanError::StateCountMismatch {
                expected: rewards.len(),
                got: transitions.len(),
            });
        }
        if !(gamma >= 0.0 && gamma < 1.0) {
            return Err(BellmanError::DiscountOutOfRange(gamma));
        }
        for (s, atoms) in rewards.iter().enumerate() {
            if atoms.is_empty() {
                return Err(BellmanError::BadRewardTable { state: s });
            }
            let mut total = 0.0;
            for &(atom, prob) in atoms {
                if !atom.is_finite() || !(prob >= 0.0) {
                    return Err(BellmanError::BadRewardTable { state: s });
                }
                total += prob;
            }
            if (total - 1.0).abs() > MASS_TOL {
                return Err(BellmanError::BadRewardTable { state: s });
            }
        }
        for (s, row) in transitions.iter().enumerate() {
            if row.len() != rewards.len() {
                return Err(BellmanError::StateCountMismatch {
                    expected: rewards.len(),
                    got: row.len(),
                });
            }
            let total: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > MASS_TOL {
                return Err(BellmanError::TransitionRowNotNormalized { state: s, total });
            }
        }
        Ok(TabularMdp {
            rewards,
            transitions,
            gamma,
        })
    }

    pub fn num_states(&self) -> usize {
        self.rewards.len()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn rewards(&self) -> &[Vec<(f64, f64)>] {
        &self.rewards
    }

    pub fn transitions(&self) -> &[Vec<f64>] {
        &self.transitions
    }

    /// Expected immediate reward per state.
    pub fn mean_rewards(&self) -> Vec<f64> {
        self.rewards
            .iter()
            .map(|atoms| atoms.iter().map(|&(x, p)| x * p).sum())
            .collect()
    }

    /// Support grid bounding every reachable return: discounted sums lie
    /// in `[r_min, r_max] / (1 − γ)`, padded by 5% of the span to absorb
    /// interpolation at the edges.
    pub fn return_support(&self, m: usize) -> Vec<f64> {
        let mut r_min = f64::INFINITY;
        let mut r_max = f64::NEG_INFINITY;
        for atoms in &self.rewards {
            for &(x, p) in atoms {
                if p > 0.0 {
                    r_min = r_min.min(x);
                    r_max = r_max.max(x);
                }
            }
        }
        let lo = r_min / (1.0 - self.gamma);
        let hi = r_max / (1.0 - self.gamma);
        let span = (hi - lo).max(1e-6);
        let margin = 0.05 * span;
        support_grid(lo - margin, hi + margin, m)
    }
}

/// Split `mass` arriving at position `x` onto the two bracketing grid
/// points (all of it onto the boundary when `x` falls outside). Returns
/// whether clipping occurred.
fn project_mass(support: &[f64], x: f64, mass: f64, scatter: &mut impl FnMut(usize, f64)) -> bool {
    let n = support.len();
    if x <= support[0] {
        scatter(0, mass);
        return x < support[0];
    }
    if x >= support[n - 1] {
        scatter(n - 1, mass);
        return x > support[n - 1];
    }
    // Binary search for the cell containing x.
    let mut lo = 0;
    let mut hi = n - 1;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if support[mid] <= x {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let w_hi = (x - support[lo]) / (support[hi] - support[lo]);
    scatter(lo, mass * (1.0 - w_hi));
    scatter(hi, mass * w_hi);
    false
}

/// Result of one distributional backup: the new per-state laws plus a
/// flag recording whether any mass fell outside the grid and had to be
/// clipped to a boundary point.
#[derive(Debug, Clone)]
pub struct PushResult {
    pub laws: Vec<TabularReturnDistribution>,
    pub clipped: bool,
}

/// One application of the distributional Bellman operator: for every
/// state, the exact law of `R(s) + γ G(S′)` with `S′ ~ P^π(·|s)` and
/// `G(s′)` the current per-state law, linearly re-gridded onto the
/// shared support.
pub fn push_distribution(
    mdp: &TabularMdp,
    laws: &[TabularReturnDistribution],
) -> Result<PushResult, BellmanError> {
    let states = mdp.num_states();
    if laws.len() != states {
        return Err(BellmanError::StateCountMismatch {
            expected: states,
            got: laws.len(),
        });
    }
    let support = laws[0].support();
    for law in laws.iter().skip(1) {
        if law.support() != support {
            return Err(BellmanError::SupportMismatch);
        }
    }
    let mut clipped = false;
    let mut out = Vec::with_capacity(states);
    for s in 0..states {
        let mut probs = vec![0.0; support.len()];
        for (s_next, &p_trans) in mdp.transitions[s].iter().enumerate() {
            if p_trans == 0.0 {
                continue;
            }
            let next = &laws[s_next];
            for &(r_atom, p_reward) in &mdp.rewards[s] {
                if p_reward == 0.0 {
                    continue;
                }
                let weight = p_trans * p_reward;
                for (g, &p_g) in next.support().iter().zip(next.probs()) {
                    if p_g == 0.0 {
                        continue;
                    }
                    let x = r_atom + mdp.gamma * g;
                    let mut scatter = |idx: usize, mass: f64| probs[idx] += mass;
                    if project_mass(support, x, weight * p_g, &mut scatter) {
                        clipped = true;
                    }
                }
            }
        }
        // Two-point splits conserve mass exactly up to rounding; nudge
        // the total back to 1 so long iteration chains cannot drift.
        let total: f64 = probs.iter().sum();
        if total > 0.0 {
            for p in probs.iter_mut() {
                *p /= total;
            }
        }
        out.push(TabularReturnDistribution::new(support.to_vec(), probs)?);
    }
    Ok(PushResult { laws: out, clipped })
}

/// Distances before and after one distributional backup of both
/// collections. `ratio` is `None` exactly when the inputs already
/// coincide (`d_before = 0`).
#[derive(Debug, Clone)]
pub struct ContractionCertificate {
    pub d_before: f64,
    pub d_after: f64,
    pub ratio: Option<f64>,
    pub clipped: bool,
}

impl ContractionCertificate {
    /// Whether the certified pair satisfies the contraction bound with
    /// `slack` of absolute Wasserstein tolerance on the pushed distance.
    pub fn within(&self, gamma: f64, slack: f64) -> bool {
        match self.ratio {
            None => self.d_after <= slack,
            Some(_) => self.d_after <= gamma * self.d_before + slack,
        }
    }
}

/// Supremum-over-states Wasserstein distance between two collections.
pub fn sup_wasserstein(
    a: &[TabularReturnDistribution],
    b: &[TabularReturnDistribution],
    p: WassersteinOrder,
) -> Result<f64, BellmanError> {
    if a.len() != b.len() {
        return Err(BellmanError::StateCountMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.is_empty() {
        return Err(BellmanError::EmptyInput("distribution collection"));
    }
    let mut sup = 0.0f64;
    for (da, db) in a.iter().zip(b) {
        sup = sup.max(wasserstein_grid(da, db, p)?);
    }
    Ok(sup)
}

/// Push both collections through the operator once and compare sup-
/// Wasserstein distances before and after.
pub fn contraction_certificate(
    mdp: &TabularMdp,
    omega1: &[TabularReturnDistribution],
    omega2: &[TabularReturnDistribution],
    p: WassersteinOrder,
) -> Result<ContractionCertificate, BellmanError> {
    let d_before = sup_wasserstein(omega1, omega2, p)?;
    let push1 = push_distribution(mdp, omega1)?;
    let push2 = push_distribution(mdp, omega2)?;
    let d_after = sup_wasserstein(&push1.laws, &push2.laws, p)?;
    let ratio = if d_before > 0.0 {
        Some(d_after / d_before)
    } else {
        None
    };
    Ok(ContractionCertificate {
        d_before,
        d_after,
        ratio,
        clipped: push1.clipped || push2.clipped,
    })
}

/// Random dense MDP over `states` states: one to three reward atoms per
/// state with weights bounded away from zero, rewards in [-1, 1], and a
/// strictly positive transition kernel. Trial material for the
/// contraction oracle.
pub fn random_mdp(
    rng: &mut impl Rng,
    states: usize,
    gamma: f64,
) -> Result<TabularMdp, BellmanError> {
    if states == 0 {
        return Err(BellmanError::EmptyInput("state set"));
    }
    let mut rewards = Vec::with_capacity(states);
    let mut transitions = Vec::with_capacity(states);
    for _ in 0..states {
        let atoms = rng.gen_range(1..=3);
        let raw: Vec<f64> = (0..atoms).map(|_| rng.gen_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        rewards.push(
            raw.iter()
                .map(|&w| (rng.gen_range(-1.0..1.0), w / total))
                .collect::<Vec<(f64, f64)>>(),
        );
        let row_raw: Vec<f64> = (0..states).map(|_| rng.gen_range(0.01..1.0)).collect();
        let row_total: f64 = row_raw.iter().sum();
        transitions.push(row_raw.iter().map(|&w| w / row_total).collect());
    }
    TabularMdp::new(rewards, transitions, gamma)
}

/// Random mass vector confined to an index window of the grid; the
/// window lets callers build pairs whose distance dwarfs the grid's
/// projection error.
pub fn random_law_in_window(
    rng: &mut impl Rng,
    support: &[f64],
    window: std::ops::Range<usize>,
) -> Result<TabularReturnDistribution, BellmanError> {
    if window.is_empty() || window.end > support.len() {
        return Err(BellmanError::EmptyInput("support window"));
    }
    let mut probs = vec![0.0; support.len()];
    let mut total = 0.0;
    for i in window {
        let w = rng.gen_range(0.0..1.0);
        probs[i] = w;
        total += w;
    }
    for p in probs.iter_mut() {
        *p /= total;
    }
    TabularReturnDistribution::new(support.to_vec(), probs)
}

/// A well-separated pair of per-state law collections on the MDP's
/// m-point return grid: the first confined to the grid's left quarter,
/// the second to its right.
pub fn separated_pair(
    rng: &mut impl Rng,
    mdp: &TabularMdp,
    m: usize,
) -> Result<
    (
        Vec<TabularReturnDistribution>,
        Vec<TabularReturnDistribution>,
    ),
    BellmanError,
> {
    let support = mdp.return_support(m);
    let quarter = m / 4;
    if quarter == 0 {
        return Err(BellmanError::EmptyInput("support window"));
    }
    let mut omega1 = Vec::with_capacity(mdp.num_states());
    let mut omega2 = Vec::with_capacity(mdp.num_states());
    for _ in 0..mdp.num_states() {
        omega1.push(random_law_in_window(rng, &support, 0..quarter)?);
        omega2.push(random_law_in_window(rng, &support, (m - quarter)..m)?);
    }
    Ok((omega1, omega2))
}

/// Iterate the distributional backup from point masses at zero until the
/// sup-W₁ step change drops below `tol` (or `max_iters` passes). The
/// fixpoint is the exact per-state return law up to grid resolution.
pub fn return_fixpoint(
    mdp: &TabularMdp,
    support: Vec<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<Vec<TabularReturnDistribution>, BellmanError> {
    let mut laws = Vec::with_capacity(mdp.num_states());
    for _ in 0..mdp.num_states() {
        laws.push(TabularReturnDistribution::point_mass(support.clone(), 0.0)?);
    }
    for _ in 0..max_iters {
        let pushed = push_distribution(mdp, &laws)?;
        let delta = sup_wasserstein(&laws, &pushed.laws, WassersteinOrder::One)?;
        laws = pushed.laws;
        if delta < tol {
            break;
        }
    }
    Ok(laws)
}

/// Classical mean-value Bellman backup `V ← R̄ + γ P V`, the scalar
/// shadow of `push_distribution` used to cross-check pushed means.
pub fn mean_value_backup(mdp: &TabularMdp, values: &[f64]) -> Vec<f64> {
    let r_bar = mdp.mean_rewards();
    (0..mdp.num_states())
        .map(|s| {
            let future: f64 = mdp.transitions[s]
                .iter()
                .zip(values)
                .map(|(&p, &v)| p * v)
                .sum();
            r_bar[s] + mdp.gamma * future
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn segment(
        rewards: &[f64],
        returns: &[f64],
        dones: &[bool],
        gamma: f64,
        lambda: f64,
    ) -> TrajectorySegment {
        TrajectorySegment::new(
            rewards.to_vec(),
            returns.to_vec(),
            dones.to_vec(),
            gamma,
            lambda,
        )
        .unwrap()
    }

    #[test]
    fn one_step_target_is_r_plus_gamma_g() {
        let seg = segment(&[1.0], &[0.0, 10.0], &[false], 0.99, 1.0);
        let x = bellman_target(&seg, 0, 1).unwrap();
        assert!((x - 10.9).abs() < 1e-12);
    }

    #[test]
    fn two_step_target_discounts_each_term() {
        let seg = segment(&[1.0, 2.0], &[0.0, 0.0, 5.0], &[false, false], 0.9, 1.0);
        let x = bellman_target(&seg, 0, 2).unwrap();
        assert!((x - 6.85).abs() < 1e-12, "x = {x}");
    }

    #[test]
    fn done_drops_the_bootstrap_term() {
        let seg = segment(&[3.0, 2.0], &[0.0, 9.0, 9.0], &[true, false], 0.9, 1.0);
        let x = bellman_target(&seg, 0, 2).unwrap();
        assert_eq!(x, 3.0);
    }

    #[test]
    fn target_index_out_of_range_is_an_error() {
        let seg = segment(&[1.0], &[0.0, 0.0], &[false], 0.9, 1.0);
        assert_eq!(
            bellman_target(&seg, 1, 1).unwrap_err(),
            BellmanError::IndexOutOfRange { index: 1, len: 1 }
        );
    }

    #[test]
    fn gae_with_lambda_zero_is_the_td_error() {
        let seg = segment(
            &[1.0, -0.5, 2.0],
            &[0.3, 0.7, -0.2, 1.1],
            &[false, false, false],
            0.95,
            0.0,
        );
        let adv = gae(&seg);
        for t in 0..3 {
            let delta = seg.rewards()[t] + 0.95 * seg.returns()[t + 1] - seg.returns()[t];
            assert!((adv[t] - delta).abs() < 1e-12);
        }
    }

    #[test]
    fn gae_resets_across_episode_boundaries() {
        let seg = segment(&[1.0, 2.0], &[0.5, 0.6, 0.7], &[true, false], 0.9, 0.8);
        let adv = gae(&seg);
        // done at t=0: delta_0 has no bootstrap and accumulates nothing.
        assert!((adv[0] - (1.0 - 0.5)).abs() < 1e-12);
        assert!((adv[1] - (2.0 + 0.9 * 0.7 - 0.6)).abs() < 1e-12);
    }

    #[test]
    fn segment_rejects_inconsistent_lengths() {
        let err = TrajectorySegment::new(vec![1.0], vec![0.0], vec![false], 0.9, 1.0).unwrap_err();
        assert!(matches!(err, BellmanError::LengthMismatch { .. }));
    }

    #[test]
    fn wasserstein_point_masses_is_their_gap() {
        let grid = support_grid(-1.0, 2.0, 7); // includes 0.0 and 1.0 exactly
        let a = TabularReturnDistribution::point_mass(grid.clone(), 0.0).unwrap();
        let b = TabularReturnDistribution::point_mass(grid, 1.0).unwrap();
        for p in [WassersteinOrder::One, WassersteinOrder::Two] {
            let d = wasserstein_grid(&a, &b, p).unwrap();
            assert!((d - 1.0).abs() < 1e-12, "W_{p:?} = {d}");
        }
    }

    #[test]
    fn wasserstein_samples_sorted_matching() {
        let d = wasserstein_samples(&[0.0, 2.0], &[1.0, 3.0], WassersteinOrder::One).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wasserstein_identical_is_zero() {
        let grid = support_grid(0.0, 1.0, 16);
        let a = TabularReturnDistribution::uniform(grid).unwrap();
        assert_eq!(
            wasserstein_grid(&a, &a, WassersteinOrder::Two).unwrap(),
            0.0
        );
    }

    #[test]
    fn mixed_representations_are_rejected() {
        let grid = support_grid(0.0, 1.0, 4);
        let a = TabularReturnDistribution::uniform(grid).unwrap();
        let err = wasserstein_1d(
            ReturnLaw::Grid(&a),
            ReturnLaw::Samples(&[0.5]),
            WassersteinOrder::One,
        )
        .unwrap_err();
        assert_eq!(err, BellmanError::MixedRepresentation);
    }

    #[test]
    fn push_with_gamma_near_zero_concentrates_at_rewards() {
        // gamma tiny: pushed law is (almost) the reward law at each state.
        let mdp = TabularMdp::new(
            vec![vec![(0.5, 1.0)], vec![(-0.25, 1.0)]],
            vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            1e-9,
        )
        .unwrap();
        let support = support_grid(-1.0, 1.0, 257);
        let laws = vec![
            TabularReturnDistribution::uniform(support.clone()).unwrap(),
            TabularReturnDistribution::uniform(support.clone()).unwrap(),
        ];
        let pushed = push_distribution(&mdp, &laws).unwrap();
        assert!((pushed.laws[0].mean() - 0.5).abs() < 1e-6);
        assert!((pushed.laws[1].mean() - -0.25).abs() < 1e-6);
    }

    #[test]
    fn one_state_fixpoint_is_geometric_series() {
        let mdp = TabularMdp::new(vec![vec![(1.0, 1.0)]], vec![vec![1.0]], 0.5).unwrap();
        let support = mdp.return_support(512);
        let laws = return_fixpoint(&mdp, support, 1e-12, 500).unwrap();
        // G = 1 / (1 - 0.5) = 2 up to grid resolution.
        assert!(
            (laws[0].mean() - 2.0).abs() < 1e-2,
            "mean = {}",
            laws[0].mean()
        );
    }

    #[test]
    fn identical_inputs_certify_as_exact_match() {
        let mdp = TabularMdp::new(
            vec![vec![(1.0, 1.0)], vec![(0.0, 1.0)]],
            vec![vec![0.3, 0.7], vec![0.6, 0.4]],
            0.9,
        )
        .unwrap();
        let support = mdp.return_support(64);
        let laws = vec![
            TabularReturnDistribution::point_mass(support.clone(), 1.0).unwrap(),
            TabularReturnDistribution::point_mass(support.clone(), 2.0).unwrap(),
        ];
        let cert = contraction_certificate(&mdp, &laws, &laws, WassersteinOrder::One).unwrap();
        assert_eq!(cert.d_before, 0.0);
        assert_eq!(cert.d_after, 0.0);
        assert!(cert.ratio.is_none());
    }

    #[test]
    fn push_preserves_mass() {
        let mdp = TabularMdp::new(
            vec![
                vec![(1.0, 0.25), (-1.0, 0.75)],
                vec![(0.0, 1.0)],
                vec![(0.5, 0.5), (0.25, 0.5)],
            ],
            vec![
                vec![0.2, 0.5, 0.3],
                vec![0.0, 1.0, 0.0],
                vec![0.9, 0.05, 0.05],
            ],
            0.9,
        )
        .unwrap();
        let support = mdp.return_support(256);
        let laws: Vec<_> = (0..3)
            .map(|i| TabularReturnDistribution::point_mass(support.clone(), i as f64).unwrap())
            .collect();
        let pushed = push_distribution(&mdp, &laws).unwrap();
        for law in &pushed.laws {
            let total: f64 = law.probs().iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn transition_rows_must_normalize() {
        let err = TabularMdp::new(vec![vec![(0.0, 1.0)]], vec![vec![0.5]], 0.9).unwrap_err();
        assert!(matches!(
            err,
            BellmanError::TransitionRowNotNormalized { state: 0, .. }
        ));
    }
}
