//! Conditional generative model of state-return distributions.
//!
//! Four networks share one parameter store under fixed prefixes: an
//! encoder `enc` mapping (x, s) to a diagonal-Gaussian posterior over
//! latents, a learned prior `prior` mapping s to a latent distribution, a
//! deterministic generator `gen` mapping (z, s) to a scalar return, and a
//! discriminator `disc` scoring (x, z, s) joints. Training alternates two
//! phases per minibatch: an adversarial phase that pits the discriminator
//! against the encoder and prior while the generator is held fixed, and a
//! reconstruction phase that fits the generator by squared Euclidean
//! error while the encoder is held fixed. "Held fixed" is structural —
//! frozen networks enter the tape as constants, so their parameters are
//! unreachable by any gradient.

use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::ndmath::{
    forward_mlp, init_mlp, Activation, Array, MlpSpec, NdError, NodeId, ParamStore, Tape,
};

/// Lower clamp on exp(log_std): ln(1e-6).
const LOG_STD_MIN: f64 = -13.815510557964274;
/// Upper clamp on log_std. A generous cap (say ln 1e3) admits a
/// degenerate adversarial attractor: either Gaussian head can inflate
/// its variance until samples land where every tanh feature of the
/// discriminator saturates, leaving the critic blind and the game
/// stuck. Capping the std at e² keeps all latents inside the region the
/// discriminator actually trains on.
const LOG_STD_MAX: f64 = 2.0;
/// Discriminator probabilities are clamped to [1e-7, 1 - 1e-7] before
/// entering a logarithm.
const DISC_EPS: f64 = 1e-7;

/// Errors from model construction and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    EmptyBatch,
    ObsDimMismatch { expected: usize, got: usize },
    LatentDimMismatch { expected: usize, got: usize },
    BatchLengthMismatch { states: usize, targets: usize },
    NoiseLengthMismatch { expected: usize, got: usize },
    NonFinite { what: &'static str },
    Math(NdError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::EmptyBatch => write!(f, "empty batch"),
            ModelError::ObsDimMismatch { expected, got } => {
                write!(
                    f,
                    "state features have width {got}, model expects {expected}"
                )
            }
            ModelError::LatentDimMismatch { expected, got } => {
                write!(
                    f,
                    "latent vector has dimension {got}, model expects {expected}"
                )
            }
            ModelError::BatchLengthMismatch { states, targets } => {
                write!(f, "{states} states but {targets} return targets")
            }
            ModelError::NoiseLengthMismatch { expected, got } => {
                write!(f, "noise buffer has {got} entries, batch needs {expected}")
            }
            ModelError::NonFinite { what } => write!(f, "non-finite {what}"),
            ModelError::Math(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<NdError> for ModelError {
    fn from(e: NdError) -> Self {
        ModelError::Math(e)
    }
}

/// Mean and log-standard-deviation of a diagonal Gaussian over latents.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussianParams {
    mean: Vec<f64>,
    log_std: Vec<f64>,
}

impl DiagGaussianParams {
    pub fn new(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self, ModelError> {
        if mean.len() != log_std.len() {
            return Err(ModelError::LatentDimMismatch {
                expected: mean.len(),
                got: log_std.len(),
            });
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(ModelError::NonFinite { what: "mean" });
        }
        if log_std.iter().any(|l| !l.is_finite()) {
            return Err(ModelError::NonFinite { what: "log_std" });
        }
        Ok(DiagGaussianParams { mean, log_std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|&l| l.exp()).collect()
    }

    /// Reparameterized draw `z = mean + exp(log_std) ⊙ ε`.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> LatentSample {
        let noise: Vec<f64> = (0..self.dim())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let z: Vec<f64> = self
            .mean
            .iter()
            .zip(&self.log_std)
            .zip(&noise)
            .map(|((&m, &l), &e)| m + l.exp() * e)
            .collect();
        LatentSample {
            z,
            source_params: self.clone(),
            noise,
        }
    }
}

/// A latent draw together with the parameters and noise that produced
/// it, preserving the exact reparameterization identity
/// `z == mean + exp(log_std) ⊙ noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub z: Vec<f64>,
    pub source_params: DiagGaussianParams,
    pub noise: Vec<f64>,
}

/// A scalar discounted return.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReturnValue(f64);

impl ReturnValue {
    pub fn new(g: f64) -> Result<Self, ModelError> {
        if !g.is_finite() {
            return Err(ModelError::NonFinite { what: "return" });
        }
        Ok(ReturnValue(g))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Per-minibatch reparameterization noise, drawn once and shared by the
/// discriminator, encoder/prior and generator losses so all three phases
/// see the same latent samples. `x_data`/`x_gen` carry the critic's
/// instance noise (see [`ReturnModel::set_critic_noise`]); they are
/// ignored while that amplitude is zero.
#[derive(Debug, Clone)]
pub struct MinibatchNoise {
    enc: Vec<f64>,
    prior: Vec<f64>,
    x_data: Vec<f64>,
    x_gen: Vec<f64>,
    n: usize,
    latent: usize,
}

/// Draw standard-normal noise for a batch of `n` samples with latent
/// dimension `latent`.
pub fn sample_minibatch_noise(n: usize, latent: usize, rng: &mut ChaCha8Rng) -> MinibatchNoise {
    let enc = (0..n * latent)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let prior = (0..n * latent)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let x_data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let x_gen = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    MinibatchNoise {
        enc,
        prior,
        x_data,
        x_gen,
        n,
        latent,
    }
}

/// Which networks a given loss may differentiate through.
struct Freeze {
    enc: bool,
    prior: bool,
    gen: bool,
    disc: bool,
}

/// The four-network return model. Parameters live in an external
/// [`ParamStore`] under the prefixes `enc`, `prior`, `gen`, `disc`.
#[derive(Debug, Clone)]
pub struct ReturnModel {
    obs_dim: usize,
    latent_dim: usize,
    critic_noise: f64,
    enc_spec: MlpSpec,
    prior_spec: MlpSpec,
    gen_spec: MlpSpec,
    disc_spec: MlpSpec,
}

impl ReturnModel {
    /// Register all four networks. The prior and discriminator heads are
    /// zero-initialized: an untrained prior is the unit Gaussian at every
    /// state and an untrained discriminator scores 0.5 everywhere.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        obs_dim: usize,
        latent_dim: usize,
        hidden: &[usize],
    ) -> Result<Self, ModelError> {
        assert!(obs_dim > 0 && latent_dim > 0, "degenerate model dimensions");
        assert!(!hidden.is_empty(), "at least one hidden layer");
        let stack = |input: usize, output: usize| {
            let mut sizes = vec![input];
            sizes.extend_from_slice(hidden);
            sizes.push(output);
            MlpSpec::new(sizes, Activation::Tanh, Activation::Identity)
        };
        let enc_spec = stack(1 + obs_dim, 2 * latent_dim);
        let prior_spec = stack(obs_dim, 2 * latent_dim);
        let gen_spec = stack(latent_dim + obs_dim, 1);
        // The critic gets non-saturating hidden units: with tanh features
        // an encoder or prior can shed the adversarial pressure entirely
        // by pushing latents out to where every feature is flat, and the
        // game degenerates. Softplus features keep growing out there, so
        // running away stays expensive (and, unlike relu, the loss stays
        // smooth for finite-difference checks).
        let disc_spec = {
            let mut sizes = vec![1 + latent_dim + obs_dim];
            sizes.extend_from_slice(hidden);
            sizes.push(1);
            MlpSpec::new(sizes, Activation::Softplus, Activation::Identity)
        };
        init_mlp(store, rng, "enc", &enc_spec, false)?;
        init_mlp(store, rng, "prior", &prior_spec, true)?;
        init_mlp(store, rng, "gen", &gen_spec, false)?;
        init_mlp(store, rng, "disc", &disc_spec, true)?;
        Ok(ReturnModel {
            obs_dim,
            latent_dim,
            critic_noise: 0.0,
            enc_spec,
            prior_spec,
            gen_spec,
            disc_spec,
        })
    }

    /// Rebuild the spec handles for parameters already present in a
    /// store (e.g. after loading a checkpoint).
    pub fn attach(obs_dim: usize, latent_dim: usize, hidden: &[usize]) -> Self {
        let stack = |input: usize, output: usize| {
            let mut sizes = vec![input];
            sizes.extend_from_slice(hidden);
            sizes.push(output);
            MlpSpec::new(sizes, Activation::Tanh, Activation::Identity)
        };
        ReturnModel {
            obs_dim,
            latent_dim,
            critic_noise: 0.0,
            enc_spec: stack(1 + obs_dim, 2 * latent_dim),
            prior_spec: stack(obs_dim, 2 * latent_dim),
            gen_spec: stack(latent_dim + obs_dim, 1),
            disc_spec: {
                let mut sizes = vec![1 + latent_dim + obs_dim];
                sizes.extend_from_slice(hidden);
                sizes.push(1);
                MlpSpec::new(sizes, Activation::Softplus, Activation::Identity)
            },
        }
    }

    /// Gaussian instance noise added to the return coordinate of both
    /// critic inputs — the observed x and the generated x̃ — during the
    /// adversarial losses. The same noise law on both paths leaves the
    /// game's equilibrium where it was, but it smears the two return
    /// distributions over a common support, which keeps the density
    /// ratio (and with it the critic's landscape) smooth when the data
    /// law is nearly atomic. Zero disables it; reconstruction targets
    /// and score queries are never noised.
    pub fn set_critic_noise(&mut self, amplitude: f64) {
        assert!(
            amplitude.is_finite() && amplitude >= 0.0,
            "critic noise must be a finite nonnegative amplitude"
        );
        self.critic_noise = amplitude;
    }

    pub fn critic_noise(&self) -> f64 {
        self.critic_noise
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn check_state(&self, s: &[f32]) -> Result<(), ModelError> {
        if s.len() != self.obs_dim {
            return Err(ModelError::ObsDimMismatch {
                expected: self.obs_dim,
                got: s.len(),
            });
        }
        Ok(())
    }

    fn state_node(&self, tape: &mut Tape, s: &[f32]) -> NodeId {
        let value: Vec<f64> = s.iter().map(|&v| v as f64).collect();
        tape.constant_parts(1, self.obs_dim, value)
    }

    /// Split a `[n, 2l]` head into mean and clamped log-std nodes.
    fn gaussian_head(&self, tape: &mut Tape, head: NodeId) -> (NodeId, NodeId) {
        let l = self.latent_dim;
        let mean = tape.slice_cols(head, 0, l);
        let raw = tape.slice_cols(head, l, l);
        let log_std = tape.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
        (mean, log_std)
    }

    fn params_from_nodes(
        &self,
        tape: &Tape,
        mean: NodeId,
        log_std: NodeId,
    ) -> Result<DiagGaussianParams, ModelError> {
        DiagGaussianParams::new(tape.value(mean).to_vec(), tape.value(log_std).to_vec())
    }

    /// Learned prior p(Z|s) at a single state.
    pub fn prior_params(
        &self,
        store: &ParamStore,
        s: &[f32],
    ) -> Result<DiagGaussianParams, ModelError> {
        self.check_state(s)?;
        let mut tape = Tape::new();
        let sn = self.state_node(&mut tape, s);
        let head = forward_mlp(&mut tape, store, "prior", &self.prior_spec, sn, true)?;
        let (mean, log_std) = self.gaussian_head(&mut tape, head);
        self.params_from_nodes(&tape, mean, log_std)
    }

    /// Encoder posterior q(Z|x, s) at a single (return, state) pair.
    pub fn encoder_params(
        &self,
        store: &ParamStore,
        x: f64,
        s: &[f32],
    ) -> Result<DiagGaussianParams, ModelError> {
        self.check_state(s)?;
        if !x.is_finite() {
            return Err(ModelError::NonFinite { what: "return" });
        }
        let mut tape = Tape::new();
        let xn = tape.constant_parts(1, 1, vec![x]);
        let sn = self.state_node(&mut tape, s);
        let joint = tape.concat_cols(&[xn, sn]);
        let head = forward_mlp(&mut tape, store, "enc", &self.enc_spec, joint, true)?;
        let (mean, log_std) = self.gaussian_head(&mut tape, head);
        self.params_from_nodes(&tape, mean, log_std)
    }

    /// Deterministic generator output G(z, s).
    pub fn generate(&self, store: &ParamStore, z: &[f64], s: &[f32]) -> Result<f64, ModelError> {
        self.check_state(s)?;
        if z.len() != self.latent_dim {
            return Err(ModelError::LatentDimMismatch {
                expected: self.latent_dim,
                got: z.len(),
            });
        }
        let mut tape = Tape::new();
        let zn = tape.constant_parts(1, self.latent_dim, z.to_vec());
        let sn = self.state_node(&mut tape, s);
        let joint = tape.concat_cols(&[zn, sn]);
        let out = forward_mlp(&mut tape, store, "gen", &self.gen_spec, joint, true)?;
        Ok(tape.value_scalar(out))
    }

    /// Draw z from the prior at s and decode it: the rollout-time return
    /// sample (z_t, g_t).
    pub fn sample_return(
        &self,
        store: &ParamStore,
        s: &[f32],
        rng: &mut ChaCha8Rng,
    ) -> Result<(LatentSample, ReturnValue), ModelError> {
        let params = self.prior_params(store, s)?;
        let latent = params.sample(rng);
        let g = self.generate(store, &latent.z, s)?;
        Ok((latent, ReturnValue::new(g)?))
    }

    /// Encode (x, s) and draw a posterior latent z̃.
    pub fn encode(
        &self,
        store: &ParamStore,
        x: ReturnValue,
        s: &[f32],
        rng: &mut ChaCha8Rng,
    ) -> Result<(LatentSample, DiagGaussianParams), ModelError> {
        let params = self.encoder_params(store, x.get(), s)?;
        let latent = params.sample(rng);
        Ok((latent, params))
    }

    /// Clamped discriminator probability D(x, z, s) in (0, 1).
    pub fn discriminator_score(
        &self,
        store: &ParamStore,
        x: f64,
        z: &[f64],
        s: &[f32],
    ) -> Result<f64, ModelError> {
        self.check_state(s)?;
        if z.len() != self.latent_dim {
            return Err(ModelError::LatentDimMismatch {
                expected: self.latent_dim,
                got: z.len(),
            });
        }
        if !x.is_finite() || z.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite {
                what: "discriminator input",
            });
        }
        let mut tape = Tape::new();
        let xn = tape.constant_parts(1, 1, vec![x]);
        let zn = tape.constant_parts(1, self.latent_dim, z.to_vec());
        let sn = self.state_node(&mut tape, s);
        let joint = tape.concat_cols(&[xn, zn, sn]);
        let logit = forward_mlp(&mut tape, store, "disc", &self.disc_spec, joint, true)?;
        let prob = tape.sigmoid(logit);
        let clamped = tape.clamp(prob, DISC_EPS, 1.0 - DISC_EPS);
        Ok(tape.value_scalar(clamped))
    }

    fn check_batch(
        &self,
        s: &Array,
        x: &[f64],
        noise: &MinibatchNoise,
    ) -> Result<usize, ModelError> {
        let (n, d) = s.dims2();
        if n == 0 {
            return Err(ModelError::EmptyBatch);
        }
        if d != self.obs_dim {
            return Err(ModelError::ObsDimMismatch {
                expected: self.obs_dim,
                got: d,
            });
        }
        if x.len() != n {
            return Err(ModelError::BatchLengthMismatch {
                states: n,
                targets: x.len(),
            });
        }
        if noise.n != n || noise.latent != self.latent_dim {
            return Err(ModelError::NoiseLengthMismatch {
                expected: n * self.latent_dim,
                got: noise.enc.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite {
                what: "return target",
            });
        }
        Ok(n)
    }

    /// Encoder-path latent z̃ ~ q(Z|x, s) for a whole batch.
    fn encoder_latents(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        s_node: NodeId,
        x_node: NodeId,
        noise: &MinibatchNoise,
        frozen: bool,
    ) -> Result<NodeId, ModelError> {
        let joint = tape.concat_cols(&[x_node, s_node]);
        let head = forward_mlp(tape, store, "enc", &self.enc_spec, joint, frozen)?;
        let (mean, log_std) = self.gaussian_head(tape, head);
        let eps = tape.constant_parts(noise.n, noise.latent, noise.enc.clone());
        let std = tape.exp(log_std);
        let scaled = tape.mul(std, eps);
        Ok(tape.add(mean, scaled))
    }

    /// Prior-path latent z ~ p(Z|s) for a whole batch.
    fn prior_latents(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        s_node: NodeId,
        noise: &MinibatchNoise,
        frozen: bool,
    ) -> Result<NodeId, ModelError> {
        let head = forward_mlp(tape, store, "prior", &self.prior_spec, s_node, frozen)?;
        let (mean, log_std) = self.gaussian_head(tape, head);
        let eps = tape.constant_parts(noise.n, noise.latent, noise.prior.clone());
        let std = tape.exp(log_std);
        let scaled = tape.mul(std, eps);
        Ok(tape.add(mean, scaled))
    }

    /// Raw D logits for a batch of (x, z, s) rows. The losses work on
    /// logits so that `log D = -softplus(-logit)` stays finite with a
    /// live gradient however confident the critic gets; clamping the
    /// probability instead would zero the gradient exactly where a
    /// stranded encoder or prior needs it to find its way back.
    fn disc_logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_node: NodeId,
        z_node: NodeId,
        s_node: NodeId,
        frozen: bool,
    ) -> Result<NodeId, ModelError> {
        let joint = tape.concat_cols(&[x_node, z_node, s_node]);
        Ok(forward_mlp(
            tape,
            store,
            "disc",
            &self.disc_spec,
            joint,
            frozen,
        )?)
    }

    /// `log D` of a logit node, as -softplus(-logit).
    fn log_d(tape: &mut Tape, logit: NodeId) -> NodeId {
        let neg = tape.scale(logit, -1.0);
        let sp = tape.softplus(neg);
        tape.scale(sp, -1.0)
    }

    /// `log(1 - D)` of a logit node, as -softplus(logit).
    fn log_one_minus_d(tape: &mut Tape, logit: NodeId) -> NodeId {
        let sp = tape.softplus(logit);
        tape.scale(sp, -1.0)
    }

    /// The shared adversarial forward pass: returns D logits on the
    /// prior/generator path D(x̃, z, s) and on the encoder path
    /// D(x, z̃, s).
    fn adversarial_paths(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        s: &Array,
        x: &[f64],
        noise: &MinibatchNoise,
        freeze: Freeze,
    ) -> Result<(NodeId, NodeId), ModelError> {
        let n = self.check_batch(s, x, noise)?;
        let s_node = tape.constant(s);
        let x_node = tape.constant_parts(n, 1, x.to_vec());
        let z_enc = self.encoder_latents(tape, store, s_node, x_node, noise, freeze.enc)?;
        let z_prior = self.prior_latents(tape, store, s_node, noise, freeze.prior)?;
        // x̃ = G(z, s) with the generator's own parameters fixed; the
        // differentiable path through G into z stays open.
        let gen_in = tape.concat_cols(&[z_prior, s_node]);
        let x_tilde = forward_mlp(tape, store, "gen", &self.gen_spec, gen_in, freeze.gen)?;
        // Critic instance noise: perturb the return coordinate each path
        // feeds the critic. The encoder and the reconstruction target
        // keep the clean x.
        let (x_for_d, x_tilde_for_d) = if self.critic_noise > 0.0 {
            let data_noise: Vec<f64> = noise.x_data.iter().map(|e| e * self.critic_noise).collect();
            let gen_noise: Vec<f64> = noise.x_gen.iter().map(|e| e * self.critic_noise).collect();
            let dn = tape.constant_parts(n, 1, data_noise);
            let gn = tape.constant_parts(n, 1, gen_noise);
            (tape.add(x_node, dn), tape.add(x_tilde, gn))
        } else {
            (x_node, x_tilde)
        };
        let d_prior = self.disc_logits(tape, store, x_tilde_for_d, z_prior, s_node, freeze.disc)?;
        let d_enc = self.disc_logits(tape, store, x_for_d, z_enc, s_node, freeze.disc)?;
        Ok((d_prior, d_enc))
    }

    /// Discriminator ascent objective
    /// `(1/|B|) Σ log D(x̃, z, s) + log(1 − D(x, z̃, s))`; only `disc`
    /// parameters are differentiable. Minimize the negation.
    pub fn discriminator_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        s: &Array,
        x: &[f64],
        noise: &MinibatchNoise,
    ) -> Result<NodeId, ModelError> {
        let (d_prior, d_enc) = self.adversarial_paths(
            tape,
            store,
            s,
            x,
            noise,
            Freeze {
                enc: true,
                prior: true,
                gen: true,
                disc: false,
            },
        )?;
        let log_prior = Self::log_d(tape, d_prior);
        let log_enc = Self::log_one_minus_d(tape, d_enc);
        let sum = tape.add(log_prior, log_enc);
        Ok(tape.mean_all(sum))
    }

    /// Encoder/prior ascent objective
    /// `(1/|B|) Σ log(1 − D(x̃, z, s)) + log D(x, z̃, s)`; `enc` and
    /// `prior` are differentiable, the discriminator and generator are
    /// fixed. Minimize the negation.
    pub fn encoder_prior_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        s: &Array,
        x: &[f64],
        noise: &MinibatchNoise,
    ) -> Result<NodeId, ModelError> {
        let (d_prior, d_enc) = self.adversarial_paths(
            tape,
            store,
            s,
            x,
            noise,
            Freeze {
                enc: false,
                prior: false,
                gen: true,
                disc: true,
            },
        )?;
        let log_prior = Self::log_one_minus_d(tape, d_prior);
        let log_enc = Self::log_d(tape, d_enc);
        let sum = tape.add(log_prior, log_enc);
        Ok(tape.mean_all(sum))
    }

    /// Generator descent objective `(1/|B|) Σ (x − G(z̃, s))²` with the
    /// encoder frozen; only `gen` parameters are differentiable.
    pub fn reconstruction_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        s: &Array,
        x: &[f64],
        noise: &MinibatchNoise,
    ) -> Result<NodeId, ModelError> {
        let n = self.check_batch(s, x, noise)?;
        let s_node = tape.constant(s);
        let x_node = tape.constant_parts(n, 1, x.to_vec());
        let z_enc = self.encoder_latents(tape, store, s_node, x_node, noise, true)?;
        let gen_in = tape.concat_cols(&[z_enc, s_node]);
        let recon = forward_mlp(tape, store, "gen", &self.gen_spec, gen_in, false)?;
        let diff = tape.sub(x_node, recon);
        let sq = tape.square(diff);
        Ok(tape.mean_all(sq))
    }
}

/// Flatten per-step state features into a `[n, obs_dim]` batch array.
pub fn states_to_array(states: &[Vec<f32>], obs_dim: usize) -> Result<Array, ModelError> {
    if states.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut data = Vec::with_capacity(states.len() * obs_dim);
    for s in states {
        if s.len() != obs_dim {
            return Err(ModelError::ObsDimMismatch {
                expected: obs_dim,
                got: s.len(),
            });
        }
        data.extend_from_slice(s);
    }
    Ok(Array::from_vec(&[states.len(), obs_dim], data)?)
}
