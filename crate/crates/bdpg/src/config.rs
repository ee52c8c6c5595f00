//! Experiment configuration: the on-disk description of a run.
//!
//! A config file is flat TOML — `key = value` lines under the section
//! headers `[env]`, `[model]`, `[algo]`, and `[io]`. Every key outside
//! the env block has a default, unknown keys are rejected, and ranges
//! are checked at load time with the offending line in the message. A
//! loaded config maps onto [`TrainerOptions`] plus an environment spec,
//! and re-serializes to an equivalent file for the run directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envs::{make_env, EnvSpec};
use crate::trainer::{Algorithm, TargetKind, TrainerOptions};

/// A rejected config file: what was wrong, and where.
#[derive(Debug)]
pub struct ConfigError {
    /// File the problem was found in, when one was involved.
    pub path: Option<PathBuf>,
    /// 1-based line of the offending entry, when it could be located.
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn new(message: impl Into<String>) -> Self {
        ConfigError {
            path: None,
            line: None,
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(path) = &self.path {
            write!(f, "{}:", path.display())?;
            if let Some(line) = self.line {
                write!(f, "{line}:")?;
            }
            write!(f, " ")?;
        } else if let Some(line) = self.line {
            write!(f, "line {line}: ")?;
        }
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for ConfigError {}

/// Everything a run needs, grouped the way the file is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Environment selector; the only block without a default.
    pub env: EnvSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub algo: AlgoConfig,
    #[serde(default)]
    pub io: IoConfig,
}

/// Network shapes shared by every head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Latent dimension of the return auto-encoder.
    pub l: usize,
    /// Hidden layer widths, outermost first.
    pub hidden: Vec<usize>,
    /// Quantile count for the baseline critic head.
    pub quantiles: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let t = TrainerOptions::default();
        ModelConfig {
            l: t.latent_dim,
            hidden: t.hidden,
            quantiles: t.quantiles,
        }
    }
}

/// Learner selection and every optimization constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlgoConfig {
    pub algorithm: Algorithm,
    /// Discount γ.
    pub gamma: f64,
    /// GAE mixing weight λ.
    pub lambda: f64,
    /// Bootstrap horizon, which is also each worker's rollout length.
    pub k: usize,
    /// Bellman target assembly: `k_step` or `gae_plus_g`.
    pub target: TargetKind,
    /// PPO ratio clip width ε.
    pub eps_clip: f64,
    pub entropy_coef: f64,
    /// Curiosity scale η; zero disables the bonus.
    pub eta: f64,
    /// Curiosity cap ū in running standard deviations.
    pub u_bar: f64,
    pub lr_policy: f64,
    pub lr_disc: f64,
    pub lr_enc_prior: f64,
    pub lr_gen: f64,
    /// Instance-noise amplitude on the generator's targets.
    pub critic_noise: f64,
    /// Fade all learning rates linearly over the planned updates.
    pub anneal_lr: bool,
    /// Minibatch size per update step.
    pub minibatch: usize,
    /// Passes over the batch per round.
    pub epochs: usize,
    /// Parallel rollout workers.
    pub workers: usize,
    /// Environment-step budget for the whole run.
    pub total_steps: u64,
    /// Run seed; left empty it falls back to `--seed`, then the
    /// `BDPG_SEED` environment variable, then zero.
    pub seed: Option<u64>,
}

impl Default for AlgoConfig {
    fn default() -> Self {
        let t = TrainerOptions::default();
        AlgoConfig {
            algorithm: t.algorithm,
            gamma: t.gamma,
            lambda: t.lambda,
            k: t.unroll,
            target: t.target,
            eps_clip: t.eps_clip,
            entropy_coef: t.entropy_coef,
            eta: t.eta,
            u_bar: t.u_bar,
            lr_policy: t.lr_policy,
            lr_disc: t.lr_disc,
            lr_enc_prior: t.lr_enc_prior,
            lr_gen: t.lr_gen,
            critic_noise: t.critic_noise,
            anneal_lr: t.anneal_lr,
            minibatch: t.minibatch,
            epochs: t.epochs,
            workers: t.workers,
            total_steps: 200_000,
            seed: None,
        }
    }
}

/// Where a run writes and how often it checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    /// Parent directory receiving one subdirectory per run.
    pub outdir: PathBuf,
    /// Checkpoint cadence in updates; zero keeps only the final one.
    pub checkpoint_every: u64,
}

impl Default for IoConfig {
    fn default() -> Self {
        IoConfig {
            outdir: PathBuf::from("runs"),
            checkpoint_every: 25,
        }
    }
}

impl ExperimentConfig {
    /// Read and fully validate a config file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError {
            path: Some(path.to_path_buf()),
            line: None,
            message: format!("cannot read config: {e}"),
        })?;
        Self::parse_at(&text, Some(path))
    }

    /// Parse and validate config text that did not come from a file.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::parse_at(text, None)
    }

    fn parse_at(text: &str, path: Option<&Path>) -> Result<Self, ConfigError> {
        let locate = |mut err: ConfigError| {
            err.path = path.map(Path::to_path_buf);
            err
        };
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            locate(ConfigError {
                path: None,
                line: e.span().map(|s| line_of_offset(text, s.start)),
                message: e.message().to_string(),
            })
        })?;
        cfg.check_env_keys(text).map_err(locate)?;
        cfg.validate(text).map_err(locate)?;
        Ok(cfg)
    }

    /// The config rendered back to file form. Reparsing the result
    /// yields an equal config.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Trainer options this config describes. The seed must already be
    /// resolved; an unset seed maps to zero.
    pub fn trainer_options(&self) -> TrainerOptions {
        let a = &self.algo;
        TrainerOptions {
            algorithm: a.algorithm,
            seed: a.seed.unwrap_or(0),
            gamma: a.gamma,
            lambda: a.lambda,
            workers: a.workers,
            unroll: a.k,
            target: a.target,
            eps_clip: a.eps_clip,
            entropy_coef: a.entropy_coef,
            eta: a.eta,
            u_bar: a.u_bar,
            minibatch: a.minibatch,
            epochs: a.epochs,
            latent_dim: self.model.l,
            hidden: self.model.hidden.clone(),
            quantiles: self.model.quantiles,
            lr_policy: a.lr_policy,
            lr_disc: a.lr_disc,
            lr_enc_prior: a.lr_enc_prior,
            lr_gen: a.lr_gen,
            critic_noise: a.critic_noise,
            anneal_lr: a.anneal_lr,
            total_updates: self.planned_updates(),
            ..TrainerOptions::default()
        }
    }

    /// Rounds needed to cover the step budget; every round consumes
    /// `workers * k` environment steps.
    pub fn planned_updates(&self) -> u64 {
        let per_round = (self.algo.workers * self.algo.k) as u64;
        self.algo.total_steps.div_ceil(per_round.max(1))
    }

    /// The env block may not carry keys its environment ignores; serde
    /// cannot police tag-selected variants, so check the raw table.
    fn check_env_keys(&self, text: &str) -> Result<(), ConfigError> {
        let allowed: &[&str] = match self.env {
            EnvSpec::ChainWorld { .. } | EnvSpec::NoisyChain { .. } => &["name", "n"],
            EnvSpec::SparseGrid { .. } => &["name", "width", "height"],
            EnvSpec::BimodalBandit { .. } | EnvSpec::PointMass1d { .. } => &["name", "episode_len"],
        };
        let doc: toml::Value = toml::from_str(text).expect("reparse of accepted config");
        let table = match doc.get("env").and_then(|v| v.as_table()) {
            Some(table) => table,
            None => return Ok(()),
        };
        for key in table.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(ConfigError {
                    path: None,
                    line: key_line(text, "env", key),
                    message: format!("env.{key}: {} takes no such key", self.env.name()),
                });
            }
        }
        Ok(())
    }

    /// Range checks, each pointing at the line that set the value.
    fn validate(&self, text: &str) -> Result<(), ConfigError> {
        let fail = |section: &str, key: &str, msg: String| {
            let mut err = ConfigError::new(format!("{section}.{key}: {msg}"));
            err.line = key_line(text, section, key);
            Err(err)
        };
        let a = &self.algo;
        if !(a.gamma >= 0.0 && a.gamma < 1.0) {
            return fail(
                "algo",
                "gamma",
                format!("must lie in [0, 1), got {}", a.gamma),
            );
        }
        if !(a.lambda >= 0.0 && a.lambda <= 1.0) {
            return fail(
                "algo",
                "lambda",
                format!("must lie in [0, 1], got {}", a.lambda),
            );
        }
        if a.k == 0 {
            return fail("algo", "k", "must be at least 1".into());
        }
        if !(a.eps_clip > 0.0 && a.eps_clip < 1.0) {
            return fail(
                "algo",
                "eps_clip",
                format!("must lie in (0, 1), got {}", a.eps_clip),
            );
        }
        if !(a.entropy_coef >= 0.0 && a.entropy_coef.is_finite()) {
            return fail(
                "algo",
                "entropy_coef",
                "must be non-negative and finite".into(),
            );
        }
        if !(a.eta >= 0.0 && a.eta.is_finite()) {
            return fail("algo", "eta", "must be non-negative and finite".into());
        }
        if a.eta > 0.0 && a.algorithm != Algorithm::Bdpg {
            return fail(
                "algo",
                "eta",
                "curiosity needs the full bdpg path; set eta = 0.0".into(),
            );
        }
        if a.eta > 0.0 && !(a.u_bar > 0.0 && a.u_bar.is_finite()) {
            return fail("algo", "u_bar", "must be positive and finite".into());
        }
        for (key, lr) in [
            ("lr_policy", a.lr_policy),
            ("lr_disc", a.lr_disc),
            ("lr_enc_prior", a.lr_enc_prior),
            ("lr_gen", a.lr_gen),
        ] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return fail("algo", key, "must be non-negative and finite".into());
            }
        }
        if !(a.critic_noise >= 0.0 && a.critic_noise.is_finite()) {
            return fail(
                "algo",
                "critic_noise",
                "must be non-negative and finite".into(),
            );
        }
        if a.minibatch == 0 {
            return fail("algo", "minibatch", "must be at least 1".into());
        }
        if a.epochs == 0 {
            return fail("algo", "epochs", "must be at least 1".into());
        }
        if a.workers == 0 {
            return fail("algo", "workers", "must be at least 1".into());
        }
        if a.total_steps == 0 {
            return fail("algo", "total_steps", "must be at least 1".into());
        }
        if self.model.l == 0 {
            return fail("model", "l", "must be at least 1".into());
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return fail(
                "model",
                "hidden",
                "layer widths must be present and positive".into(),
            );
        }
        if self.model.quantiles == 0 {
            return fail("model", "quantiles", "must be at least 1".into());
        }
        if self.io.outdir.as_os_str().is_empty() {
            return fail("io", "outdir", "must name a directory".into());
        }
        if let Err(e) = make_env(&self.env) {
            let mut err = ConfigError::new(format!("env: {e}"));
            err.line = key_line(text, "env", "name");
            return Err(err);
        }
        Ok(())
    }
}

/// 1-based line number holding a byte offset.
fn line_of_offset(text: &str, offset: usize) -> usize {
    let end = offset.min(text.len());
    text.as_bytes()[..end]
        .iter()
        .filter(|b| **b == b'\n')
        .count()
        + 1
}

/// 1-based line of `key = ...` inside `[section]`, if the file sets it.
fn key_line(text: &str, section: &str, key: &str) -> Option<usize> {
    let header = format!("[{section}]");
    let mut in_section = false;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            in_section = line == header;
            continue;
        }
        if !in_section {
            continue;
        }
        if let Some(rest) = line.strip_prefix(key) {
            if rest.trim_start().starts_with('=') {
                return Some(idx + 1);
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_map_to_lines() {
        let text = "a = 1\nb = 2\nc = 3\n";
        assert_eq!(line_of_offset(text, 0), 1);
        assert_eq!(line_of_offset(text, 6), 2);
        assert_eq!(line_of_offset(text, text.len()), 4);
    }

    #[test]
    fn key_lookup_respects_sections_and_prefixes() {
        let text = "[env]\nname = \"chain_world\"\nn = 4\n\n[algo]\nk = 8\n";
        assert_eq!(key_line(text, "env", "n"), Some(3));
        assert_eq!(key_line(text, "env", "name"), Some(2));
        assert_eq!(key_line(text, "algo", "k"), Some(6));
        assert_eq!(key_line(text, "algo", "n"), None);
        assert_eq!(key_line(text, "io", "outdir"), None);
    }
}
