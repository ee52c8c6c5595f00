//! Distributional reinforcement learning with a generative return model.
//!
//! The library is organized around a small reverse-mode autodiff engine
//! ([`ndmath`]), a conditional generative model of state-return
//! distributions trained adversarially ([`return_model`]), exact tabular
//! distributional dynamic programming and 1-D optimal transport
//! ([`bellman`]), an information-gain curiosity bonus ([`curiosity`]),
//! PPO policy optimization ([`policy`]), a roster of small diagnostic
//! environments ([`envs`]), and the training loop that ties them together
//! ([`trainer`]). Experiment configuration and run-directory plumbing live
//! in [`config`] and [`metrics`].

pub mod bellman;
pub mod config;
pub mod curiosity;
pub mod envs;
pub mod gradcheck;
pub mod metrics;
pub mod ndmath;
pub mod policy;
pub mod return_model;
pub mod trainer;
