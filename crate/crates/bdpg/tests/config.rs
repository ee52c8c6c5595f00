use std::fs;

use bdpg::config::ExperimentConfig;
use bdpg::envs::EnvSpec;
use bdpg::trainer::{Algorithm, TargetKind, TrainerOptions};

const MINIMAL: &str = "[env]\nname = \"chain_world\"\nn = 10\n";

#[test]
fn minimal_file_fills_every_default() {
    let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
    assert_eq!(cfg.env, EnvSpec::ChainWorld { n: 10 });
    let defaults = TrainerOptions::default();
    assert_eq!(cfg.algo.gamma, defaults.gamma);
    assert_eq!(cfg.algo.lambda, defaults.lambda);
    assert_eq!(cfg.algo.k, defaults.unroll);
    assert_eq!(cfg.algo.workers, defaults.workers);
    assert_eq!(cfg.algo.algorithm, Algorithm::Bdpg);
    assert_eq!(cfg.algo.target, TargetKind::KStep);
    assert_eq!(cfg.algo.seed, None);
    assert_eq!(cfg.model.hidden, defaults.hidden);
    assert_eq!(cfg.io.outdir.to_str(), Some("runs"));
}

#[test]
fn full_file_round_trips_through_serialization() {
    let text = r#"
[env]
name = "sparse_grid"
width = 5
height = 4

[model]
l = 6
hidden = [32, 32]
quantiles = 16

[algo]
algorithm = "bdpg"
gamma = 0.9
lambda = 1.0
k = 32
target = "gae_plus_g"
eps_clip = 0.1
entropy_coef = 0.0
eta = 0.25
u_bar = 2.0
lr_policy = 0.0001
lr_disc = 0.002
lr_enc_prior = 0.0003
lr_gen = 0.0015
critic_noise = 0.1
anneal_lr = false
minibatch = 128
epochs = 2
workers = 4
total_steps = 50000
seed = 7

[io]
outdir = "out/sweeps"
checkpoint_every = 10
"#;
    let cfg = ExperimentConfig::parse(text).unwrap();
    let rendered = cfg.to_toml();
    let back = ExperimentConfig::parse(&rendered).unwrap();
    assert_eq!(back, cfg);
    // A second render is stable, so the run-directory copy is canonical.
    assert_eq!(back.to_toml(), rendered);
}

#[test]
fn defaults_also_round_trip() {
    let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
    let back = ExperimentConfig::parse(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn unknown_keys_are_rejected_with_their_line() {
    let text = "[env]\nname = \"chain_world\"\nn = 10\n\n[algo]\ngama = 0.9\n";
    let err = ExperimentConfig::parse(text).unwrap_err();
    assert_eq!(err.line, Some(6), "{err}");

    let text = "[env]\nname = \"chain_world\"\nn = 10\n\n[extras]\nx = 1\n";
    let err = ExperimentConfig::parse(text).unwrap_err();
    assert!(err.to_string().contains("extras"), "{err}");
}

#[test]
fn env_params_foreign_to_the_selected_env_are_rejected() {
    let text = "[env]\nname = \"chain_world\"\nn = 10\nwidth = 3\n";
    let err = ExperimentConfig::parse(text).unwrap_err();
    assert_eq!(err.line, Some(4), "{err}");
    assert!(err.message.contains("env.width"), "{err}");
    assert!(err.message.contains("chain_world"), "{err}");
}

#[test]
fn range_violations_name_the_dotted_key_and_line() {
    let text = "[env]\nname = \"chain_world\"\nn = 10\n\n[algo]\ngamma = 1.5\n";
    let err = ExperimentConfig::parse(text).unwrap_err();
    assert_eq!(err.line, Some(6), "{err}");
    assert!(err.message.contains("algo.gamma"), "{err}");

    let text = "[env]\nname = \"chain_world\"\nn = 10\n\n[model]\nhidden = []\n";
    let err = ExperimentConfig::parse(text).unwrap_err();
    assert_eq!(err.line, Some(6), "{err}");
    assert!(err.message.contains("model.hidden"), "{err}");
}

#[test]
fn curiosity_on_the_ablation_paths_is_rejected() {
    for algorithm in ["bdpg_naive", "ppo_qr"] {
        let text = format!(
            "[env]\nname = \"chain_world\"\nn = 10\n\n[algo]\nalgorithm = \"{algorithm}\"\n"
        );
        let err = ExperimentConfig::parse(&text).unwrap_err();
        assert!(err.message.contains("algo.eta"), "{err}");

        let text = format!("{text}eta = 0.0\n");
        ExperimentConfig::parse(&text).unwrap();
    }
}

#[test]
fn env_construction_failures_surface_at_load() {
    let text = "[env]\nname = \"chain_world\"\nn = 1\n";
    let err = ExperimentConfig::parse(text).unwrap_err();
    assert_eq!(err.line, Some(2), "{err}");
    assert!(err.message.contains("chain length"), "{err}");
}

#[test]
fn gamma_zero_is_a_legal_discount() {
    let text = "[env]\nname = \"chain_world\"\nn = 10\n\n[algo]\ngamma = 0.0\n";
    let cfg = ExperimentConfig::parse(text).unwrap();
    assert_eq!(cfg.algo.gamma, 0.0);
}

#[test]
fn trainer_options_mirror_the_algo_and_model_blocks() {
    let text = "\
[env]
name = \"noisy_chain\"
n = 6

[model]
l = 3
hidden = [8]
quantiles = 5

[algo]
k = 16
workers = 4
total_steps = 1000
seed = 42
eta = 0.5
";
    let cfg = ExperimentConfig::parse(text).unwrap();
    let opts = cfg.trainer_options();
    assert_eq!(opts.unroll, 16);
    assert_eq!(opts.bootstrap_k, None);
    assert_eq!(opts.workers, 4);
    assert_eq!(opts.latent_dim, 3);
    assert_eq!(opts.hidden, vec![8]);
    assert_eq!(opts.quantiles, 5);
    assert_eq!(opts.seed, 42);
    assert_eq!(opts.eta, 0.5);
    // 1000 steps over rounds of 4*16 = 64 steps -> 16 rounds, ceil.
    assert_eq!(cfg.planned_updates(), 16);
    assert_eq!(opts.total_updates, 16);
}

#[test]
fn load_reports_the_file_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(
        &path,
        "[env]\nname = \"chain_world\"\nn = 10\n\n[algo]\nk = 0\n",
    )
    .unwrap();
    let err = ExperimentConfig::load(&path).unwrap_err();
    let shown = err.to_string();
    assert!(shown.contains("run.toml:6:"), "{shown}");
    assert!(shown.contains("algo.k"), "{shown}");

    let missing = ExperimentConfig::load(&dir.path().join("absent.toml")).unwrap_err();
    assert!(missing.to_string().contains("cannot read"), "{missing}");
}
