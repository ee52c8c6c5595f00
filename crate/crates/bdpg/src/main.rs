//! `bdpg` command line: training runs, checkpoint evaluation, the
//! contraction oracle, the gradient audit, and metrics export.
//!
//! Exit codes: 0 success, 1 config or usage error, 2 numerical failure,
//! 3 acceptance failure (an oracle trial over the contraction bound).

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bdpg::bellman::{
    contraction_certificate, random_mdp, separated_pair, BellmanError, WassersteinOrder,
};
use bdpg::config::{ConfigError, ExperimentConfig};
use bdpg::envs::make_env;
use bdpg::gradcheck::{all_pass, run_suite, GRADCHECK_TOL};
use bdpg::metrics::{column_value, read_metrics, MetricsError, MetricsWriter, METRICS_COLUMNS};
use bdpg::ndmath::load_checkpoint;
use bdpg::policy::PolicyNet;
use bdpg::trainer::{evaluate_policy, Algorithm, Trainer, TrainerError};

#[derive(Parser)]
#[command(
    name = "bdpg",
    version,
    about = "Distributional policy gradients with an adversarial return auto-encoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run training to the configured environment-step budget.
    Train(TrainArgs),
    /// Roll a frozen policy checkpoint and report its score.
    Eval(EvalArgs),
    /// Certify the distributional backup's contraction on random MDPs.
    Oracle(OracleArgs),
    /// Audit every loss gradient against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Slice a run's metrics into one two-column CSV per metric.
    ExportPlots(ExportPlotsArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Seed override; beats the config value and BDPG_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    outdir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Config describing the environment and network shapes.
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint to roll.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Episodes to average over.
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    /// Seed override; beats the config value and BDPG_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct OracleArgs {
    /// States per random MDP.
    #[arg(long, default_value_t = 6)]
    states: usize,
    /// Support grid size for the return distributions.
    #[arg(long, default_value_t = 256)]
    support: usize,
    /// Discount factor under certification.
    #[arg(long, default_value_t = 0.9)]
    gamma: f64,
    /// Random MDP/distribution-pair trials.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Restrict to one Wasserstein order (1 or 2); default checks both.
    #[arg(long)]
    p: Option<u8>,
    /// Slack over gamma allowed for grid-projection error.
    #[arg(long, default_value_t = 0.02)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Randomized instances per loss family.
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExportPlotsArgs {
    /// Run directory holding metrics.csv.
    #[arg(long)]
    run: PathBuf,
    /// Where the slices go; default `<run>/plots`.
    #[arg(long)]
    outdir: Option<PathBuf>,
}

/// Failure carrying its exit code class.
enum Failure {
    Config(String),
    Numerical(String),
    Acceptance(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 1,
            Failure::Numerical(_) => 2,
            Failure::Acceptance(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Numerical(m) | Failure::Acceptance(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<TrainerError> for Failure {
    fn from(e: TrainerError) -> Self {
        match e {
            TrainerError::Config(_) => Failure::Config(e.to_string()),
            _ => Failure::Numerical(e.to_string()),
        }
    }
}

impl From<BellmanError> for Failure {
    fn from(e: BellmanError) -> Self {
        Failure::Numerical(e.to_string())
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        Failure::Config(e.to_string())
    }
}

/// IO failure with the path that caused it.
fn io_fail(path: &Path, e: io::Error) -> Failure {
    Failure::Config(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Oracle(args) => cmd_oracle(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::ExportPlots(args) => cmd_export_plots(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            ExitCode::from(failure.code())
        }
    }
}

/// Seed precedence: command line, then config, then BDPG_SEED, then 0.
fn resolve_seed(flag: Option<u64>, configured: Option<u64>) -> Result<u64, Failure> {
    if let Some(seed) = flag.or(configured) {
        return Ok(seed);
    }
    match std::env::var("BDPG_SEED") {
        Ok(raw) => raw.trim().parse().map_err(|e| {
            Failure::Config(format!("BDPG_SEED {raw:?} does not parse as a seed: {e}"))
        }),
        Err(_) => Ok(0),
    }
}

fn algorithm_token(algorithm: Algorithm) -> &'static str {
    match algorithm {
        Algorithm::Bdpg => "bdpg",
        Algorithm::BdpgNaive => "bdpg_naive",
        Algorithm::PpoQr => "ppo_qr",
    }
}

/// Create a fresh run directory under the configured outdir, suffixing
/// the name when earlier runs already claimed it.
fn claim_run_dir(config: &ExperimentConfig, seed: u64) -> Result<PathBuf, Failure> {
    let base = format!(
        "{}-{}-s{seed}",
        config.env.name(),
        algorithm_token(config.algo.algorithm)
    );
    fs::create_dir_all(&config.io.outdir).map_err(|e| io_fail(&config.io.outdir, e))?;
    for attempt in 0..10_000u32 {
        let name = if attempt == 0 {
            base.clone()
        } else {
            format!("{base}-{attempt}")
        };
        let dir = config.io.outdir.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_fail(&dir, e)),
        }
    }
    Err(Failure::Config(format!(
        "outdir {} is saturated with runs named {base}*",
        config.io.outdir.display()
    )))
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(outdir) = args.outdir {
        config.io.outdir = outdir;
    }
    let seed = resolve_seed(args.seed, config.algo.seed)?;
    config.algo.seed = Some(seed);

    let run_dir = claim_run_dir(&config, seed)?;
    let config_copy = run_dir.join("config.toml");
    fs::write(&config_copy, config.to_toml()).map_err(|e| io_fail(&config_copy, e))?;
    let version_file = run_dir.join("version.txt");
    fs::write(
        &version_file,
        format!("bdpg {}\nseed {seed}\n", env!("CARGO_PKG_VERSION")),
    )
    .map_err(|e| io_fail(&version_file, e))?;

    let mut opts = config.trainer_options();
    opts.dump_dir = Some(run_dir.clone());
    let mut trainer = Trainer::new(opts, &config.env)?;
    let metrics_path = run_dir.join("metrics.csv");
    let mut metrics =
        MetricsWriter::create(&metrics_path).map_err(|e| io_fail(&metrics_path, e))?;

    println!("run {}", run_dir.display());
    while trainer.env_steps() < config.algo.total_steps {
        let row = trainer.round()?;
        metrics
            .append(&row)
            .map_err(|e| io_fail(&metrics_path, e))?;
        println!(
            "update {:>4}  steps {:>9}  score {:+.4} ± {:.4}",
            row.update_idx, row.env_steps, row.score_mean, row.score_std
        );
        let done = row.update_idx + 1;
        if config.io.checkpoint_every > 0 && done % config.io.checkpoint_every == 0 {
            trainer.save(&run_dir.join(format!("ckpt-{done:05}.ckpt")))?;
        }
    }
    trainer.save(&run_dir.join("final.ckpt"))?;

    let (score_mean, score_std) = trainer.score_stats();
    let summary_path = run_dir.join("summary.txt");
    fs::write(
        &summary_path,
        format!(
            "updates {}\nenv_steps {}\nscore_mean {score_mean}\nscore_std {score_std}\n",
            trainer.update_idx(),
            trainer.env_steps(),
        ),
    )
    .map_err(|e| io_fail(&summary_path, e))?;
    println!(
        "done: {} updates, {} env steps, score {score_mean:+.4} ± {score_std:.4}",
        trainer.update_idx(),
        trainer.env_steps()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    let config = ExperimentConfig::load(&args.config)?;
    let seed = resolve_seed(args.seed, config.algo.seed)?;
    let (store, _optimizers) = load_checkpoint(&args.checkpoint)
        .map_err(|e| Failure::Config(format!("checkpoint {}: {e}", args.checkpoint.display())))?;
    let mut env = make_env(&config.env).map_err(|e| Failure::Config(e.to_string()))?;
    let policy = PolicyNet::attach(env.obs_dim(), env.action_space(), &config.model.hidden);
    let (mean, std) = evaluate_policy(env.as_mut(), &policy, &store, args.episodes, seed)?;
    println!(
        "score {mean:+.4} ± {std:.4} over {} episodes (seed {seed})",
        args.episodes
    );
    Ok(())
}

fn wasserstein_label(p: WassersteinOrder) -> &'static str {
    match p {
        WassersteinOrder::One => "W1",
        WassersteinOrder::Two => "W2",
    }
}

fn cmd_oracle(args: OracleArgs) -> Result<(), Failure> {
    if !(args.gamma >= 0.0 && args.gamma < 1.0) {
        return Err(Failure::Config(format!(
            "--gamma must lie in [0, 1), got {}",
            args.gamma
        )));
    }
    if args.states == 0 {
        return Err(Failure::Config("--states must be at least 1".into()));
    }
    if args.support < 4 {
        return Err(Failure::Config(
            "--support must be at least 4 to leave room for separated pairs".into(),
        ));
    }
    let orders: &[WassersteinOrder] = match args.p {
        None => &[WassersteinOrder::One, WassersteinOrder::Two],
        Some(1) => &[WassersteinOrder::One],
        Some(2) => &[WassersteinOrder::Two],
        Some(other) => {
            return Err(Failure::Config(format!("--p must be 1 or 2, got {other}")));
        }
    };
    if args.trials == 0 {
        println!("warning: zero trials requested; contraction certified vacuously");
        return Ok(());
    }

    let bound = args.gamma + args.tol;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut worst = 0.0f64;
    for trial in 0..args.trials {
        let mdp = random_mdp(&mut rng, args.states, args.gamma)?;
        let (omega1, omega2) = separated_pair(&mut rng, &mdp, args.support)?;
        for &p in orders {
            let cert = contraction_certificate(&mdp, &omega1, &omega2, p)?;
            // Separated pairs keep d_before strictly positive, so a
            // missing ratio means a degenerate draw slipped through.
            let ratio = cert.ratio.ok_or_else(|| {
                Failure::Numerical(format!("trial {trial}: coinciding distribution pair"))
            })?;
            worst = worst.max(ratio);
            if ratio > bound {
                return Err(Failure::Acceptance(format!(
                    "trial {trial} ({}): ratio {ratio:.6} exceeds {bound:.6}",
                    wasserstein_label(p)
                )));
            }
        }
    }
    let labels: Vec<&str> = orders.iter().map(|&p| wasserstein_label(p)).collect();
    println!(
        "oracle pass: {} trials x {} at gamma {}, worst ratio {worst:.6} (bound {bound:.6})",
        args.trials,
        labels.join("+"),
        args.gamma
    );
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), Failure> {
    let report = run_suite(args.instances, args.seed);
    for check in &report {
        println!(
            "{:<16} {:>4} instances  worst rel err {:>10.3e}  {}",
            check.loss,
            check.instances,
            check.worst_rel_err,
            if check.passed() { "ok" } else { "FAIL" }
        );
    }
    if all_pass(&report) {
        Ok(())
    } else {
        let worst = report
            .iter()
            .max_by(|a, b| a.worst_rel_err.total_cmp(&b.worst_rel_err))
            .expect("non-empty report");
        Err(Failure::Numerical(format!(
            "gradient audit failed: {} at rel err {:.3e} (tolerance {GRADCHECK_TOL:.0e})",
            worst.loss, worst.worst_rel_err
        )))
    }
}

fn cmd_export_plots(args: ExportPlotsArgs) -> Result<(), Failure> {
    let metrics_path = args.run.join("metrics.csv");
    let rows = read_metrics(&metrics_path)?;
    let outdir = args.outdir.unwrap_or_else(|| args.run.join("plots"));
    fs::create_dir_all(&outdir).map_err(|e| io_fail(&outdir, e))?;
    let mut written = 0usize;
    for &column in METRICS_COLUMNS.iter().filter(|&&c| c != "update_idx") {
        let mut text = format!("update_idx,{column}\n");
        for row in &rows {
            let value = column_value(row, column).expect("column listed in the schema");
            writeln!(text, "{},{value}", row.update_idx).expect("string write");
        }
        let path = outdir.join(format!("{column}.csv"));
        fs::write(&path, text).map_err(|e| io_fail(&path, e))?;
        written += 1;
    }
    println!(
        "wrote {written} metric slices ({} rows each) to {}",
        rows.len(),
        outdir.display()
    );
    Ok(())
}
