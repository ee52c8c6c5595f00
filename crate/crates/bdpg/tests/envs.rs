//! Cross-checks between environment dynamics and the tabular oracle:
//! empirical discounted returns collected by rolling the real envs must
//! match the exact fixpoint laws computed from their tabular views.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bdpg::bellman::{
    return_fixpoint, wasserstein_grid, TabularMdp, TabularReturnDistribution, WassersteinOrder,
};
use bdpg::envs::{make_env, BimodalBandit, ChainWorld, Env, EnvSpec, NoisyChain, SparseGrid};
use bdpg::policy::Action;

/// Project an unweighted sample set onto a support grid with the same
/// two-point linear splits the oracle's backup uses, so sampled and
/// computed laws meet on identical footing.
fn project_samples(support: &[f64], samples: &[f64]) -> TabularReturnDistribution {
    let last = support.len() - 1;
    let mut probs = vec![0.0; support.len()];
    let w = 1.0 / samples.len() as f64;
    for &x in samples {
        if x <= support[0] {
            probs[0] += w;
            continue;
        }
        if x >= support[last] {
            probs[last] += w;
            continue;
        }
        let hi = support.partition_point(|&g| g < x);
        let lo = hi - 1;
        let t = (x - support[lo]) / (support[hi] - support[lo]);
        probs[lo] += w * (1.0 - t);
        probs[hi] += w * t;
    }
    TabularReturnDistribution::new(support.to_vec(), probs).unwrap()
}

/// Mix per-state fixpoint laws by the initial state distribution.
fn mix_by_start(laws: &[TabularReturnDistribution], start: &[f64]) -> TabularReturnDistribution {
    let support = laws[0].support().to_vec();
    let mut probs = vec![0.0; support.len()];
    for (law, &weight) in laws.iter().zip(start) {
        for (p, &q) in probs.iter_mut().zip(law.probs()) {
            *p += weight * q;
        }
    }
    TabularReturnDistribution::new(support, probs).unwrap()
}

/// Discounted return of one full episode under a scripted action source.
fn rollout_return(
    env: &mut dyn Env,
    seed: u64,
    gamma: f64,
    mut act: impl FnMut(usize, &mut ChaCha8Rng) -> Action,
    rng: &mut ChaCha8Rng,
) -> f64 {
    env.reset(seed);
    let mut total = 0.0;
    let mut discount = 1.0;
    for step in 0.. {
        let action = act(step, rng);
        let (_, reward, done) = env.step(&action).unwrap();
        total += discount * reward;
        discount *= gamma;
        if done {
            return total;
        }
    }
    unreachable!()
}

#[test]
fn bandit_fixpoint_is_the_two_atom_law_and_matches_rollouts() {
    let gamma = 0.5;
    let mut env = BimodalBandit::new(32).unwrap();
    let view = env.tabular_view(&vec![vec![0.5, 0.5]; 2]).unwrap();
    let mdp = TabularMdp::new(view.rewards, view.transitions, gamma).unwrap();
    let support = mdp.return_support(512);
    let laws = return_fixpoint(&mdp, support.clone(), 1e-10, 400).unwrap();
    let oracle = mix_by_start(&laws, &view.start);

    // The exact law is an even mixture of atoms at +-1/(1-gamma): all
    // fixpoint mass sits within one grid cell of +-2, split evenly.
    let mut atoms = Vec::new();
    for (x, p) in oracle.support().iter().zip(oracle.probs()) {
        if *p > 1e-6 {
            atoms.push((*x, *p));
        }
    }
    let plus_mass: f64 = atoms.iter().filter(|(x, _)| *x > 0.0).map(|(_, p)| p).sum();
    assert!((plus_mass - 0.5).abs() < 1e-6, "mode masses {plus_mass}");
    assert!(oracle.mean().abs() < 1e-6);
    let spacing = support[1] - support[0];
    for (x, _) in &atoms {
        assert!(
            (x.abs() - 2.0).abs() < spacing,
            "fixpoint atom at {x}, expected near +-2"
        );
    }
    let exact = TabularReturnDistribution::new(vec![-2.0, 2.0], vec![0.5, 0.5]).unwrap();
    let w1_exact = wasserstein_grid(&oracle, &exact, WassersteinOrder::One).unwrap();
    assert!(w1_exact < spacing, "oracle-vs-analytic W1 = {w1_exact}");

    // Rolling the real environment reproduces the same law.
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let returns: Vec<f64> = (0..10_000)
        .map(|i| rollout_return(&mut env, i, gamma, |_, _| Action::Discrete(0), &mut rng))
        .collect();
    let empirical = project_samples(&support, &returns);
    let w1 = wasserstein_grid(&empirical, &oracle, WassersteinOrder::One).unwrap();
    assert!(w1 < 0.08, "empirical-vs-oracle W1 = {w1}");
}

#[test]
fn chain_fixpoint_matches_the_deterministic_sprint() {
    let gamma = 0.9;
    let n = 6;
    let mut env = ChainWorld::new(n).unwrap();
    let right = vec![vec![0.0, 1.0]; n];
    let view = env.tabular_view(&right).unwrap();
    let mdp = TabularMdp::new(view.rewards, view.transitions, gamma).unwrap();
    let support = mdp.return_support(512);
    let laws = return_fixpoint(&mdp, support.clone(), 1e-10, 400).unwrap();

    // Always-right from position s earns exactly gamma^(n-2-s).
    for s in 0..n - 1 {
        let expected = gamma.powi((n - 2 - s) as i32);
        assert!(
            (laws[s].mean() - expected).abs() < 1e-9,
            "state {s} mean {} expected {expected}",
            laws[s].mean()
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let observed = rollout_return(&mut env, 0, gamma, |_, _| Action::Discrete(1), &mut rng);
    let empirical = project_samples(&support, &[observed]);
    let w1 = wasserstein_grid(&empirical, &laws[0], WassersteinOrder::One).unwrap();
    let spacing = support[1] - support[0];
    assert!(w1 < spacing, "single deterministic episode W1 = {w1}");
}

#[test]
fn noisy_chain_fixpoint_matches_random_walk_rollouts() {
    let gamma = 0.5;
    let n = 4;
    let mut env = NoisyChain::new(n).unwrap();
    let uniform = vec![vec![0.5, 0.5]; n];
    let view = env.tabular_view(&uniform).unwrap();
    let mdp = TabularMdp::new(view.rewards, view.transitions, gamma).unwrap();
    let support = mdp.return_support(512);
    let laws = return_fixpoint(&mdp, support.clone(), 1e-10, 400).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let returns: Vec<f64> = (0..20_000)
        .map(|i| {
            rollout_return(
                &mut env,
                i,
                gamma,
                |_, rng| Action::Discrete(usize::from(rng.gen_bool(0.5))),
                &mut rng,
            )
        })
        .collect();
    let empirical = project_samples(&support, &returns);
    let w1 = wasserstein_grid(&empirical, &laws[0], WassersteinOrder::One).unwrap();
    assert!(w1 < 0.1, "empirical-vs-oracle W1 = {w1}");
    // Zero-mean reward noise must leave the fixpoint mean at zero.
    assert!(laws[0].mean().abs() < 1e-6);
}

#[test]
fn grid_fixpoint_matches_the_scripted_walk() {
    let gamma = 0.9;
    let env = SparseGrid::new(2, 2).unwrap();
    // East from the left column, north from the right column.
    let policy = vec![
        vec![0.0, 0.0, 0.0, 1.0],
        vec![1.0, 0.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, 1.0],
        vec![1.0, 0.0, 0.0, 0.0],
    ];
    let view = env.tabular_view(&policy).unwrap();
    let mdp = TabularMdp::new(view.rewards, view.transitions, gamma).unwrap();
    let support = mdp.return_support(256);
    let laws = return_fixpoint(&mdp, support, 1e-10, 400).unwrap();
    // Start (0,0): east then north = goal on step 2 -> gamma * 1.
    assert!((laws[0].mean() - gamma).abs() < 1e-9);
    // (1,0): north enters the goal immediately.
    assert!((laws[1].mean() - 1.0).abs() < 1e-9);
    // (0,1): east enters the goal immediately.
    assert!((laws[2].mean() - 1.0).abs() < 1e-9);
}

#[test]
fn every_env_replays_identically_under_identical_seeds() {
    let specs = [
        EnvSpec::ChainWorld { n: 8 },
        EnvSpec::SparseGrid {
            width: 3,
            height: 3,
        },
        EnvSpec::BimodalBandit { episode_len: 16 },
        EnvSpec::NoisyChain { n: 8 },
        EnvSpec::PointMass1d { episode_len: 16 },
    ];
    for spec in &specs {
        let mut a = make_env(spec).unwrap();
        let mut b = make_env(spec).unwrap();
        for episode in 0..3u64 {
            let sa = a.reset(episode);
            let sb = b.reset(episode);
            assert_eq!(sa, sb, "{spec:?} reset differs");
            // Identical action scripts from identical seeds.
            let mut rng_a = ChaCha8Rng::seed_from_u64(900 + episode);
            let mut rng_b = ChaCha8Rng::seed_from_u64(900 + episode);
            loop {
                let action_a = script_action(a.as_ref(), &mut rng_a);
                let action_b = script_action(b.as_ref(), &mut rng_b);
                assert_eq!(action_a, action_b);
                let (sa, ra, da) = a.step(&action_a).unwrap();
                let (sb, rb, db) = b.step(&action_b).unwrap();
                assert_eq!(sa, sb, "{spec:?} state diverged");
                assert_eq!(ra, rb, "{spec:?} reward diverged");
                assert_eq!(da, db);
                if da {
                    break;
                }
            }
        }
    }
}

fn script_action(env: &dyn Env, rng: &mut ChaCha8Rng) -> Action {
    match env.action_space() {
        bdpg::policy::ActionSpace::Discrete { actions } => {
            Action::Discrete(rng.gen_range(0..actions))
        }
        bdpg::policy::ActionSpace::Continuous { dim } => {
            Action::Continuous((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        }
    }
}
