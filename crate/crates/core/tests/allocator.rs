use pcdc::allocator::{
    adapt_per_image, expected_utility, mask_actions, rollout, Agent, AllocationEnv, DualController, PpoConfig,
    Sampling, SyntheticEnv,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(serde::Deserialize)]
struct Fixture {
    optimum_actions: Vec<usize>,
    optimum_utility: f64,
    env: SyntheticEnv,
}

fn fixture() -> Fixture {
    let text = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/fixtures/synthetic_b8_k3.toml"
    ))
    .unwrap();
    toml::from_str(&text).unwrap()
}

#[test]
fn brute_force_matches_fixture() {
    let f = fixture();
    assert_eq!(f.env, SyntheticEnv::random(2, 4, 3, 0.4, 0).unwrap());
    let (actions, u) = f.env.brute_force();
    assert_eq!(actions, f.optimum_actions);
    assert!((u - f.optimum_utility).abs() < 1e-12);
}

#[test]
fn adaptation_reaches_the_exhaustive_optimum() {
    let f = fixture();
    let cfg = PpoConfig {
        epochs: 2000,
        episodes: 8,
        ..PpoConfig::default()
    };
    let mut agent = Agent::new(3, &cfg, 0);
    let before = expected_utility(&f.env, &agent, true).unwrap();
    let out = adapt_per_image(&f.env, &mut agent, &cfg, 0).unwrap();
    let after = expected_utility(&f.env, &agent, true).unwrap();
    let tol = 0.05 * f.optimum_utility.abs();
    assert!(
        f.optimum_utility - before > tol,
        "initial policy already optimal: {before}"
    );
    assert!(
        f.optimum_utility - after <= tol,
        "expected utility {after} vs optimum {}",
        f.optimum_utility
    );
    assert!(f.optimum_utility - out.episode.outcome.utility <= tol);
    assert!(out.report.rows.iter().all(|r| r.feasible && r.eta == 0.0));
}

#[test]
fn dual_ascent_pulls_rate_back_under_budget() {
    let env = SyntheticEnv::random(2, 4, 3, 0.25, 3).unwrap();
    let cfg = PpoConfig {
        epochs: 1000,
        episodes: 8,
        masking: false,
        ..PpoConfig::default()
    };
    let mut agent = Agent::new(3, &cfg, 0);
    let out = adapt_per_image(&env, &mut agent, &cfg, 1).unwrap();
    let bits = out.report.epoch_mean_bits();
    let eta = out.report.eta_trace();
    assert!(
        bits[0] > env.budget(),
        "budget not binding: {} <= {}",
        bits[0],
        env.budget()
    );
    assert!(eta.iter().all(|&e| e >= 0.0));
    assert!(eta.iter().cloned().fold(0.0, f64::max) > 0.0);
    let last = *bits.last().unwrap();
    assert!(last <= 1.1 * env.budget(), "{last} vs {}", env.budget());
    for w in eta.windows(2).zip(&bits) {
        let ((prev, next), r) = ((w.0[0], w.0[1]), *w.1);
        assert_eq!(next, (prev + 1e-3 * (r - env.budget())).max(0.0));
    }
}

#[test]
fn policy_persists_across_images_unless_reset() {
    let env = SyntheticEnv::random(2, 4, 3, 0.4, 1).unwrap();
    let cfg = PpoConfig {
        epochs: 3,
        ..PpoConfig::default()
    };
    let mut agent = Agent::new(3, &cfg, 0);
    let fresh = agent.policy.store().values().to_vec();
    adapt_per_image(&env, &mut agent, &cfg, 0).unwrap();
    let trained = agent.policy.store().values().to_vec();
    assert_ne!(trained, fresh);
    let reset = PpoConfig {
        reset_per_image: true,
        epochs: 0,
        ..cfg
    };
    adapt_per_image(&env, &mut agent, &reset, 0).unwrap();
    assert_eq!(agent.policy.store().values(), fresh.as_slice());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_rollouts_never_exceed_budget(seed in 0u64..10_000, tight in 0.0f64..1.0, policy_seed in 0u64..100) {
        let env = SyntheticEnv::random(2, 4, 3, tight, seed).unwrap();
        let agent = Agent::new(3, &PpoConfig::default(), policy_seed);
        let dual = DualController::new(env.budget(), 1e-3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ policy_seed);
        for _ in 0..10 {
            let ep = rollout(&env, &agent, &dual, true, Sampling::Stochastic, &mut rng).unwrap();
            prop_assert!(ep.outcome.total_bits <= env.budget());
            prop_assert!(ep.trajectory.returns.iter().all(|&g| g == ep.trajectory.reward));
        }
    }

    #[test]
    fn mask_is_a_threshold(costs in proptest::collection::vec(0.0f64..100.0, 1..8), remaining in -10.0f64..200.0, rest in 0.0f64..50.0) {
        let m = mask_actions(remaining, &costs, rest);
        prop_assert!(m[0]);
        for (a, &c) in costs.iter().enumerate().skip(1) {
            prop_assert_eq!(m[a], c + rest <= remaining);
        }
    }
}
