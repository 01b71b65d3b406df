use buffet_core::agent::{train, GreedyPolicy, TrainConfig, TrainOutcome};
use buffet_core::baselines::{evaluate_policy, random_policy};
use buffet_core::datastore::{Dataset, Split};
use buffet_core::env::{Env, EnvConfig};
use buffet_core::metrics::IouThresholdSpec;
use buffet_core::synthgen::{build_paper_shaped_scenario, generate_dataset};

fn dataset() -> Dataset {
    let mut c = build_paper_shaped_scenario();
    c.sequences.train = 20;
    c.sequences.test = 10;
    c.sequences.frames_per_sequence = 100;
    generate_dataset(&c, 21).unwrap().0
}

fn config(steps: u64) -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.total_steps = steps;
    cfg.epsilon_decay_steps = steps / 2;
    cfg.warmup = 500;
    cfg.target_sync = 500;
    cfg.log_every = 250;
    cfg
}

fn run(ds: &Dataset, cfg: &TrainConfig) -> TrainOutcome {
    let env = Env::new(
        ds,
        EnvConfig::for_portfolio(ds, &[], IouThresholdSpec::Single(0.5), Split::Train).unwrap(),
    )
    .unwrap();
    train(&env, &ds.split(Split::Train), cfg).unwrap()
}

#[test]
fn trained_agent_beats_random() {
    let ds = dataset();
    let out = run(&ds, &config(8000));
    let env = Env::new(
        &ds,
        EnvConfig::for_portfolio(&ds, &[], IouThresholdSpec::Single(0.5), Split::Test).unwrap(),
    )
    .unwrap();
    let test = ds.split(Split::Test);
    let specs = [IouThresholdSpec::Single(0.5)];
    let agent = GreedyPolicy::new(out.network, out.featurizer, out.support, "agent");
    let agent = evaluate_policy(&env, &agent, &test, &specs).unwrap().mean_ap[0];
    let random = random_policy(env.config(), 0, &[]).unwrap();
    let random = evaluate_policy(&env, &random, &test, &specs).unwrap().mean_ap[0];
    assert!(agent > random, "agent {agent} vs random {random}");
}

#[test]
fn zero_learning_rate_keeps_initial_weights() {
    let ds = dataset();
    let mut cfg = config(1500);
    cfg.learning_rate = 0.0;
    let learned = run(&ds, &cfg);
    // Training never starts when warmup is out of reach.
    cfg.warmup = cfg.replay_capacity;
    let untouched = run(&ds, &cfg);
    assert_eq!(learned.network.params, untouched.network.params);
}

#[test]
fn training_is_deterministic() {
    let ds = dataset();
    let cfg = config(1500);
    let a = run(&ds, &cfg);
    let b = run(&ds, &cfg);
    assert_eq!(a.network.params, b.network.params);
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    assert_eq!(a.episodes, b.episodes);
}
