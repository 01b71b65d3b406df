use buffet_core::datastore::{Split, Variant};
use buffet_core::env::{Env, EnvConfig};
use buffet_core::metrics::{ap_image, mean_ap_per_frame, IouThresholdSpec};
use buffet_core::synthgen::{
    build_paper_shaped_scenario, generate_dataset, generate_world, simulate_detector, ScenarioConfig,
};

fn scenario(train: usize, test: usize, frames: usize) -> ScenarioConfig {
    let mut c = build_paper_shaped_scenario();
    c.sequences.train = train;
    c.sequences.test = test;
    c.sequences.frames_per_sequence = frames;
    c
}

#[test]
fn holdout_predictions_are_no_better_than_fulltrain() {
    let cfg = scenario(50, 0, 200);
    let world = generate_world(&cfg, 3).unwrap();
    let spec = IouThresholdSpec::Single(0.5);
    for model in &cfg.detectors {
        let mean = |variant| {
            let recs = simulate_detector(&cfg, &world, &world.train_ids, model, variant, 3).unwrap();
            assert_eq!(recs.len(), 10_000);
            let scores: Vec<f64> = recs
                .iter()
                .map(|r| {
                    let seq = world.sequences.iter().find(|s| s.id == r.sequence_id).unwrap();
                    ap_image(&r.detections, &seq.frames[r.frame_index].ground_truth, spec)
                })
                .collect();
            mean_ap_per_frame(&scores).unwrap()
        };
        let (holdout, fulltrain) = (mean(Variant::Holdout), mean(Variant::Fulltrain));
        assert!(
            holdout <= fulltrain,
            "{}: holdout {holdout} > fulltrain {fulltrain}",
            model.id
        );
    }
}

#[test]
fn recall_tracks_tp_rate() {
    let cfg = scenario(20, 0, 200);
    let world = generate_world(&cfg, 5).unwrap();
    let gt_total: usize = world
        .sequences
        .iter()
        .flat_map(|s| &s.frames)
        .map(|f| f.ground_truth.len())
        .sum();
    let mut last = -1.0;
    for p in [0.2, 0.5, 0.8] {
        let mut model = cfg.detectors[0].clone();
        model.tp_rate.day = p;
        model.tp_rate.night = p;
        model.sigma = 0.0;
        model.fp_rate = 0.0;
        let recs = simulate_detector(&cfg, &world, &world.train_ids, &model, Variant::Fulltrain, 5).unwrap();
        let hits: usize = recs.iter().map(|r| r.detections.len()).sum();
        let recall = hits as f64 / gt_total as f64;
        let sd = (p * (1.0 - p) / gt_total as f64).sqrt();
        assert!((recall - p).abs() < 3.0 * sd, "rate {p}: recall {recall}, sd {sd}");
        assert!(recall > last);
        last = recall;
    }
}

#[test]
fn optimal_plan_favours_slow_rgb_in_static_daylight() {
    let mut cfg = scenario(2, 4, 100);
    cfg.regime.day_probability = 1.0;
    cfg.regime.static_probability = 1.0;
    let (ds, _) = generate_dataset(&cfg, 9).unwrap();
    let env = Env::new(
        &ds,
        EnvConfig::for_portfolio(&ds, &[], IouThresholdSpec::Single(0.5), Split::Test).unwrap(),
    )
    .unwrap();
    let slow_rgb = env.config().action_of("slow-rgb").unwrap();
    for seq in ds.split(Split::Test) {
        let (_, plan) = env.optimal_plan(seq).unwrap();
        let mut counts = vec![0usize; env.config().action_count()];
        for a in &plan {
            counts[*a] += 1;
        }
        let top = (0..counts.len())
            .max_by_key(|&a| (counts[a], std::cmp::Reverse(a)))
            .unwrap();
        assert_eq!(top, slow_rgb, "{}: usage {counts:?}", seq.id);
    }
}
