use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use buffet_core::agent::TrainConfig;
use buffet_core::synthgen::build_paper_shaped_scenario;

fn buffet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_buffet")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = buffet(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Data rows of a CSV written by `eval` or `report`, split into fields.
fn rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let head = lines.next().unwrap().split(',').map(String::from).collect();
    let body = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (head, body)
}

fn small_dataset(dir: &Path) -> PathBuf {
    let mut cfg = build_paper_shaped_scenario();
    cfg.sequences.train = 6;
    cfg.sequences.test = 4;
    cfg.sequences.frames_per_sequence = 60;
    let scenario = dir.join("scenario.json");
    std::fs::write(&scenario, cfg.to_json()).unwrap();
    let data = dir.join("data");
    ok(&["generate", s(&scenario), s(&data)]);
    data
}

#[test]
fn generate_writes_a_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    for name in ["frames.jsonl", "detectors.json", "folds.json", "generation.json"] {
        assert!(data.join(name).exists(), "{name} missing");
    }
}

#[test]
fn invalid_scenario_exits_with_code_two_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = build_paper_shaped_scenario();
    cfg.detectors[0].tp_rate.day = 1.5;
    let scenario = dir.path().join("bad.json");
    std::fs::write(&scenario, cfg.to_json()).unwrap();
    let out = buffet(&["generate", s(&scenario), s(&dir.path().join("data"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("detectors[0].tp_rate.day"), "{err}");
}

#[test]
fn unknown_detector_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let out = buffet(&["eval", s(&data), "--baseline", "fixed:nope"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_eval_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = small_dataset(d);

    let mut cfg = TrainConfig::desk();
    cfg.total_steps = 600;
    cfg.epsilon_decay_steps = 300;
    cfg.warmup = 100;
    cfg.target_sync = 100;
    cfg.log_every = 100;
    let config = d.join("config.json");
    std::fs::write(&config, cfg.to_json()).unwrap();
    let ckpt = d.join("agent.json");
    ok(&["train", s(&data), "--config", s(&config), "--checkpoint", s(&ckpt)]);
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(ckpt.with_extension("log.csv")).unwrap();
    assert!(log.starts_with("# "));
    assert!(log.contains("step,epsilon,loss,mean_return_last_100"));

    let agent_csv = d.join("agent.csv");
    ok(&["eval", s(&data), "--checkpoint", s(&ckpt), "--out", s(&agent_csv)]);
    let (head, body) = rows(&agent_csv);
    assert_eq!(body.len(), 1);
    let usage: f64 = head
        .iter()
        .zip(&body[0])
        .filter(|(h, _)| h.starts_with("usage_"))
        .map(|(_, v)| v.parse::<f64>().unwrap())
        .sum();
    assert!((usage - 100.0).abs() < 0.05, "usage sums to {usage}");

    let mut inputs = vec![agent_csv];
    let baselines = [
        "fixed:fast-rgb",
        "fixed:fast-lidar",
        "fixed:slow-rgb",
        "fixed:slow-lidar",
        "random",
        "alternating",
        "lighting",
        "lighting:fast-lidar,slow-rgb@100",
    ];
    for (i, b) in baselines.iter().enumerate() {
        let out = d.join(format!("b{i}.csv"));
        ok(&["eval", s(&data), "--baseline", b, "--out", s(&out)]);
        inputs.push(out);
    }
    let merged = d.join("report.csv");
    let mut args = vec!["report"];
    args.extend(inputs.iter().map(|p| s(p)));
    args.extend(["--out", s(&merged)]);
    let table = ok(&args);
    let (head, body) = rows(&merged);
    assert_eq!(body.len(), 9);
    assert_eq!(head.last().unwrap(), "best");
    assert!(table.contains('*'));
}

#[test]
fn lighting_sweep_lists_every_threshold_and_the_best() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let out = dir.path().join("sweep.csv");
    ok(&["eval", s(&data), "--baseline", "lighting", "--sweep", "--out", s(&out)]);
    let (_, body) = rows(&out);
    assert_eq!(body.len(), 11);
    assert!(body.last().unwrap()[0].ends_with("@best"));
}

#[test]
fn eval_output_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let a = ok(&["eval", s(&data), "--baseline", "random", "--seed", "4"]);
    let b = ok(&["eval", s(&data), "--baseline", "random", "--seed", "4"]);
    assert_eq!(a, b);
}
