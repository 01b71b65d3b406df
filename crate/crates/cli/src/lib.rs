//! Commands behind the `buffet` binary: generate a synthetic dataset, train
//! an agent, evaluate a checkpoint or a baseline, merge evaluation reports.

mod report;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use buffet_core::agent::{self, Checkpoint, TrainConfig, TrainLog};
use buffet_core::baselines::{
    alternating_policy, combine_episodes, evaluate_episode, fixed_policy, lighting_heuristic, random_policy,
    sweep_lighting_thresholds_with, EpisodeEval, Evaluation,
};
use buffet_core::datastore::{Dataset, Sequence, Split};
use buffet_core::env::{Env, EnvConfig, Policy};
use buffet_core::metrics::IouThresholdSpec;
use buffet_core::synthgen::{generate_dataset, ScenarioConfig};
use buffet_core::Error;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

pub use report::{merge_reports, EvalReport, ReportRow, ReportTable};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
    #[error("{context}: {source}")]
    Csv {
        context: String,
        #[source]
        source: csv::Error,
    },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 2 for invalid input, 3 for numeric failure during training, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(Error::Divergence { .. }) => 3,
            CliError::Core(e) if e.is_validation() => 2,
            CliError::Core(Error::MissingPrediction { .. }) => 2,
            CliError::Usage(_) | CliError::Csv { .. } => 2,
            CliError::Core(_) | CliError::Io { .. } => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

fn io_err(context: String) -> impl FnOnce(std::io::Error) -> CliError {
    move |source| CliError::Io { context, source }
}

pub fn parse_iou(s: &str) -> std::result::Result<IouThresholdSpec, String> {
    IouThresholdSpec::from_str(s).map_err(|e| e.to_string())
}

#[derive(Debug, Parser)]
#[command(
    name = "buffet",
    version,
    about = "Detector portfolio scheduling: data, training, evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset from a scenario file.
    Generate(GenerateArgs),
    /// Train an agent on the training split (holdout predictions).
    Train(TrainArgs),
    /// Evaluate a checkpoint or a baseline on the test split (fulltrain predictions).
    Eval(EvalArgs),
    /// Merge evaluation CSVs into one comparison table.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    /// Scenario JSON file.
    pub scenario: PathBuf,
    /// Output directory.
    pub out: PathBuf,
    /// Overrides the scenario's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    pub dataset: PathBuf,
    /// Training schedule JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Where to write the checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Training log CSV; defaults to the checkpoint path with `.log.csv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Overrides the schedule's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// IoU threshold of the training reward: 0.5, 0.7 or coco.
    #[arg(long, default_value = "0.5", value_parser = parse_iou)]
    pub iou: IouThresholdSpec,
    /// Comma-separated detector subset; all detectors when omitted.
    #[arg(long, value_delimiter = ',')]
    pub portfolio: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Dataset directory.
    pub dataset: PathBuf,
    /// Trained checkpoint to evaluate greedily.
    #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
    pub checkpoint: Option<PathBuf>,
    /// fixed:<id> | random | alternating | lighting[:<dark>,<bright>[@<threshold>]]
    #[arg(long)]
    pub baseline: Option<String>,
    /// Reward spec of the environment and selection metric of the lighting
    /// sweep. Defaults to the checkpoint's training spec, else 0.5.
    #[arg(long, value_parser = parse_iou)]
    pub iou: Option<IouThresholdSpec>,
    /// With the lighting baseline, emit every threshold of the grid.
    #[arg(long)]
    pub sweep: bool,
    /// Comma-separated detector subset; all detectors when omitted.
    #[arg(long, value_delimiter = ',')]
    pub portfolio: Vec<String>,
    /// Seed of the random baseline.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report CSV; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Evaluation CSVs written by `eval`.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Keep only rows of this detector subset (and fixed rows of its members).
    #[arg(long, value_delimiter = ',')]
    pub portfolio: Vec<String>,
    /// Merged CSV; printed table only when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Run one command and return what it prints.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a).map(|s| s.to_string()),
        Command::Train(a) => cmd_train(&a).map(|s| s.to_string()),
        Command::Eval(a) => cmd_eval(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GenerateSummary {
    pub scenario: String,
    pub seed: u64,
    pub sequences: usize,
    pub train: usize,
    pub test: usize,
    pub frames: usize,
    pub detectors: usize,
}

impl fmt::Display for GenerateSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "generated {} (seed {}): {} sequences ({} train, {} test), {} frames, {} detectors",
            self.scenario, self.seed, self.sequences, self.train, self.test, self.frames, self.detectors
        )
    }
}

/// Generated datasets also carry `generation.json` recording scenario and seed.
pub const GENERATION_FILE: &str = "generation.json";

pub fn cmd_generate(args: &GenerateArgs) -> Result<GenerateSummary> {
    let cfg = ScenarioConfig::load(&args.scenario)?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let (dataset, _) = generate_dataset(&cfg, seed)?;
    std::fs::create_dir_all(&args.out).map_err(io_err(format!("creating {}", args.out.display())))?;
    dataset.save(&args.out)?;
    #[derive(Serialize)]
    struct Generation<'a> {
        seed: u64,
        scenario: &'a ScenarioConfig,
    }
    let mut text = serde_json::to_string_pretty(&Generation { seed, scenario: &cfg }).expect("serializes");
    text.push('\n');
    let path = args.out.join(GENERATION_FILE);
    std::fs::write(&path, text).map_err(io_err(format!("writing {}", path.display())))?;

    // read back through the validating loader
    let back = Dataset::load(&args.out)?;
    Ok(GenerateSummary {
        scenario: cfg.name.clone(),
        seed,
        sequences: back.sequences.len(),
        train: back.split(Split::Train).len(),
        test: back.split(Split::Test).len(),
        frames: back.frame_count(),
        detectors: back.detectors.len(),
    })
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub episodes: u64,
    pub last: Option<agent::LogRow>,
}

impl fmt::Display for TrainSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "trained {} episodes; checkpoint {}, log {}",
            self.episodes,
            self.checkpoint.display(),
            self.log.display()
        )?;
        if let Some(r) = self.last.as_ref().and_then(|r| r.mean_return_last_100) {
            write!(f, "; mean return (last 100 episodes) {r:.4}")?;
        }
        writeln!(f)
    }
}

/// Train on the dataset's training split and package the result.
pub fn train_agent(
    dataset: &Dataset,
    config: &TrainConfig,
    iou: IouThresholdSpec,
    portfolio: &[String],
) -> Result<(Checkpoint, TrainLog, u64)> {
    let env_cfg = EnvConfig::for_portfolio(dataset, portfolio, iou, Split::Train)?;
    let detectors = env_cfg.detector_ids();
    let env = Env::new(dataset, env_cfg)?;
    let sequences = dataset.split(Split::Train);
    let outcome = agent::train(&env, &sequences, config)?;
    let ckpt = Checkpoint::from_outcome(&outcome, detectors, iou, config);
    Ok((ckpt, outcome.log, outcome.episodes))
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary> {
    let mut config = TrainConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let dataset = Dataset::load(&args.dataset)?;
    let (ckpt, log, episodes) = train_agent(&dataset, &config, args.iou, &args.portfolio)?;
    ckpt.save(&args.checkpoint)?;
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| args.checkpoint.with_extension("log.csv"));
    std::fs::write(&log_path, log.to_csv()).map_err(io_err(format!("writing {}", log_path.display())))?;
    Ok(TrainSummary {
        checkpoint: args.checkpoint.clone(),
        log: log_path,
        episodes,
        last: log.rows.last().cloned(),
    })
}

/// Non-learned policies selectable with `--baseline`.
#[derive(Debug, Clone, PartialEq)]
pub enum Baseline {
    Fixed(String),
    Random,
    Alternating,
    Lighting {
        pair: Option<(String, String)>,
        threshold: Option<f64>,
    },
}

impl FromStr for Baseline {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || CliError::Usage(format!("unknown baseline `{s}`"));
        if let Some(id) = s.strip_prefix("fixed:") {
            return if id.is_empty() {
                Err(bad())
            } else {
                Ok(Baseline::Fixed(id.into()))
            };
        }
        match s {
            "random" => return Ok(Baseline::Random),
            "alternating" => return Ok(Baseline::Alternating),
            "lighting" => {
                return Ok(Baseline::Lighting {
                    pair: None,
                    threshold: None,
                })
            }
            _ => {}
        }
        let rest = s.strip_prefix("lighting:").ok_or_else(bad)?;
        let (pair, threshold) = match rest.split_once('@') {
            Some((p, t)) => {
                let t: f64 = t
                    .parse()
                    .map_err(|_| CliError::Usage(format!("bad threshold in `{s}`")))?;
                (p, Some(t))
            }
            None => (rest, None),
        };
        let (dark, bright) = pair.split_once(',').ok_or_else(bad)?;
        if dark.is_empty() || bright.is_empty() {
            return Err(bad());
        }
        Ok(Baseline::Lighting {
            pair: Some((dark.into(), bright.into())),
            threshold,
        })
    }
}

/// What `eval` scores.
#[derive(Debug, Clone)]
pub enum EvalTarget {
    Checkpoint(Box<Checkpoint>),
    Baseline(Baseline),
}

/// Per-episode evaluation in parallel; results keep episode order.
pub fn evaluate_episodes(
    env: &Env<'_>,
    policy: &dyn Policy,
    sequences: &[&Sequence],
    specs: &[IouThresholdSpec],
) -> Result<Vec<EpisodeEval>> {
    let policies: Vec<Box<dyn Policy>> = sequences.iter().map(|_| policy.clone_box()).collect();
    Ok(sequences
        .par_iter()
        .zip(policies.into_par_iter())
        .enumerate()
        .map(|(i, (s, p))| evaluate_episode(env, p.as_ref(), s, i as u64, specs))
        .collect::<Result<Vec<_>, Error>>()?)
}

pub fn evaluate_parallel(
    env: &Env<'_>,
    policy: &dyn Policy,
    sequences: &[&Sequence],
    specs: &[IouThresholdSpec],
) -> Result<Evaluation> {
    let episodes = evaluate_episodes(env, policy, sequences, specs)?;
    Ok(combine_episodes(
        policy.name(),
        specs,
        env.config().action_count(),
        &episodes,
    )?)
}

/// Brightness split used to pick the lighting heuristic's detectors.
pub const LIGHTING_PAIR_SPLIT: f64 = 127.5;

/// Pick (dark, bright) detectors: the fixed policy with the best mean AP on
/// frames darker than [`LIGHTING_PAIR_SPLIT`], and the best on brighter frames.
pub fn fit_lighting_pair(env: &Env<'_>, sequences: &[&Sequence], spec: IouThresholdSpec) -> Result<(String, String)> {
    let mut best_dark: Option<(f64, String)> = None;
    let mut best_bright: Option<(f64, String)> = None;
    for id in env.config().detector_ids() {
        let policy = fixed_policy(env.config(), &id)?;
        let episodes = evaluate_episodes(env, &policy, sequences, &[spec])?;
        let (mut dark, mut bright) = ((0.0, 0usize), (0.0, 0usize));
        for (s, e) in sequences.iter().zip(&episodes) {
            for (frame, ap) in s.frames.iter().zip(&e.per_frame[0]) {
                let level = frame.observation.mean_intensity().unwrap_or(0.0);
                let slot = if level < LIGHTING_PAIR_SPLIT {
                    &mut dark
                } else {
                    &mut bright
                };
                slot.0 += ap;
                slot.1 += 1;
            }
        }
        for (slot, best) in [(dark, &mut best_dark), (bright, &mut best_bright)] {
            let score = if slot.1 == 0 { 0.0 } else { slot.0 / slot.1 as f64 };
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                *best = Some((score, id.clone()));
            }
        }
    }
    match (best_dark, best_bright) {
        (Some((_, d)), Some((_, b))) => Ok((d, b)),
        _ => Err(CliError::Usage("no detectors to fit the lighting heuristic".into())),
    }
}

fn portfolio_label(ids: &[String]) -> String {
    ids.join("+")
}

/// Score a checkpoint or baseline on the test split.
pub fn evaluate(
    dataset: &Dataset,
    target: &EvalTarget,
    iou: Option<IouThresholdSpec>,
    sweep: bool,
    portfolio: &[String],
    seed: u64,
) -> Result<EvalReport> {
    let specs = IouThresholdSpec::report_columns();
    let test = dataset.split(Split::Test);
    if test.is_empty() {
        return Err(CliError::Usage("dataset has no test sequences".into()));
    }
    let (portfolio, iou) = match target {
        EvalTarget::Checkpoint(c) => {
            if !portfolio.is_empty() && portfolio != c.detectors.as_slice() {
                return Err(CliError::Usage(format!(
                    "--portfolio {} differs from the checkpoint's {}",
                    portfolio.join(","),
                    c.detectors.join(",")
                )));
            }
            (c.detectors.clone(), iou.unwrap_or(c.iou))
        }
        EvalTarget::Baseline(_) => (portfolio.to_vec(), iou.unwrap_or(IouThresholdSpec::Single(0.5))),
    };
    let env_cfg = EnvConfig::for_portfolio(dataset, &portfolio, iou, Split::Test)?;
    let label = portfolio_label(&env_cfg.detector_ids());
    let env = Env::new(dataset, env_cfg)?;
    let selection = specs.iter().position(|s| *s == iou).unwrap_or(1);

    let mut evaluations: Vec<Evaluation> = Vec::new();
    let mut invocation = format!("eval --iou {iou}");
    match target {
        EvalTarget::Checkpoint(c) => {
            invocation.push_str(" --checkpoint <file>");
            let policy = c.policy(dataset)?;
            evaluations.push(evaluate_parallel(&env, &policy, &test, &specs)?);
        }
        EvalTarget::Baseline(b) => {
            let cfg = env.config();
            match b {
                Baseline::Fixed(id) => {
                    invocation.push_str(&format!(" --baseline fixed:{id}"));
                    evaluations.push(evaluate_parallel(&env, &fixed_policy(cfg, id)?, &test, &specs)?);
                }
                Baseline::Random => {
                    invocation.push_str(&format!(" --baseline random --seed {seed}"));
                    evaluations.push(evaluate_parallel(&env, &random_policy(cfg, seed, &[])?, &test, &specs)?);
                }
                Baseline::Alternating => {
                    invocation.push_str(" --baseline alternating");
                    let order = cfg.detector_ids();
                    evaluations.push(evaluate_parallel(
                        &env,
                        &alternating_policy(cfg, &order)?,
                        &test,
                        &specs,
                    )?);
                }
                Baseline::Lighting { pair, threshold } => {
                    let (dark, bright) = match pair {
                        Some(p) => p.clone(),
                        None => fit_lighting_pair(&env, &test, specs[selection])?,
                    };
                    invocation.push_str(&format!(" --baseline lighting:{dark},{bright}"));
                    if let Some(t) = threshold {
                        invocation.push_str(&format!("@{t}"));
                        let policy = lighting_heuristic(cfg, *t, &dark, &bright)?;
                        evaluations.push(evaluate_parallel(&env, &policy, &test, &specs)?);
                    } else {
                        let result = sweep_lighting_thresholds_with(&env, &dark, &bright, &specs, selection, &|p| {
                            evaluate_parallel(&env, p, &test, &specs).map_err(|e| match e {
                                CliError::Core(e) => e,
                                other => Error::InvalidInput(other.to_string()),
                            })
                        })?;
                        if sweep {
                            invocation.push_str(" --sweep");
                            evaluations.extend(result.table.iter().map(|r| r.evaluation.clone()));
                        }
                        // each AP column takes its own best threshold; usage
                        // comes from the threshold chosen by the selection spec
                        let mut best = result.best_row().evaluation.clone();
                        best.mean_ap = result.best_per_column();
                        best.policy = format!("lighting:{dark}+{bright}@best");
                        evaluations.push(best);
                    }
                }
            }
        }
    }
    if !label.is_empty() {
        invocation.push_str(&format!(" --portfolio {}", label.replace('+', ",")));
    }

    let all_ids: Vec<String> = dataset.detectors.iter().map(|d| d.detector_id.clone()).collect();
    let env_ids = env.config().detector_ids();
    let rows = evaluations
        .into_iter()
        .map(|e| ReportRow::from_evaluation(&e, &label, &env_ids, &all_ids))
        .collect();
    Ok(EvalReport {
        invocation: format!("buffet {invocation}"),
        detectors: all_ids,
        rows,
    })
}

pub fn cmd_eval(args: &EvalArgs) -> Result<String> {
    let dataset = Dataset::load(&args.dataset)?;
    let target = match (&args.checkpoint, &args.baseline) {
        (Some(path), None) => EvalTarget::Checkpoint(Box::new(Checkpoint::load(path)?)),
        (None, Some(b)) => EvalTarget::Baseline(b.parse()?),
        _ => return Err(CliError::Usage("give exactly one of --checkpoint or --baseline".into())),
    };
    if args.sweep && !matches!(target, EvalTarget::Baseline(Baseline::Lighting { threshold: None, .. })) {
        return Err(CliError::Usage(
            "--sweep needs the lighting baseline without a fixed threshold".into(),
        ));
    }
    let report = evaluate(&dataset, &target, args.iou, args.sweep, &args.portfolio, args.seed)?;
    let csv = report.to_csv()?;
    match &args.out {
        Some(path) => {
            write_file(path, &csv)?;
            Ok(report.to_table())
        }
        None => Ok(csv),
    }
}

pub fn cmd_report(args: &ReportArgs) -> Result<String> {
    let reports = args
        .inputs
        .iter()
        .map(|p| EvalReport::load(p))
        .collect::<Result<Vec<_>>>()?;
    let table = merge_reports(&reports, &args.portfolio)?;
    if let Some(path) = &args.out {
        write_file(path, &table.to_csv()?)?;
    }
    Ok(table.to_table())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(format!("writing {}", path.display())))
}
