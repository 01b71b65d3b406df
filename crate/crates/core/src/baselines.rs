//! Comparison policies and policy evaluation.
//!
//! Policies resolve detector ids to action indices against an [`EnvConfig`] at
//! construction and keep nothing but a counter or a seeded stream afterwards,
//! so replaying an episode reproduces its action stream.

use rand::Rng;

use crate::datastore::Sequence;
use crate::env::{Env, EnvConfig, EnvState, Policy};
use crate::metrics::{mean_ap_per_frame, IouThresholdSpec};
use crate::rng::{self, ChaCha8Rng};
use crate::{Error, Result};

/// Number of points on the lighting threshold grid.
pub const LIGHTING_GRID_POINTS: usize = 10;

#[derive(Debug, Clone)]
pub struct FixedPolicy {
    action: usize,
    detector_id: String,
}

/// Always pick `detector_id`.
pub fn fixed_policy(config: &EnvConfig, detector_id: &str) -> Result<FixedPolicy> {
    Ok(FixedPolicy {
        action: config.action_of(detector_id)?,
        detector_id: detector_id.to_string(),
    })
}

impl Policy for FixedPolicy {
    fn name(&self) -> String {
        format!("fixed:{}", self.detector_id)
    }

    fn act(&mut self, _state: &EnvState) -> usize {
        self.action
    }

    fn clone_box(&self) -> Box<dyn Policy> {
        Box::new(self.clone())
    }
}

#[derive(Debug, Clone)]
pub struct RandomPolicy {
    actions: Vec<usize>,
    excluded: Vec<String>,
    seed: u64,
    rng: ChaCha8Rng,
}

/// Uniform choice among the detectors not in `excluded`. The stream of each
/// episode is derived from `seed` and the episode number.
pub fn random_policy(config: &EnvConfig, seed: u64, excluded: &[String]) -> Result<RandomPolicy> {
    for id in excluded {
        config.action_of(id)?;
    }
    let actions: Vec<usize> = config
        .detectors
        .iter()
        .enumerate()
        .filter(|(_, d)| !excluded.contains(&d.detector_id))
        .map(|(i, _)| i)
        .collect();
    if actions.is_empty() {
        return Err(Error::InvalidInput("random policy excludes every detector".into()));
    }
    Ok(RandomPolicy {
        actions,
        excluded: excluded.to_vec(),
        seed,
        rng: rng::stream(seed, "random-policy", 0),
    })
}

impl Policy for RandomPolicy {
    fn name(&self) -> String {
        if self.excluded.is_empty() {
            "random".into()
        } else {
            format!("random-without:{}", self.excluded.join("+"))
        }
    }

    fn begin_episode(&mut self, episode: u64) {
        self.rng = rng::stream(self.seed, "random-policy", episode);
    }

    fn act(&mut self, _state: &EnvState) -> usize {
        self.actions[self.rng.random_range(0..self.actions.len())]
    }

    fn clone_box(&self) -> Box<dyn Policy> {
        Box::new(self.clone())
    }
}

#[derive(Debug, Clone)]
pub struct AlternatingPolicy {
    order: Vec<usize>,
    ids: Vec<String>,
    decisions: usize,
}

/// Cycle through `order` one decision at a time, restarting every episode.
pub fn alternating_policy(config: &EnvConfig, order: &[String]) -> Result<AlternatingPolicy> {
    if order.is_empty() {
        return Err(Error::InvalidInput("alternating order is empty".into()));
    }
    Ok(AlternatingPolicy {
        order: order.iter().map(|id| config.action_of(id)).collect::<Result<_>>()?,
        ids: order.to_vec(),
        decisions: 0,
    })
}

impl Policy for AlternatingPolicy {
    fn name(&self) -> String {
        format!("alternating:{}", self.ids.join("+"))
    }

    fn begin_episode(&mut self, _episode: u64) {
        self.decisions = 0;
    }

    fn act(&mut self, _state: &EnvState) -> usize {
        let a = self.order[self.decisions % self.order.len()];
        self.decisions += 1;
        a
    }

    fn clone_box(&self) -> Box<dyn Policy> {
        Box::new(self.clone())
    }
}

#[derive(Debug, Clone)]
pub struct LightingHeuristic {
    threshold: f64,
    dark: usize,
    bright: usize,
    dark_id: String,
    bright_id: String,
}

/// Pick `dark_id` when the frame's mean intensity (0..=255) is below
/// `threshold`, `bright_id` otherwise.
pub fn lighting_heuristic(
    config: &EnvConfig,
    threshold: f64,
    dark_id: &str,
    bright_id: &str,
) -> Result<LightingHeuristic> {
    if !(0.0..=255.0).contains(&threshold) {
        return Err(Error::InvalidInput(format!(
            "lighting threshold {threshold} outside [0, 255]"
        )));
    }
    Ok(LightingHeuristic {
        threshold,
        dark: config.action_of(dark_id)?,
        bright: config.action_of(bright_id)?,
        dark_id: dark_id.to_string(),
        bright_id: bright_id.to_string(),
    })
}

impl LightingHeuristic {
    pub fn threshold(&self) -> f64 {
        self.threshold
    }
}

impl Policy for LightingHeuristic {
    fn name(&self) -> String {
        format!("lighting:{}+{}@{:.2}", self.dark_id, self.bright_id, self.threshold)
    }

    fn act(&mut self, state: &EnvState) -> usize {
        match state.observation.mean_intensity() {
            Some(m) if m < self.threshold => self.dark,
            _ => self.bright,
        }
    }

    fn clone_box(&self) -> Box<dyn Policy> {
        Box::new(self.clone())
    }
}

/// Ten evenly spaced thresholds from 0 to 255 inclusive.
pub fn lighting_threshold_grid() -> Vec<f64> {
    (0..LIGHTING_GRID_POINTS)
        .map(|i| 255.0 * i as f64 / (LIGHTING_GRID_POINTS - 1) as f64)
        .collect()
}

/// Per-episode scores under several threshold specs plus decision counts.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeEval {
    /// `per_frame[s]` holds the per-frame AP under `specs[s]`.
    pub per_frame: Vec<Vec<f64>>,
    pub usage: Vec<usize>,
    /// Episode return under the env's own reward spec.
    pub total: f64,
}

pub fn evaluate_episode(
    env: &Env<'_>,
    policy: &dyn Policy,
    sequence: &Sequence,
    episode: u64,
    specs: &[IouThresholdSpec],
) -> Result<EpisodeEval> {
    let mut p = policy.clone_box();
    p.begin_episode(episode);
    let out = env.run_episode(p.as_mut(), sequence)?;
    let mut usage = vec![0usize; env.config().action_count()];
    for &(_, a) in &out.decisions {
        usage[a] += 1;
    }
    let per_frame = specs
        .iter()
        .map(|&spec| {
            if spec == env.config().iou {
                Ok(out.per_frame.clone())
            } else {
                env.rescore(sequence, &out.sources, spec)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EpisodeEval {
        per_frame,
        usage,
        total: out.total,
    })
}

/// Mean per-frame AP of a policy over a set of sequences, pooled over frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub policy: String,
    pub specs: Vec<IouThresholdSpec>,
    pub mean_ap: Vec<f64>,
    /// Decision counts per action.
    pub usage: Vec<usize>,
    pub decisions: usize,
    pub frames: usize,
    /// Sum of episode returns under the env's reward spec.
    pub total_return: f64,
}

/// Fold per-episode results (in episode order) into one evaluation.
pub fn combine_episodes(
    policy: String,
    specs: &[IouThresholdSpec],
    actions: usize,
    episodes: &[EpisodeEval],
) -> Result<Evaluation> {
    let mut usage = vec![0usize; actions];
    for e in episodes {
        for (u, c) in usage.iter_mut().zip(&e.usage) {
            *u += c;
        }
    }
    let mean_ap = (0..specs.len())
        .map(|s| {
            let all: Vec<f64> = episodes.iter().flat_map(|e| e.per_frame[s].iter().copied()).collect();
            mean_ap_per_frame(&all)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation {
        policy,
        specs: specs.to_vec(),
        mean_ap,
        decisions: usage.iter().sum(),
        usage,
        frames: episodes.iter().map(|e| e.per_frame.first().map_or(0, Vec::len)).sum(),
        total_return: episodes.iter().map(|e| e.total).sum(),
    })
}

/// Sequential evaluation; episode `i` is `sequences[i]`.
pub fn evaluate_policy(
    env: &Env<'_>,
    policy: &dyn Policy,
    sequences: &[&Sequence],
    specs: &[IouThresholdSpec],
) -> Result<Evaluation> {
    let episodes = sequences
        .iter()
        .enumerate()
        .map(|(i, s)| evaluate_episode(env, policy, s, i as u64, specs))
        .collect::<Result<Vec<_>>>()?;
    combine_episodes(policy.name(), specs, env.config().action_count(), &episodes)
}

/// Selection percentages per action, over decisions.
pub fn usage_report(evaluation: &Evaluation) -> Vec<f64> {
    let n = evaluation.decisions.max(1) as f64;
    evaluation.usage.iter().map(|&c| 100.0 * c as f64 / n).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub threshold: f64,
    pub evaluation: Evaluation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    /// Index into `specs` the best threshold was chosen by.
    pub selection_spec: usize,
    pub best_threshold: f64,
    pub best_score: f64,
    pub table: Vec<SweepRow>,
}

impl SweepResult {
    /// Best score in each spec column, each fitted separately.
    pub fn best_per_column(&self) -> Vec<f64> {
        let cols = self.table.first().map_or(0, |r| r.evaluation.mean_ap.len());
        (0..cols)
            .map(|c| {
                self.table
                    .iter()
                    .map(|r| r.evaluation.mean_ap[c])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    }

    pub fn best_row(&self) -> &SweepRow {
        self.table
            .iter()
            .find(|r| r.threshold == self.best_threshold)
            .expect("best threshold is on the grid")
    }
}

/// Evaluate the lighting heuristic on the whole threshold grid and keep the
/// best by `specs[selection_spec]`. Ties go to the lower threshold.
///
/// The threshold is fitted on the very sequences it is scored on, so the
/// result is an oracle for what lighting alone can buy.
pub fn sweep_lighting_thresholds(
    env: &Env<'_>,
    sequences: &[&Sequence],
    dark_id: &str,
    bright_id: &str,
    specs: &[IouThresholdSpec],
    selection_spec: usize,
) -> Result<SweepResult> {
    sweep_lighting_thresholds_with(env, dark_id, bright_id, specs, selection_spec, &|policy| {
        evaluate_policy(env, policy, sequences, specs)
    })
}

/// [`sweep_lighting_thresholds`] with a caller-supplied evaluator, e.g. a
/// parallel one.
pub fn sweep_lighting_thresholds_with(
    env: &Env<'_>,
    dark_id: &str,
    bright_id: &str,
    specs: &[IouThresholdSpec],
    selection_spec: usize,
    evaluate: &dyn Fn(&dyn Policy) -> Result<Evaluation>,
) -> Result<SweepResult> {
    if selection_spec >= specs.len() {
        return Err(Error::InvalidInput("selection spec out of range".into()));
    }
    let mut table = Vec::with_capacity(LIGHTING_GRID_POINTS);
    let mut best: Option<(f64, f64)> = None;
    for threshold in lighting_threshold_grid() {
        let policy = lighting_heuristic(env.config(), threshold, dark_id, bright_id)?;
        let evaluation = evaluate(&policy)?;
        let score = evaluation.mean_ap[selection_spec];
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((threshold, score));
        }
        table.push(SweepRow { threshold, evaluation });
    }
    let (best_threshold, best_score) = best.expect("grid is non-empty");
    Ok(SweepResult {
        selection_spec,
        best_threshold,
        best_score,
        table,
    })
}
