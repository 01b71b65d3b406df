//! The latency-aware detector selection process.
//!
//! At decision frame `t` the agent picks a detector with latency `k`. The
//! chosen detector's prediction is credited to frame `t`; the `k` frames that
//! arrive while it runs are scored with the prediction held from the previous
//! decision, reused unchanged. The next decision happens at `t + k + 1`.
//! Episodes are sequences; trailing blocked frames past the end are dropped.

use serde::{Deserialize, Serialize};

use crate::datastore::{select_variant, Dataset, DetectorSpec, EntryKey, ObservationPayload, Sequence, Split, Variant};
use crate::metrics::{ap_image, DetectionSet, IouThresholdSpec};
use crate::{Error, Result};

/// Which frame the chosen detector's output is credited to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CreditMode {
    /// The query frame itself, as in the reward definition.
    #[default]
    QueryFrame,
    /// Only when the output physically exists: a detector with `k > 0` leaves
    /// all `k + 1` frames of its step to the held prediction.
    Arrival,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    /// Action `i` selects `detectors[i]`.
    pub detectors: Vec<DetectorSpec>,
    pub iou: IouThresholdSpec,
    pub split: Split,
    /// Score frames without ground truth as 1 when nothing is predicted, 0
    /// otherwise. When off such frames contribute 0.
    pub reward_empty_frame_rule: bool,
    pub credit_mode: CreditMode,
}

impl EnvConfig {
    pub fn new(detectors: Vec<DetectorSpec>, iou: IouThresholdSpec, split: Split) -> Result<Self> {
        if detectors.is_empty() {
            return Err(Error::validation("env.detectors", "at least one detector required"));
        }
        Ok(EnvConfig {
            detectors,
            iou,
            split,
            reward_empty_frame_rule: true,
            credit_mode: CreditMode::QueryFrame,
        })
    }

    /// Config over a subset of the dataset's detectors, in the given order.
    /// An empty `portfolio` selects all detectors in dataset order.
    pub fn for_portfolio(dataset: &Dataset, portfolio: &[String], iou: IouThresholdSpec, split: Split) -> Result<Self> {
        let detectors = if portfolio.is_empty() {
            dataset.detectors.clone()
        } else {
            portfolio
                .iter()
                .map(|id| {
                    dataset.detector(id).cloned().ok_or_else(|| Error::Unknown {
                        kind: "detector",
                        name: id.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?
        };
        EnvConfig::new(detectors, iou, split)
    }

    pub fn action_count(&self) -> usize {
        self.detectors.len()
    }

    pub fn action_of(&self, detector_id: &str) -> Result<usize> {
        self.detectors
            .iter()
            .position(|d| d.detector_id == detector_id)
            .ok_or_else(|| Error::Unknown {
                kind: "detector",
                name: detector_id.to_string(),
            })
    }

    pub fn detector_ids(&self) -> Vec<String> {
        self.detectors.iter().map(|d| d.detector_id.clone()).collect()
    }
}

/// A prediction available for reuse: produced by `action` for `source_frame`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Held {
    pub action: usize,
    pub source_frame: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub sequence_id: String,
    /// Index of the sequence in the dataset.
    pub sequence: usize,
    /// Current decision frame.
    pub cursor: usize,
    /// `None` at episode start.
    pub held: Option<Held>,
    pub observation: ObservationPayload,
    pub variant: Variant,
}

/// The AP credited to one frame and where its prediction came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameCredit {
    pub frame: usize,
    /// `None` means the empty prediction.
    pub source: Option<Held>,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub reward: f64,
    /// `None` when the episode is over.
    pub next: Option<EnvState>,
    pub frames_consumed: usize,
    pub breakdown: Vec<FrameCredit>,
}

/// Action selection for rollouts.
pub trait Policy: Send {
    fn name(&self) -> String;

    /// Called before each episode. `episode` is the episode's position in the
    /// evaluation order, which stochastic policies use to derive their stream.
    fn begin_episode(&mut self, _episode: u64) {}

    fn act(&mut self, state: &EnvState) -> usize;

    fn clone_box(&self) -> Box<dyn Policy>;
}

/// Full record of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub total: f64,
    /// One entry per frame, in frame order.
    pub per_frame: Vec<f64>,
    /// Prediction source used for each frame.
    pub sources: Vec<Option<Held>>,
    /// `(decision frame, action)` in order.
    pub decisions: Vec<(usize, usize)>,
}

/// Scale for exact accumulation of AP values.
const EXACT_SCALE: f64 = (1u128 << 80) as f64;

fn to_fixed(x: f64) -> i128 {
    (x * EXACT_SCALE).round() as i128
}

fn from_fixed(v: i128) -> f64 {
    v as f64 / EXACT_SCALE
}

/// Sum of scores in [0, 1] that does not depend on summation order.
///
/// Per-frame AP values are multiples of 2^-80 in practice, so accumulating
/// them in 80-bit fixed point is exact and the result is rounded only once.
/// This lets the DP oracle and brute-force enumeration agree bit for bit.
pub fn exact_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    from_fixed(values.into_iter().map(to_fixed).sum())
}

pub struct Env<'a> {
    dataset: &'a Dataset,
    config: EnvConfig,
    handles: Vec<u16>,
}

impl<'a> Env<'a> {
    pub fn new(dataset: &'a Dataset, config: EnvConfig) -> Result<Self> {
        let handles = config
            .detectors
            .iter()
            .map(|d| {
                dataset
                    .store
                    .detector_handle(&d.detector_id)
                    .ok_or_else(|| Error::Unknown {
                        kind: "detector",
                        name: d.detector_id.clone(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Env {
            dataset,
            config,
            handles,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.dataset
    }

    pub fn latency(&self, action: usize) -> usize {
        self.config.detectors[action].latency_frames
    }

    pub fn reset(&self, sequence: &Sequence) -> Result<EnvState> {
        if sequence.is_empty() {
            return Err(Error::InvalidInput(format!("sequence `{}` has no frames", sequence.id)));
        }
        let index = self
            .dataset
            .sequence_index(&sequence.id)
            .ok_or_else(|| Error::Unknown {
                kind: "sequence",
                name: sequence.id.clone(),
            })?;
        let variant = select_variant(&self.dataset.folds, &sequence.id, self.config.split)?;
        Ok(EnvState {
            sequence_id: sequence.id.clone(),
            sequence: index,
            cursor: 0,
            held: None,
            observation: self.dataset.sequences[index].frames[0].observation.clone(),
            variant,
        })
    }

    /// Frames covered by choosing `action` at `cursor`, with their prediction
    /// sources. Truncated at the end of the sequence.
    fn credit_plan(&self, len: usize, cursor: usize, action: usize, held: Option<Held>) -> Vec<(usize, Option<Held>)> {
        let k = self.latency(action);
        let fresh = Some(Held {
            action,
            source_frame: cursor,
        });
        let end = (cursor + k + 1).min(len);
        (cursor..end)
            .map(|frame| {
                let source = match self.config.credit_mode {
                    CreditMode::QueryFrame if frame == cursor => fresh,
                    CreditMode::Arrival if k == 0 => fresh,
                    _ => held,
                };
                (frame, source)
            })
            .collect()
    }

    fn predictions(&self, sequence: usize, source: Option<Held>, variant: Variant) -> Result<&'a DetectionSet> {
        static EMPTY: DetectionSet = DetectionSet(Vec::new());
        match source {
            None => Ok(&EMPTY),
            Some(h) => self.dataset.store.get_key(EntryKey {
                sequence: self.store_handle(sequence)?,
                frame: h.source_frame as u32,
                detector: self.handles[h.action],
                variant,
            }),
        }
    }

    fn store_handle(&self, sequence: usize) -> Result<u32> {
        let id = &self.dataset.sequences[sequence].id;
        self.dataset.store.sequence_handle(id).ok_or_else(|| Error::Unknown {
            kind: "sequence",
            name: id.clone(),
        })
    }

    /// AP of `source`'s prediction against the ground truth of `frame`.
    pub fn frame_ap(
        &self,
        sequence: usize,
        variant: Variant,
        frame: usize,
        source: Option<Held>,
        spec: IouThresholdSpec,
    ) -> Result<f64> {
        let gts = &self.dataset.sequences[sequence].frames[frame].ground_truth;
        if gts.is_empty() && !self.config.reward_empty_frame_rule {
            return Ok(0.0);
        }
        let preds = self.predictions(sequence, source, variant)?;
        Ok(ap_image(preds, gts, spec))
    }

    pub fn step(&self, state: &EnvState, action: usize) -> Result<StepResult> {
        let seq = &self.dataset.sequences[state.sequence];
        let len = seq.len();
        if state.cursor >= len {
            return Err(Error::Terminal);
        }
        if action >= self.config.action_count() {
            return Err(Error::InvalidInput(format!(
                "action {action} outside [0, {})",
                self.config.action_count()
            )));
        }
        let breakdown = self
            .credit_plan(len, state.cursor, action, state.held)
            .into_iter()
            .map(|(frame, source)| {
                let ap = self.frame_ap(state.sequence, state.variant, frame, source, self.config.iou)?;
                Ok(FrameCredit { frame, source, ap })
            })
            .collect::<Result<Vec<_>>>()?;
        let reward = breakdown.iter().map(|c| c.ap).sum();
        let next_cursor = state.cursor + self.latency(action) + 1;
        let next = (next_cursor < len).then(|| EnvState {
            sequence_id: state.sequence_id.clone(),
            sequence: state.sequence,
            cursor: next_cursor,
            held: Some(Held {
                action,
                source_frame: state.cursor,
            }),
            observation: seq.frames[next_cursor].observation.clone(),
            variant: state.variant,
        });
        Ok(StepResult {
            reward,
            next,
            frames_consumed: breakdown.len(),
            breakdown,
        })
    }

    /// Run `policy` over `sequence` until the end.
    pub fn run_episode(&self, policy: &mut dyn Policy, sequence: &Sequence) -> Result<EpisodeOutcome> {
        let mut state = self.reset(sequence)?;
        let mut per_frame = Vec::with_capacity(sequence.len());
        let mut sources = Vec::with_capacity(sequence.len());
        let mut decisions = Vec::new();
        loop {
            let action = policy.act(&state);
            decisions.push((state.cursor, action));
            let step = self.step(&state, action)?;
            for c in &step.breakdown {
                per_frame.push(c.ap);
                sources.push(c.source);
            }
            match step.next {
                Some(next) => state = next,
                None => break,
            }
        }
        Ok(EpisodeOutcome {
            total: exact_sum(per_frame.iter().copied()),
            per_frame,
            sources,
            decisions,
        })
    }

    /// Per-frame AP of an already recorded episode under another threshold spec.
    pub fn rescore(&self, sequence: &Sequence, sources: &[Option<Held>], spec: IouThresholdSpec) -> Result<Vec<f64>> {
        let state = self.reset(sequence)?;
        sources
            .iter()
            .enumerate()
            .map(|(frame, &source)| self.frame_ap(state.sequence, state.variant, frame, source, spec))
            .collect()
    }

    /// Exact maximum episode return over all action sequences.
    pub fn optimal_return_dp(&self, sequence: &Sequence) -> Result<f64> {
        Ok(self.optimal_plan(sequence)?.0)
    }

    /// Maximum return and one action sequence achieving it. Ties prefer the
    /// lower action index.
    ///
    /// States are `(cursor, held)`. A held prediction at cursor `c` can only
    /// come from detector `d` queried at `c - k_d - 1`, so there are at most
    /// `|A| + 1` states per cursor.
    pub fn optimal_plan(&self, sequence: &Sequence) -> Result<(f64, Vec<usize>)> {
        let start = self.reset(sequence)?;
        let len = sequence.len();
        let n_actions = self.config.action_count();

        let held_options = |c: usize| -> Vec<Option<Held>> {
            if c == 0 {
                return vec![None];
            }
            (0..n_actions)
                .filter_map(|a| {
                    let k = self.latency(a);
                    (c > k).then(|| {
                        Some(Held {
                            action: a,
                            source_frame: c - k - 1,
                        })
                    })
                })
                .collect()
        };

        // value[c][j]: best fixed-point return from cursor c with held option j,
        // along with the argmax action.
        let mut value: Vec<Vec<(Option<Held>, i128, usize)>> = vec![Vec::new(); len];
        for c in (0..len).rev() {
            let mut row = Vec::new();
            for held in held_options(c) {
                let mut best: Option<(i128, usize)> = None;
                for a in 0..n_actions {
                    let mut v: i128 = 0;
                    for (frame, source) in self.credit_plan(len, c, a, held) {
                        v += to_fixed(self.frame_ap(start.sequence, start.variant, frame, source, self.config.iou)?);
                    }
                    let next = c + self.latency(a) + 1;
                    if next < len {
                        let next_held = Some(Held {
                            action: a,
                            source_frame: c,
                        });
                        v += value[next]
                            .iter()
                            .find(|(h, _, _)| *h == next_held)
                            .map(|&(_, v, _)| v)
                            .expect("successor state evaluated");
                    }
                    if best.is_none_or(|(bv, _)| v > bv) {
                        best = Some((v, a));
                    }
                }
                let (v, a) = best.expect("at least one action");
                row.push((held, v, a));
            }
            value[c] = row;
        }

        let mut plan = Vec::new();
        let (mut c, mut held) = (0usize, None);
        while c < len {
            let &(_, _, a) = value[c]
                .iter()
                .find(|(h, _, _)| *h == held)
                .expect("reachable state evaluated");
            plan.push(a);
            held = Some(Held {
                action: a,
                source_frame: c,
            });
            c += self.latency(a) + 1;
        }
        Ok((from_fixed(value[0][0].1), plan))
    }
}

/// Replays a fixed action list, then repeats its last action.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    actions: Vec<usize>,
    next: usize,
}

impl ScriptedPolicy {
    pub fn new(actions: Vec<usize>) -> Self {
        ScriptedPolicy { actions, next: 0 }
    }
}

impl Policy for ScriptedPolicy {
    fn name(&self) -> String {
        "scripted".into()
    }

    fn begin_episode(&mut self, _episode: u64) {
        self.next = 0;
    }

    fn act(&mut self, _state: &EnvState) -> usize {
        let a = self
            .actions
            .get(self.next)
            .or(self.actions.last())
            .copied()
            .unwrap_or(0);
        self.next += 1;
        a
    }

    fn clone_box(&self) -> Box<dyn Policy> {
        Box::new(self.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{FoldManifest, FrameRecord, PredictionRecord, PredictionStore};
    use crate::metrics::{BoundingBox, Detection};

    fn gt(x: f64) -> BoundingBox {
        BoundingBox::new(x, 0.0, x + 10.0, 10.0, 0).unwrap()
    }

    /// Sequence of `len` frames with one object moving `speed` px per frame.
    /// "perfect" detectors report the exact GT, "blind" ones nothing.
    fn dataset(len: usize, speed: f64, detectors: &[(&str, usize, bool)]) -> Dataset {
        let frames: Vec<FrameRecord> = (0..len)
            .map(|i| FrameRecord {
                sequence_id: "s".into(),
                frame_index: i,
                observation: ObservationPayload::features(vec![i as f64]),
                ground_truth: vec![gt(speed * i as f64)],
            })
            .collect();
        let seqs = vec![Sequence { id: "s".into(), frames }];
        let mut store = PredictionStore::new(&seqs);
        let mut specs = Vec::new();
        for &(id, k, perfect) in detectors {
            specs.push(DetectorSpec {
                detector_id: id.into(),
                modality: "rgb".into(),
                latency_frames: k,
            });
            for i in 0..len {
                let detections = if perfect {
                    DetectionSet(vec![Detection::new(gt(speed * i as f64), 0.9).unwrap()])
                } else {
                    DetectionSet::empty()
                };
                store
                    .insert(PredictionRecord {
                        sequence_id: "s".into(),
                        frame_index: i,
                        detector_id: id.into(),
                        variant: Variant::Fulltrain,
                        detections,
                    })
                    .unwrap();
            }
        }
        let folds = FoldManifest::round_robin(5, &[], &["s".to_string()]);
        Dataset::new(seqs, specs, folds, store).unwrap()
    }

    fn env(ds: &Dataset) -> Env<'_> {
        let cfg = EnvConfig::new(ds.detectors.clone(), IouThresholdSpec::Single(0.5), Split::Test).unwrap();
        Env::new(ds, cfg).unwrap()
    }

    #[test]
    fn reset_starts_empty_at_frame_zero() {
        let ds = dataset(10, 0.0, &[("fast", 0, true), ("slow", 3, true)]);
        let env = env(&ds);
        let s = env.reset(&ds.sequences[0]).unwrap();
        assert_eq!(s.cursor, 0);
        assert_eq!(s.held, None);
        assert_eq!(s.observation, ds.sequences[0].frames[0].observation);
        assert_eq!(s, env.reset(&ds.sequences[0]).unwrap());
    }

    #[test]
    fn perfect_fast_detector_scores_one() {
        let ds = dataset(10, 0.0, &[("fast", 0, true), ("slow", 3, true)]);
        let env = env(&ds);
        let s = env.reset(&ds.sequences[0]).unwrap();
        let r = env.step(&s, 0).unwrap();
        assert_eq!(r.reward, 1.0);
        assert_eq!(r.frames_consumed, 1);
        assert_eq!(
            r.next.unwrap().held,
            Some(Held {
                action: 0,
                source_frame: 0
            })
        );
    }

    #[test]
    fn slow_detector_from_empty_held() {
        let ds = dataset(10, 0.0, &[("fast", 0, true), ("slow", 3, true)]);
        let env = env(&ds);
        let s = env.reset(&ds.sequences[0]).unwrap();
        let r = env.step(&s, 1).unwrap();
        // AP(f0, slow) + three frames scored with the empty held prediction
        assert_eq!(r.reward, 1.0);
        assert_eq!(r.frames_consumed, 4);
        let aps: Vec<f64> = r.breakdown.iter().map(|c| c.ap).collect();
        assert_eq!(aps, vec![1.0, 0.0, 0.0, 0.0]);
        let next = r.next.unwrap();
        assert_eq!(next.cursor, 4);
        // second slow step reuses the frame-0 prediction on a static scene
        let r2 = env.step(&next, 1).unwrap();
        assert_eq!(r2.reward, 4.0);
    }

    #[test]
    fn truncated_at_episode_end() {
        let ds = dataset(10, 0.0, &[("fast", 0, true), ("slow", 3, true)]);
        let env = env(&ds);
        let mut s = env.reset(&ds.sequences[0]).unwrap();
        for _ in 0..8 {
            s = env.step(&s, 0).unwrap().next.unwrap();
        }
        assert_eq!(s.cursor, 8);
        let r = env.step(&s, 1).unwrap();
        assert_eq!(r.frames_consumed, 2);
        assert_eq!(r.breakdown.iter().map(|c| c.frame).collect::<Vec<_>>(), vec![8, 9]);
        assert!(r.next.is_none());
        let terminal = EnvState { cursor: 10, ..s };
        assert!(matches!(env.step(&terminal, 0), Err(Error::Terminal)));
    }

    #[test]
    fn moving_scene_penalizes_held_predictions() {
        let ds = dataset(8, 20.0, &[("fast", 0, true), ("slow", 3, true)]);
        let env = env(&ds);
        let out = env
            .run_episode(&mut ScriptedPolicy::new(vec![1]), &ds.sequences[0])
            .unwrap();
        assert_eq!(out.per_frame, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(out.decisions, vec![(0, 1), (4, 1)]);
        let fast = env
            .run_episode(&mut ScriptedPolicy::new(vec![0]), &ds.sequences[0])
            .unwrap();
        assert_eq!(fast.per_frame, vec![1.0; 8]);
        assert_eq!(fast.total, 8.0);
    }

    #[test]
    fn two_frame_sequence_slow_first_is_one_decision() {
        let ds = dataset(2, 0.0, &[("fast", 0, true), ("slow", 3, true)]);
        let env = env(&ds);
        let out = env
            .run_episode(&mut ScriptedPolicy::new(vec![1]), &ds.sequences[0])
            .unwrap();
        assert_eq!(out.decisions.len(), 1);
        assert_eq!(out.per_frame.len(), 2);
    }

    #[test]
    fn empty_frame_rule_toggle() {
        let mut ds = dataset(3, 0.0, &[("blind", 0, false), ("other", 0, false)]);
        ds.sequences[0].frames[1].ground_truth.clear();
        let mut cfg = EnvConfig::new(ds.detectors.clone(), IouThresholdSpec::Single(0.5), Split::Test).unwrap();
        let on = Env::new(&ds, cfg.clone()).unwrap();
        let out = on
            .run_episode(&mut ScriptedPolicy::new(vec![0]), &ds.sequences[0])
            .unwrap();
        assert_eq!(out.per_frame, vec![0.0, 1.0, 0.0]);
        cfg.reward_empty_frame_rule = false;
        let off = Env::new(&ds, cfg).unwrap();
        let out = off
            .run_episode(&mut ScriptedPolicy::new(vec![0]), &ds.sequences[0])
            .unwrap();
        assert_eq!(out.per_frame, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn arrival_credit_defers_slow_output() {
        let ds = dataset(8, 0.0, &[("fast", 0, true), ("slow", 3, true)]);
        let mut cfg = EnvConfig::new(ds.detectors.clone(), IouThresholdSpec::Single(0.5), Split::Test).unwrap();
        cfg.credit_mode = CreditMode::Arrival;
        let env = Env::new(&ds, cfg).unwrap();
        let out = env
            .run_episode(&mut ScriptedPolicy::new(vec![1]), &ds.sequences[0])
            .unwrap();
        assert_eq!(out.per_frame, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let fast = env
            .run_episode(&mut ScriptedPolicy::new(vec![0]), &ds.sequences[0])
            .unwrap();
        assert_eq!(fast.per_frame, vec![1.0; 8]);
    }

    #[test]
    fn dp_single_detector_equals_fixed_policy() {
        let ds = dataset(9, 5.0, &[("slow", 3, true)]);
        let env = env(&ds);
        let fixed = env
            .run_episode(&mut ScriptedPolicy::new(vec![0]), &ds.sequences[0])
            .unwrap();
        assert_eq!(env.optimal_return_dp(&ds.sequences[0]).unwrap(), fixed.total);
    }

    #[test]
    fn dp_prefers_slow_in_static_scene_after_first_step() {
        // Static scene, fast detector blind: slow is the only source of AP.
        let ds = dataset(9, 0.0, &[("blind", 0, false), ("slow", 3, true)]);
        let env = env(&ds);
        let (v, plan) = env.optimal_plan(&ds.sequences[0]).unwrap();
        let replay = env
            .run_episode(&mut ScriptedPolicy::new(plan.clone()), &ds.sequences[0])
            .unwrap();
        assert_eq!(v, replay.total);
        assert!(plan.iter().all(|&a| a == 1), "{plan:?}");
        assert_eq!(v, 6.0); // f0 + f4..f7 + f8; f1..f3 held empty
    }

    #[test]
    fn exact_sum_is_order_independent() {
        let xs = [0.1, 0.7, 1.0 / 3.0, 0.505, 1.0, 0.2];
        let fwd = exact_sum(xs.iter().copied());
        let rev = exact_sum(xs.iter().rev().copied());
        assert_eq!(fwd, rev);
        assert!((fwd - xs.iter().sum::<f64>()).abs() < 1e-12);
    }
}
