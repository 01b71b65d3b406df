//! Seeded synthetic datasets.
//!
//! A world is a set of sequences split into fixed-length segments. Each
//! segment is either day or night (brightness level) and either static (no
//! object motion, no churn) or dynamic (objects move, spawn and despawn).
//! Simulated detectors miss, jitter and hallucinate boxes at rates that depend
//! on brightness; slow detectors therefore only pay off where held
//! predictions stay valid, i.e. in static segments.
//!
//! Everything is a pure function of the config and the seed. Sub-streams are
//! derived per sequence and per (detector, variant, sequence).

use std::path::Path;

use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datastore::{
    assemble_sequences, Dataset, DetectorSpec, FoldManifest, FrameRecord, ObservationPayload, PredictionRecord,
    PredictionStore, Sequence, Variant, IMAGE_SIDE,
};
use crate::metrics::{BoundingBox, Detection, DetectionSet};
use crate::rng::{self, ChaCha8Rng};
use crate::{Error, Result};

pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub version: u32,
    pub name: String,
    pub seed: u64,
    pub sequences: SequenceLayout,
    pub world: WorldConfig,
    pub regime: RegimeConfig,
    pub observation: ObservationConfig,
    pub detectors: Vec<DetectorModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceLayout {
    pub train: usize,
    pub test: usize,
    pub frames_per_sequence: usize,
    pub folds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub width: f64,
    pub height: f64,
    pub box_size_min: f64,
    pub box_size_max: f64,
    pub classes: u32,
    pub objects_min: usize,
    pub objects_max: usize,
    pub max_objects: usize,
    /// Per-frame probability of a new object in dynamic segments.
    pub spawn_rate: f64,
    /// Per-object, per-frame probability of leaving in dynamic segments.
    pub despawn_rate: f64,
    /// Uniform positional perturbation (pixels) per frame in dynamic segments.
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeConfig {
    pub segment_length: usize,
    pub day_probability: f64,
    pub static_probability: f64,
    pub day_brightness: f64,
    pub night_brightness: f64,
    /// Frames at the start of a segment over which brightness ramps linearly
    /// from the previous segment's level.
    pub transition_frames: usize,
    /// Object speed range (pixels/frame) in dynamic segments.
    pub speed_min: f64,
    pub speed_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationConfig {
    /// Std-dev of Gaussian noise on the object count.
    pub count_noise: f64,
    /// Std-dev of Gaussian noise on the normalized motion magnitude.
    pub motion_noise: f64,
    pub render_image: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeRates {
    pub day: f64,
    pub night: f64,
}

/// Beta-distributed confidences for true and false detections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfidenceModel {
    pub tp_alpha: f64,
    pub tp_beta: f64,
    pub fp_alpha: f64,
    pub fp_beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorModel {
    pub id: String,
    pub modality: String,
    pub latency_frames: usize,
    pub tp_rate: RegimeRates,
    /// Localization noise, pixels.
    pub sigma: f64,
    /// Probability of one false positive per frame.
    pub fp_rate: f64,
    pub confidence: ConfidenceModel,
    /// Holdout predictions use `sigma * d` and `tp_rate / d`.
    pub holdout_degradation: f64,
}

impl DetectorModel {
    pub fn spec(&self) -> DetectorSpec {
        DetectorSpec {
            detector_id: self.id.clone(),
            modality: self.modality.clone(),
            latency_frames: self.latency_frames,
        }
    }
}

fn check(ok: bool, field: impl Into<String>, message: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::validation(field, message))
    }
}

fn check_rate(v: f64, field: String) -> Result<()> {
    check((0.0..=1.0).contains(&v), field, format!("{v} is not a rate in [0, 1]"))
}

fn check_positive(v: f64, field: &str) -> Result<()> {
    check(v.is_finite() && v > 0.0, field, format!("{v} must be positive"))
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let cfg: ScenarioConfig =
            serde_json::from_str(&text).map_err(|e| Error::json(format!("parsing {}", path.display()), e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scenario serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        check(
            self.version == SCENARIO_VERSION,
            "version",
            format!("unsupported version {}, expected {SCENARIO_VERSION}", self.version),
        )?;
        let s = &self.sequences;
        check(s.train + s.test > 0, "sequences", "no sequences requested")?;
        check(
            s.frames_per_sequence > 0,
            "sequences.frames_per_sequence",
            "must be positive",
        )?;
        check(s.folds > 0, "sequences.folds", "must be positive")?;

        let w = &self.world;
        check_positive(w.width, "world.width")?;
        check_positive(w.height, "world.height")?;
        check_positive(w.box_size_min, "world.box_size_min")?;
        check(
            w.box_size_max >= w.box_size_min,
            "world.box_size_max",
            "must be >= box_size_min",
        )?;
        check(
            w.box_size_max < w.width.min(w.height),
            "world.box_size_max",
            "boxes must fit inside the world",
        )?;
        check(w.classes > 0, "world.classes", "must be positive")?;
        check(
            w.objects_min <= w.objects_max,
            "world.objects_max",
            "must be >= objects_min",
        )?;
        check(
            w.objects_max <= w.max_objects,
            "world.max_objects",
            "must be >= objects_max",
        )?;
        check_rate(w.spawn_rate, "world.spawn_rate".into())?;
        check_rate(w.despawn_rate, "world.despawn_rate".into())?;
        check(w.jitter >= 0.0, "world.jitter", "must be >= 0")?;

        let r = &self.regime;
        check(r.segment_length > 0, "regime.segment_length", "must be positive")?;
        check_rate(r.day_probability, "regime.day_probability".into())?;
        check_rate(r.static_probability, "regime.static_probability".into())?;
        for (v, f) in [
            (r.day_brightness, "regime.day_brightness"),
            (r.night_brightness, "regime.night_brightness"),
        ] {
            check((0.0..=255.0).contains(&v), f, format!("{v} outside [0, 255]"))?;
        }
        check(
            r.day_brightness > r.night_brightness,
            "regime.day_brightness",
            "must exceed night_brightness",
        )?;
        check(
            r.speed_min >= 0.0 && r.speed_max >= r.speed_min,
            "regime.speed_max",
            "need 0 <= speed_min <= speed_max",
        )?;

        let o = &self.observation;
        check(o.count_noise >= 0.0, "observation.count_noise", "must be >= 0")?;
        check(o.motion_noise >= 0.0, "observation.motion_noise", "must be >= 0")?;

        check(!self.detectors.is_empty(), "detectors", "at least one detector")?;
        for (i, d) in self.detectors.iter().enumerate() {
            let f = |name: &str| format!("detectors[{i}].{name}");
            check(
                !d.id.is_empty() && d.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_'),
                f("id"),
                format!("`{}` must be non-empty [A-Za-z0-9_-]", d.id),
            )?;
            check(
                !self.detectors[..i].iter().any(|o| o.id == d.id),
                f("id"),
                format!("duplicate id `{}`", d.id),
            )?;
            check_rate(d.tp_rate.day, f("tp_rate.day"))?;
            check_rate(d.tp_rate.night, f("tp_rate.night"))?;
            check_rate(d.fp_rate, f("fp_rate"))?;
            check(d.sigma >= 0.0 && d.sigma.is_finite(), f("sigma"), "must be >= 0")?;
            check(d.holdout_degradation >= 1.0, f("holdout_degradation"), "must be >= 1")?;
            let c = &d.confidence;
            for (v, n) in [
                (c.tp_alpha, "confidence.tp_alpha"),
                (c.tp_beta, "confidence.tp_beta"),
                (c.fp_alpha, "confidence.fp_alpha"),
                (c.fp_beta, "confidence.fp_beta"),
            ] {
                check(v.is_finite() && v > 0.0, f(n), format!("{v} must be positive"))?;
            }
        }
        Ok(())
    }

    pub fn detector(&self, id: &str) -> Option<&DetectorModel> {
        self.detectors.iter().find(|d| d.id == id)
    }
}

/// Regime of one segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub day: bool,
    pub dynamic: bool,
}

/// Per-frame latent conditions of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeTrace {
    pub segments: Vec<Segment>,
    /// 0..=255
    pub brightness: Vec<f64>,
    /// Mean object speed, pixels/frame.
    pub motion: Vec<f64>,
}

impl RegimeTrace {
    pub fn segment_at(&self, frame: usize) -> &Segment {
        let i = self.segments.partition_point(|s| s.start <= frame);
        &self.segments[i - 1]
    }
}

/// Brightness waveform: segment level, ramped in from the previous level.
pub fn brightness_at(regime: &RegimeConfig, segments: &[Segment], frame: usize) -> f64 {
    let level = |s: &Segment| {
        if s.day {
            regime.day_brightness
        } else {
            regime.night_brightness
        }
    };
    let i = segments.partition_point(|s| s.start <= frame) - 1;
    let here = level(&segments[i]);
    let j = frame - segments[i].start;
    if i == 0 || j >= regime.transition_frames {
        return here;
    }
    let prev = level(&segments[i - 1]);
    prev + (here - prev) * (j + 1) as f64 / (regime.transition_frames + 1) as f64
}

/// Generated sequences with their latent regimes, train sequences first.
#[derive(Debug, Clone)]
pub struct World {
    pub sequences: Vec<Sequence>,
    pub traces: Vec<RegimeTrace>,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl World {
    pub fn trace(&self, sequence_id: &str) -> Option<&RegimeTrace> {
        self.sequences
            .iter()
            .position(|s| s.id == sequence_id)
            .map(|i| &self.traces[i])
    }
}

#[derive(Debug, Clone)]
struct Object {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    vx: f64,
    vy: f64,
    class_id: u32,
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
}

fn beta(rng: &mut ChaCha8Rng, a: f64, b: f64) -> f64 {
    Beta::new(a, b).expect("validated shape").sample(rng)
}

/// Box with center/size, kept inside the world and rounded to 0.01 px.
fn make_box(w: &WorldConfig, cx: f64, cy: f64, bw: f64, bh: f64, class_id: u32) -> BoundingBox {
    let bw = bw.clamp(1.0, w.width);
    let bh = bh.clamp(1.0, w.height);
    let x0 = round2((cx - bw / 2.0).clamp(0.0, w.width - bw));
    let y0 = round2((cy - bh / 2.0).clamp(0.0, w.height - bh));
    let x1 = round2(x0 + bw).max(x0 + 0.01);
    let y1 = round2(y0 + bh).max(y0 + 0.01);
    BoundingBox::new(x0, y0, x1, y1, class_id).expect("positive extent")
}

fn spawn(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Object {
    let w = rng.random_range(cfg.box_size_min..=cfg.box_size_max);
    let h = rng.random_range(cfg.box_size_min..=cfg.box_size_max);
    Object {
        cx: rng.random_range(w / 2.0..=cfg.width - w / 2.0),
        cy: rng.random_range(h / 2.0..=cfg.height - h / 2.0),
        w,
        h,
        vx: 0.0,
        vy: 0.0,
        class_id: rng.random_range(0..cfg.classes),
    }
}

fn set_velocity(obj: &mut Object, dynamic: bool, regime: &RegimeConfig, rng: &mut ChaCha8Rng) {
    if dynamic {
        let speed = rng.random_range(regime.speed_min..=regime.speed_max);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        obj.vx = speed * angle.cos();
        obj.vy = speed * angle.sin();
    } else {
        obj.vx = 0.0;
        obj.vy = 0.0;
    }
}

fn advance(obj: &mut Object, cfg: &WorldConfig, rng: &mut ChaCha8Rng) {
    let (jx, jy) = if cfg.jitter > 0.0 {
        (
            rng.random_range(-cfg.jitter..=cfg.jitter),
            rng.random_range(-cfg.jitter..=cfg.jitter),
        )
    } else {
        (0.0, 0.0)
    };
    obj.cx += obj.vx + jx;
    obj.cy += obj.vy + jy;
    let (lo_x, hi_x) = (obj.w / 2.0, cfg.width - obj.w / 2.0);
    if obj.cx < lo_x || obj.cx > hi_x {
        obj.vx = -obj.vx;
        obj.cx = obj.cx.clamp(lo_x, hi_x);
    }
    let (lo_y, hi_y) = (obj.h / 2.0, cfg.height - obj.h / 2.0);
    if obj.cy < lo_y || obj.cy > hi_y {
        obj.vy = -obj.vy;
        obj.cy = obj.cy.clamp(lo_y, hi_y);
    }
}

/// 84x84 grayscale frame: flat background at the brightness level with the
/// objects drawn slightly brighter.
fn render(cfg: &WorldConfig, brightness: f64, boxes: &[BoundingBox]) -> Vec<f64> {
    let bg = brightness / 255.0;
    let fg = (bg + 0.25).min(1.0);
    let mut img = vec![bg; IMAGE_SIDE * IMAGE_SIDE];
    let sx = IMAGE_SIDE as f64 / cfg.width;
    let sy = IMAGE_SIDE as f64 / cfg.height;
    for b in boxes {
        let c0 = (b.x_min() * sx).floor() as usize;
        let c1 = ((b.x_max() * sx).ceil() as usize).min(IMAGE_SIDE);
        let r0 = (b.y_min() * sy).floor() as usize;
        let r1 = ((b.y_max() * sy).ceil() as usize).min(IMAGE_SIDE);
        for r in r0..r1 {
            img[r * IMAGE_SIDE + c0..r * IMAGE_SIDE + c1].fill(fg);
        }
    }
    img
}

fn generate_sequence(cfg: &ScenarioConfig, id: &str, rng: &mut ChaCha8Rng) -> (Vec<FrameRecord>, RegimeTrace) {
    let w = &cfg.world;
    let r = &cfg.regime;
    let len = cfg.sequences.frames_per_sequence;
    let segments: Vec<Segment> = (0..len.div_ceil(r.segment_length))
        .map(|i| Segment {
            start: i * r.segment_length,
            day: rng.random_bool(r.day_probability),
            dynamic: !rng.random_bool(r.static_probability),
        })
        .collect();

    let n0 = rng.random_range(w.objects_min..=w.objects_max);
    let mut objects: Vec<Object> = (0..n0).map(|_| spawn(w, rng)).collect();

    let mut frames = Vec::with_capacity(len);
    let mut brightness = Vec::with_capacity(len);
    let mut motion = Vec::with_capacity(len);
    for t in 0..len {
        let seg_idx = t / r.segment_length;
        let seg = segments[seg_idx];
        if t == seg.start {
            for o in objects.iter_mut() {
                set_velocity(o, seg.dynamic, r, rng);
            }
        }
        if t > 0 && seg.dynamic {
            for o in objects.iter_mut() {
                advance(o, w, rng);
            }
            objects.retain(|_| !rng.random_bool(w.despawn_rate));
            if objects.len() < w.max_objects && rng.random_bool(w.spawn_rate) {
                let mut o = spawn(w, rng);
                set_velocity(&mut o, true, r, rng);
                objects.push(o);
            }
        }

        let b = brightness_at(r, &segments, t);
        let speed = if objects.is_empty() {
            0.0
        } else {
            objects.iter().map(|o| o.vx.hypot(o.vy)).sum::<f64>() / objects.len() as f64
        };
        let boxes: Vec<BoundingBox> = objects
            .iter()
            .map(|o| make_box(w, o.cx, o.cy, o.w, o.h, o.class_id))
            .collect();

        let motion_feature = speed / r.speed_max.max(1.0) + gaussian(rng, cfg.observation.motion_noise);
        let count_feature = (objects.len() as f64 + gaussian(rng, cfg.observation.count_noise)) / 10.0;
        let observation = ObservationPayload {
            feature_vector: Some(vec![b / 255.0, motion_feature, count_feature]),
            gray_image: cfg.observation.render_image.then(|| render(w, b, &boxes)),
        };
        frames.push(FrameRecord {
            sequence_id: id.to_string(),
            frame_index: t,
            observation,
            ground_truth: boxes,
        });
        brightness.push(b);
        motion.push(speed);
    }
    (
        frames,
        RegimeTrace {
            segments,
            brightness,
            motion,
        },
    )
}

/// Generate all sequences. Ids are `train-NNN` and `test-NNN`.
pub fn generate_world(cfg: &ScenarioConfig, seed: u64) -> Result<World> {
    cfg.validate()?;
    let train_ids: Vec<String> = (0..cfg.sequences.train).map(|i| format!("train-{i:03}")).collect();
    let test_ids: Vec<String> = (0..cfg.sequences.test).map(|i| format!("test-{i:03}")).collect();
    let mut records = Vec::new();
    let mut traces = Vec::new();
    for (i, id) in train_ids.iter().chain(&test_ids).enumerate() {
        let mut rng = rng::stream(seed, "world", i as u64);
        let (frames, trace) = generate_sequence(cfg, id, &mut rng);
        records.extend(frames);
        traces.push((id.clone(), trace));
    }
    let sequences = assemble_sequences(records)?;
    // assemble_sequences sorts by id; align traces with it
    traces.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(World {
        sequences,
        traces: traces.into_iter().map(|(_, t)| t).collect(),
        train_ids,
        test_ids,
    })
}

fn day_factor(regime: &RegimeConfig, brightness: f64) -> f64 {
    ((brightness - regime.night_brightness) / (regime.day_brightness - regime.night_brightness)).clamp(0.0, 1.0)
}

/// Predictions of one simulated detector on the given sequences.
///
/// Each ground-truth box is found with a brightness-dependent probability and
/// then jittered; at most one false positive is added per frame. True
/// detections draw confidences from a high-mean Beta, false ones from a
/// low-mean Beta.
pub fn simulate_detector(
    cfg: &ScenarioConfig,
    world: &World,
    sequence_ids: &[String],
    model: &DetectorModel,
    variant: Variant,
    seed: u64,
) -> Result<Vec<PredictionRecord>> {
    let w = &cfg.world;
    let (deg_tp, deg_sigma) = match variant {
        Variant::Holdout => (1.0 / model.holdout_degradation, model.holdout_degradation),
        Variant::Fulltrain => (1.0, 1.0),
    };
    let sigma = model.sigma * deg_sigma;
    let c = &model.confidence;
    let mut out = Vec::new();
    for id in sequence_ids {
        let seq_index = world
            .sequences
            .iter()
            .position(|s| &s.id == id)
            .ok_or_else(|| Error::Unknown {
                kind: "sequence",
                name: id.clone(),
            })?;
        let seq = &world.sequences[seq_index];
        let trace = &world.traces[seq_index];
        let tag = format!("detector:{}:{}", model.id, variant.as_str());
        let mut rng = rng::stream(seed, &tag, seq_index as u64);
        for (t, frame) in seq.frames.iter().enumerate() {
            let d = day_factor(&cfg.regime, trace.brightness[t]);
            let tp = (model.tp_rate.night + d * (model.tp_rate.day - model.tp_rate.night)) * deg_tp;
            let mut dets = Vec::new();
            for g in &frame.ground_truth {
                if !rng.random_bool(tp.clamp(0.0, 1.0)) {
                    continue;
                }
                let cx = (g.x_min() + g.x_max()) / 2.0 + gaussian(&mut rng, sigma);
                let cy = (g.y_min() + g.y_max()) / 2.0 + gaussian(&mut rng, sigma);
                let bw = g.width() + gaussian(&mut rng, sigma);
                let bh = g.height() + gaussian(&mut rng, sigma);
                let bbox = if sigma == 0.0 {
                    *g
                } else {
                    make_box(w, cx, cy, bw, bh, g.class_id())
                };
                dets.push(Detection::new(bbox, beta(&mut rng, c.tp_alpha, c.tp_beta))?);
            }
            if rng.random_bool(model.fp_rate) {
                let mut o = spawn(w, &mut rng);
                o.class_id = rng.random_range(0..w.classes);
                let bbox = make_box(w, o.cx, o.cy, o.w, o.h, o.class_id);
                dets.push(Detection::new(bbox, beta(&mut rng, c.fp_alpha, c.fp_beta))?);
            }
            out.push(PredictionRecord {
                sequence_id: id.clone(),
                frame_index: t,
                detector_id: model.id.clone(),
                variant,
                detections: DetectionSet(dets),
            });
        }
    }
    Ok(out)
}

/// World plus predictions: holdout variant on training sequences, fulltrain
/// on test sequences. Training sequences are dealt round-robin into folds.
pub fn generate_dataset(cfg: &ScenarioConfig, seed: u64) -> Result<(Dataset, World)> {
    let world = generate_world(cfg, seed)?;
    let mut store = PredictionStore::new(&world.sequences);
    for model in &cfg.detectors {
        for (ids, variant) in [
            (&world.train_ids, Variant::Holdout),
            (&world.test_ids, Variant::Fulltrain),
        ] {
            for rec in simulate_detector(cfg, &world, ids, model, variant, seed)? {
                store.insert(rec)?;
            }
        }
    }
    let folds = FoldManifest::round_robin(cfg.sequences.folds, &world.train_ids, &world.test_ids);
    let detectors = cfg.detectors.iter().map(DetectorModel::spec).collect();
    let dataset = Dataset::new(world.sequences.clone(), detectors, folds, store)?;
    Ok((dataset, world))
}

/// The bundled `diurnal-v1` scenario.
///
/// Four detectors over two modalities. The fast ones (k=0) can answer every
/// frame: the RGB one is good by day and poor at night, the lidar one is
/// mediocre but indifferent to light. The slow ones (k=3) are blocked for
/// three frames: the RGB one is the most accurate detector by day, the lidar
/// one is weak everywhere. Sequences alternate day/night and static/dynamic
/// segments; static segments let a slow detector's held output stay valid.
pub fn build_paper_shaped_scenario() -> ScenarioConfig {
    let confidence = ConfidenceModel {
        tp_alpha: 8.0,
        tp_beta: 2.0,
        fp_alpha: 2.0,
        fp_beta: 6.0,
    };
    let det = |id: &str, modality: &str, k: usize, day: f64, night: f64, sigma: f64, fp: f64| DetectorModel {
        id: id.into(),
        modality: modality.into(),
        latency_frames: k,
        tp_rate: RegimeRates { day, night },
        sigma,
        fp_rate: fp,
        confidence,
        holdout_degradation: 1.05,
    };
    ScenarioConfig {
        version: SCENARIO_VERSION,
        name: "diurnal-v1".into(),
        seed: 7,
        sequences: SequenceLayout {
            train: 100,
            test: 50,
            frames_per_sequence: 200,
            folds: FoldManifest::DEFAULT_FOLDS,
        },
        world: WorldConfig {
            width: 320.0,
            height: 240.0,
            box_size_min: 24.0,
            box_size_max: 64.0,
            classes: 2,
            objects_min: 3,
            objects_max: 8,
            max_objects: 10,
            spawn_rate: 0.05,
            despawn_rate: 0.02,
            jitter: 1.0,
        },
        regime: RegimeConfig {
            segment_length: 50,
            day_probability: 0.5,
            static_probability: 0.65,
            day_brightness: 180.0,
            night_brightness: 30.0,
            transition_frames: 5,
            speed_min: 6.0,
            speed_max: 10.0,
        },
        observation: ObservationConfig {
            count_noise: 0.5,
            motion_noise: 0.05,
            render_image: false,
        },
        detectors: vec![
            det("fast-rgb", "rgb", 0, 0.85, 0.25, 2.5, 0.3),
            det("fast-lidar", "lidar", 0, 0.65, 0.65, 2.5, 0.3),
            det("slow-rgb", "rgb", 3, 0.99, 0.35, 1.2, 0.05),
            det("slow-lidar", "lidar", 3, 0.50, 0.50, 3.0, 0.3),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{ap_image, IouThresholdSpec};

    fn small() -> ScenarioConfig {
        let mut c = build_paper_shaped_scenario();
        c.sequences.train = 3;
        c.sequences.test = 2;
        c.sequences.frames_per_sequence = 60;
        c.regime.segment_length = 20;
        c
    }

    #[test]
    fn bundled_scenario_shape() {
        let c = build_paper_shaped_scenario();
        c.validate().unwrap();
        let ks: Vec<usize> = c.detectors.iter().map(|d| d.latency_frames).collect();
        assert_eq!(ks, vec![0, 0, 3, 3]);
        let mut modalities: Vec<&str> = c.detectors.iter().map(|d| d.modality.as_str()).collect();
        modalities.sort();
        modalities.dedup();
        assert_eq!(modalities, vec!["lidar", "rgb"]);
    }

    #[test]
    fn invalid_rate_names_field() {
        let mut c = small();
        c.detectors[0].tp_rate.day = 1.2;
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("detectors[0].tp_rate.day"), "{err}");
        let mut c = small();
        c.detectors[1].holdout_degradation = 0.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn static_world_is_frozen() {
        let mut c = small();
        c.world.spawn_rate = 0.0;
        c.world.despawn_rate = 0.0;
        c.regime.speed_min = 0.0;
        c.regime.speed_max = 0.0;
        c.world.jitter = 0.0;
        let w = generate_world(&c, 3).unwrap();
        for s in &w.sequences {
            assert!(s.frames.iter().all(|f| f.ground_truth == s.frames[0].ground_truth));
        }
    }

    #[test]
    fn static_segments_keep_ground_truth() {
        let w = generate_world(&small(), 5).unwrap();
        for (s, tr) in w.sequences.iter().zip(&w.traces) {
            for t in 1..s.len() {
                let seg = tr.segment_at(t);
                if !seg.dynamic && t > seg.start {
                    assert_eq!(s.frames[t].ground_truth, s.frames[t - 1].ground_truth);
                }
            }
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let c = small();
        let (a, _) = generate_dataset(&c, 9).unwrap();
        let (b, _) = generate_dataset(&c, 9).unwrap();
        assert_eq!(a.sequences, b.sequences);
        let (d, _) = generate_dataset(&c, 10).unwrap();
        assert_ne!(a.sequences, d.sequences);
    }

    #[test]
    fn brightness_matches_waveform() {
        let c = small();
        let w = generate_world(&c, 4).unwrap();
        for (s, tr) in w.sequences.iter().zip(&w.traces) {
            for (t, f) in s.frames.iter().enumerate() {
                // independent recomputation of the ramped square wave
                let seg = t / c.regime.segment_length;
                let lvl = |i: usize| if tr.segments[i].day { 180.0 } else { 30.0 };
                let j = t % c.regime.segment_length;
                let expect = if seg > 0 && j < 5 {
                    lvl(seg - 1) + (lvl(seg) - lvl(seg - 1)) * (j + 1) as f64 / 6.0
                } else {
                    lvl(seg)
                };
                assert!((tr.brightness[t] - expect).abs() < 1e-12);
                let fv = f.observation.feature_vector.as_ref().unwrap();
                assert!((fv[0] * 255.0 - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn perfect_and_blind_detectors() {
        let c = small();
        let w = generate_world(&c, 1).unwrap();
        let mut m = c.detectors[0].clone();
        m.tp_rate = RegimeRates { day: 1.0, night: 1.0 };
        m.sigma = 0.0;
        m.fp_rate = 0.0;
        let ids: Vec<String> = w.sequences.iter().map(|s| s.id.clone()).collect();
        let recs = simulate_detector(&c, &w, &ids, &m, Variant::Fulltrain, 1).unwrap();
        for r in &recs {
            let gts = &w.sequences.iter().find(|s| s.id == r.sequence_id).unwrap().frames[r.frame_index].ground_truth;
            let boxes: Vec<BoundingBox> = r.detections.iter().map(|d| *d.bbox()).collect();
            assert_eq!(&boxes, gts);
            for spec in IouThresholdSpec::CocoRange.thresholds() {
                assert_eq!(ap_image(&r.detections, gts, IouThresholdSpec::Single(spec)), 1.0);
            }
        }
        m.tp_rate = RegimeRates { day: 0.0, night: 0.0 };
        let recs = simulate_detector(&c, &w, &ids, &m, Variant::Fulltrain, 1).unwrap();
        assert!(recs.iter().all(|r| r.detections.is_empty()));
    }

    #[test]
    fn image_rendering_is_valid() {
        let mut c = small();
        c.observation.render_image = true;
        c.sequences.train = 1;
        c.sequences.test = 0;
        let w = generate_world(&c, 2).unwrap();
        let f = &w.sequences[0].frames[0];
        f.observation.validate().unwrap();
        let mean = f.observation.mean_intensity().unwrap();
        assert!(mean >= w.traces[0].brightness[0] - 1e-9);
    }

    #[test]
    fn dataset_passes_validation_and_round_trips() {
        let c = small();
        let (ds, _) = generate_dataset(&c, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.sequences, ds.sequences);
        assert_eq!(back.store.len(), ds.store.len());
        let dir2 = tempfile::tempdir().unwrap();
        back.save(dir2.path()).unwrap();
        for f in ["frames.jsonl", "folds.json", "detectors.json", "preds_slow-rgb.jsonl"] {
            assert_eq!(
                std::fs::read(dir.path().join(f)).unwrap(),
                std::fs::read(dir2.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }
}
