//! On-disk datasets and the prediction lookup table.
//!
//! A dataset directory holds:
//!
//! | file                   | content                                             |
//! |------------------------|-----------------------------------------------------|
//! | `frames.jsonl`         | one [`FrameRecord`] per line                        |
//! | `preds_<detector>.jsonl` | one [`PredictionRecord`] per line                 |
//! | `detectors.json`       | list of [`DetectorSpec`], in action order           |
//! | `folds.json`           | [`FoldManifest`]                                    |
//!
//! Field order in every record is fixed by the struct declarations below and
//! floats are written in shortest round-trip form, so `save(load(bytes))`
//! reproduces `bytes` for files this crate wrote.

mod folds;
mod jsonl;
mod store;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::metrics::{BoundingBox, DetectionSet};
use crate::{Error, Result};

pub use folds::{select_variant, FoldManifest, Split};
pub use store::{EntryKey, PredictionStore};

/// Side length of the downsampled grayscale observation.
pub const IMAGE_SIDE: usize = 84;
pub const IMAGE_LEN: usize = IMAGE_SIDE * IMAGE_SIDE;

pub const FRAMES_FILE: &str = "frames.jsonl";
pub const DETECTORS_FILE: &str = "detectors.json";
pub const FOLDS_FILE: &str = "folds.json";

pub fn predictions_file(detector_id: &str) -> String {
    format!("preds_{detector_id}.jsonl")
}

/// What the agent sees of a frame.
///
/// By convention `feature_vector[0]` is the frame's mean brightness scaled to
/// [0, 1]; the lighting heuristic relies on it when no image is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationPayload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_vector: Option<Vec<f64>>,
    /// Row-major 84x84 intensities in [0, 1].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gray_image: Option<Vec<f64>>,
}

impl ObservationPayload {
    pub fn features(v: Vec<f64>) -> Self {
        ObservationPayload {
            feature_vector: Some(v),
            gray_image: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_vector.is_none() && self.gray_image.is_none() {
            return Err(Error::validation(
                "observation",
                "needs a feature_vector, a gray_image or both",
            ));
        }
        if let Some(f) = &self.feature_vector {
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation("observation.feature_vector", "non-finite value"));
            }
        }
        if let Some(img) = &self.gray_image {
            if img.len() != IMAGE_LEN {
                return Err(Error::validation(
                    "observation.gray_image",
                    format!("expected {IMAGE_LEN} values (84x84), got {}", img.len()),
                ));
            }
            if img.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::validation("observation.gray_image", "intensity outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// Mean intensity on the 0..=255 scale.
    pub fn mean_intensity(&self) -> Option<f64> {
        if let Some(img) = &self.gray_image {
            return Some(255.0 * img.iter().sum::<f64>() / img.len() as f64);
        }
        self.feature_vector.as_ref().and_then(|f| f.first()).map(|b| 255.0 * b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub sequence_id: String,
    pub frame_index: usize,
    pub observation: ObservationPayload,
    pub ground_truth: Vec<BoundingBox>,
}

/// An episode: frames with consecutive indices starting at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub id: String,
    pub frames: Vec<FrameRecord>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSpec {
    pub detector_id: String,
    pub modality: String,
    /// Frames that pass before this detector's prediction is available.
    pub latency_frames: usize,
}

/// Which copy of a detector produced a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Detector never trained on this frame's fold.
    Holdout,
    /// Detector trained on the whole training set.
    Fulltrain,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Holdout => "holdout",
            Variant::Fulltrain => "fulltrain",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub sequence_id: String,
    pub frame_index: usize,
    pub detector_id: String,
    pub variant: Variant,
    pub detections: DetectionSet,
}

/// Group frame records into sequences and check the index invariant.
pub fn assemble_sequences(records: Vec<FrameRecord>) -> Result<Vec<Sequence>> {
    let mut grouped: BTreeMap<String, Vec<FrameRecord>> = BTreeMap::new();
    for r in records {
        r.observation.validate().map_err(|e| match e {
            Error::Validation { field, message } => Error::validation(
                format!("sequence `{}` frame {}: {field}", r.sequence_id, r.frame_index),
                message,
            ),
            other => other,
        })?;
        grouped.entry(r.sequence_id.clone()).or_default().push(r);
    }
    grouped
        .into_iter()
        .map(|(id, mut frames)| {
            frames.sort_by_key(|f| f.frame_index);
            for (expected, f) in frames.iter().enumerate() {
                if f.frame_index != expected {
                    let message = if f.frame_index < expected {
                        format!("duplicate frame_index {}", f.frame_index)
                    } else {
                        format!("gap: expected frame_index {expected}, found {}", f.frame_index)
                    };
                    return Err(Error::validation(format!("sequence `{id}` frame_index"), message));
                }
            }
            Ok(Sequence { id, frames })
        })
        .collect()
}

/// Read `frames.jsonl`: sequences sorted by id, frames by index.
pub fn load_sequences(path: &Path) -> Result<Vec<Sequence>> {
    assemble_sequences(jsonl::read_lines(path)?)
}

pub fn save_sequences(path: &Path, sequences: &[Sequence]) -> Result<()> {
    let mut sorted: Vec<&Sequence> = sequences.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    jsonl::write_lines(path, sorted.iter().flat_map(|s| s.frames.iter()))
}

/// Ingest one predictions file into `store`. Returns the number of records.
pub fn load_predictions(path: &Path, store: &mut PredictionStore) -> Result<usize> {
    let records: Vec<PredictionRecord> = jsonl::read_lines(path)?;
    let n = records.len();
    for r in records {
        store.insert(r)?;
    }
    Ok(n)
}

pub fn save_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    jsonl::write_lines(path, records.iter())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(format!("parsing {}", path.display()), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::json(format!("encoding {}", path.display()), e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_detectors(path: &Path) -> Result<Vec<DetectorSpec>> {
    let detectors: Vec<DetectorSpec> = read_json(path)?;
    validate_detectors(&detectors)?;
    Ok(detectors)
}

fn validate_detectors(detectors: &[DetectorSpec]) -> Result<()> {
    if detectors.is_empty() {
        return Err(Error::validation("detectors", "empty detector list"));
    }
    let mut seen = HashMap::new();
    for (i, d) in detectors.iter().enumerate() {
        let ok = !d.detector_id.is_empty()
            && d.detector_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if !ok {
            return Err(Error::validation(
                format!("detectors[{i}].detector_id"),
                format!("`{}` must be non-empty [A-Za-z0-9_-]", d.detector_id),
            ));
        }
        if seen.insert(d.detector_id.as_str(), i).is_some() {
            return Err(Error::validation(
                format!("detectors[{i}].detector_id"),
                format!("duplicate id `{}`", d.detector_id),
            ));
        }
    }
    Ok(())
}

/// Everything in a dataset directory, loaded and cross-validated.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub sequences: Vec<Sequence>,
    pub detectors: Vec<DetectorSpec>,
    pub folds: FoldManifest,
    pub store: PredictionStore,
    by_id: HashMap<String, usize>,
}

impl Dataset {
    /// Cross-check parts assembled in memory.
    pub fn new(
        mut sequences: Vec<Sequence>,
        detectors: Vec<DetectorSpec>,
        folds: FoldManifest,
        store: PredictionStore,
    ) -> Result<Self> {
        validate_detectors(&detectors)?;
        sequences.sort_by(|a, b| a.id.cmp(&b.id));
        let ids: Vec<&str> = sequences.iter().map(|s| s.id.as_str()).collect();
        folds.validate(&ids)?;
        store.validate_coverage(&sequences, &detectors)?;
        let by_id = sequences.iter().enumerate().map(|(i, s)| (s.id.clone(), i)).collect();
        Ok(Dataset {
            sequences,
            detectors,
            folds,
            store,
            by_id,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let sequences = load_sequences(&dir.join(FRAMES_FILE))?;
        let detectors = load_detectors(&dir.join(DETECTORS_FILE))?;
        let folds: FoldManifest = read_json(&dir.join(FOLDS_FILE))?;
        let mut store = PredictionStore::new(&sequences);
        for d in &detectors {
            load_predictions(&dir.join(predictions_file(&d.detector_id)), &mut store)?;
        }
        Dataset::new(sequences, detectors, folds, store)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        save_sequences(&dir.join(FRAMES_FILE), &self.sequences)?;
        write_json(&dir.join(DETECTORS_FILE), &self.detectors)?;
        write_json(&dir.join(FOLDS_FILE), &self.folds)?;
        for d in &self.detectors {
            let records = self.store.records_for(&d.detector_id, &self.sequences);
            save_predictions(&dir.join(predictions_file(&d.detector_id)), &records)?;
        }
        Ok(())
    }

    pub fn sequence(&self, id: &str) -> Option<&Sequence> {
        self.by_id.get(id).map(|&i| &self.sequences[i])
    }

    pub fn sequence_index(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn detector(&self, id: &str) -> Option<&DetectorSpec> {
        self.detectors.iter().find(|d| d.detector_id == id)
    }

    /// Sequences of one split, in id order.
    pub fn split(&self, split: Split) -> Vec<&Sequence> {
        self.sequences
            .iter()
            .filter(|s| self.folds.split_of(&s.id) == Some(split))
            .collect()
    }

    pub fn frame_count(&self) -> usize {
        self.sequences.iter().map(Sequence::len).sum()
    }
}
