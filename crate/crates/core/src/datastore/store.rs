use std::collections::HashMap;

use super::{DetectorSpec, PredictionRecord, Sequence, Variant};
use crate::metrics::DetectionSet;
use crate::{Error, Result};

/// Interned lookup key. Obtain the indices from
/// [`PredictionStore::sequence_handle`] and [`PredictionStore::detector_handle`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EntryKey {
    pub sequence: u32,
    pub frame: u32,
    pub detector: u16,
    pub variant: Variant,
}

/// (sequence, frame, detector, variant) -> detections.
///
/// Immutable once loading finishes; lookups never synthesize an empty set for
/// a missing key.
#[derive(Debug, Clone, Default)]
pub struct PredictionStore {
    seq_ids: Vec<String>,
    seq_lens: Vec<usize>,
    seq_index: HashMap<String, u32>,
    det_ids: Vec<String>,
    det_index: HashMap<String, u16>,
    entries: HashMap<EntryKey, DetectionSet>,
}

impl PredictionStore {
    /// An empty store that accepts predictions for `sequences`.
    pub fn new(sequences: &[Sequence]) -> Self {
        let mut store = PredictionStore::default();
        for s in sequences {
            store.seq_index.insert(s.id.clone(), store.seq_ids.len() as u32);
            store.seq_ids.push(s.id.clone());
            store.seq_lens.push(s.len());
        }
        store
    }

    pub fn sequence_handle(&self, sequence_id: &str) -> Option<u32> {
        self.seq_index.get(sequence_id).copied()
    }

    pub fn detector_handle(&self, detector_id: &str) -> Option<u16> {
        self.det_index.get(detector_id).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Add one record. Unknown sequences, out-of-range frames and duplicate
    /// keys are rejected.
    pub fn insert(&mut self, record: PredictionRecord) -> Result<()> {
        let sequence = self
            .sequence_handle(&record.sequence_id)
            .ok_or_else(|| Error::Unknown {
                kind: "sequence",
                name: record.sequence_id.clone(),
            })?;
        let len = self.seq_lens[sequence as usize];
        if record.frame_index >= len {
            return Err(Error::validation(
                format!("prediction for `{}`", record.sequence_id),
                format!(
                    "frame_index {} out of range (sequence has {len} frames)",
                    record.frame_index
                ),
            ));
        }
        let detector = match self.det_index.get(&record.detector_id) {
            Some(&d) => d,
            None => {
                let d =
                    u16::try_from(self.det_ids.len()).map_err(|_| Error::InvalidInput("too many detectors".into()))?;
                self.det_index.insert(record.detector_id.clone(), d);
                self.det_ids.push(record.detector_id.clone());
                d
            }
        };
        let key = EntryKey {
            sequence,
            frame: record.frame_index as u32,
            detector,
            variant: record.variant,
        };
        if self.entries.insert(key, record.detections).is_some() {
            return Err(Error::validation(
                format!("prediction for `{}`", record.sequence_id),
                format!(
                    "duplicate record for frame {} detector `{}` ({})",
                    record.frame_index,
                    record.detector_id,
                    record.variant.as_str()
                ),
            ));
        }
        Ok(())
    }

    pub fn get(&self, sequence_id: &str, frame: usize, detector_id: &str, variant: Variant) -> Result<&DetectionSet> {
        let missing = || Error::MissingPrediction {
            sequence: sequence_id.to_string(),
            frame,
            detector: detector_id.to_string(),
            variant: variant.as_str().to_string(),
        };
        let (Some(sequence), Some(detector)) = (self.sequence_handle(sequence_id), self.detector_handle(detector_id))
        else {
            return Err(missing());
        };
        self.entries
            .get(&EntryKey {
                sequence,
                frame: frame as u32,
                detector,
                variant,
            })
            .ok_or_else(missing)
    }

    pub fn get_key(&self, key: EntryKey) -> Result<&DetectionSet> {
        self.entries.get(&key).ok_or_else(|| Error::MissingPrediction {
            sequence: self.seq_ids.get(key.sequence as usize).cloned().unwrap_or_default(),
            frame: key.frame as usize,
            detector: self.det_ids.get(key.detector as usize).cloned().unwrap_or_default(),
            variant: key.variant.as_str().to_string(),
        })
    }

    /// Every frame of every sequence must have each detector in at least one
    /// variant, and no detector outside `detectors` may appear.
    pub fn validate_coverage(&self, sequences: &[Sequence], detectors: &[DetectorSpec]) -> Result<()> {
        for id in &self.det_ids {
            if !detectors.iter().any(|d| &d.detector_id == id) {
                return Err(Error::Unknown {
                    kind: "detector in predictions",
                    name: id.clone(),
                });
            }
        }
        for s in sequences {
            let Some(sequence) = self.sequence_handle(&s.id) else {
                return Err(Error::Unknown {
                    kind: "sequence in prediction store",
                    name: s.id.clone(),
                });
            };
            for d in detectors {
                let Some(detector) = self.detector_handle(&d.detector_id) else {
                    return Err(Error::validation(
                        format!("predictions for `{}`", d.detector_id),
                        "no records loaded",
                    ));
                };
                for frame in 0..s.len() as u32 {
                    let has = [Variant::Holdout, Variant::Fulltrain].iter().any(|&variant| {
                        self.entries.contains_key(&EntryKey {
                            sequence,
                            frame,
                            detector,
                            variant,
                        })
                    });
                    if !has {
                        return Err(Error::validation(
                            format!("predictions for `{}`", d.detector_id),
                            format!("missing sequence `{}` frame {frame}", s.id),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Records of one detector in canonical order: sequence, frame, variant.
    pub fn records_for(&self, detector_id: &str, sequences: &[Sequence]) -> Vec<PredictionRecord> {
        let mut out = Vec::new();
        let Some(detector) = self.detector_handle(detector_id) else {
            return out;
        };
        let mut sorted: Vec<&Sequence> = sequences.iter().collect();
        sorted.sort_by(|a, b| a.id.cmp(&b.id));
        for s in sorted {
            let Some(sequence) = self.sequence_handle(&s.id) else {
                continue;
            };
            for frame in 0..s.len() {
                for variant in [Variant::Holdout, Variant::Fulltrain] {
                    let key = EntryKey {
                        sequence,
                        frame: frame as u32,
                        detector,
                        variant,
                    };
                    if let Some(d) = self.entries.get(&key) {
                        out.push(PredictionRecord {
                            sequence_id: s.id.clone(),
                            frame_index: frame,
                            detector_id: detector_id.to_string(),
                            variant,
                            detections: d.clone(),
                        });
                    }
                }
            }
        }
        out
    }
}
