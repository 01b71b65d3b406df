use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::Variant;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Training sequences partitioned into folds, plus the test sequences.
///
/// A training sequence in fold `i` is scored with predictions from a detector
/// trained on the other folds (the holdout variant).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldManifest {
    pub fold_count: usize,
    pub assignment: BTreeMap<String, usize>,
    #[serde(default)]
    pub test: Vec<String>,
}

impl FoldManifest {
    pub const DEFAULT_FOLDS: usize = 5;

    /// Round-robin assignment of `train` ids (in the given order) to folds.
    pub fn round_robin(fold_count: usize, train: &[String], test: &[String]) -> Self {
        FoldManifest {
            fold_count,
            assignment: train
                .iter()
                .enumerate()
                .map(|(i, id)| (id.clone(), i % fold_count.max(1)))
                .collect(),
            test: test.to_vec(),
        }
    }

    /// Each of `sequence_ids` must be in exactly one of {a fold, the test list}.
    pub fn validate(&self, sequence_ids: &[&str]) -> Result<()> {
        if self.fold_count == 0 {
            return Err(Error::validation("folds.fold_count", "must be at least 1"));
        }
        for (id, &fold) in &self.assignment {
            if fold >= self.fold_count {
                return Err(Error::validation(
                    format!("folds.assignment.{id}"),
                    format!("fold {fold} outside [0, {})", self.fold_count),
                ));
            }
        }
        let mut test = BTreeSet::new();
        for id in &self.test {
            if !test.insert(id.as_str()) {
                return Err(Error::validation("folds.test", format!("`{id}` listed twice")));
            }
            if self.assignment.contains_key(id) {
                return Err(Error::validation(
                    "folds.test",
                    format!("`{id}` is both a training and a test sequence"),
                ));
            }
        }
        let known: BTreeSet<&str> = sequence_ids.iter().copied().collect();
        for id in self.assignment.keys().map(String::as_str).chain(test.iter().copied()) {
            if !known.contains(id) {
                return Err(Error::Unknown {
                    kind: "sequence in fold manifest",
                    name: id.to_string(),
                });
            }
        }
        for id in sequence_ids {
            if !self.assignment.contains_key(*id) && !test.contains(id) {
                return Err(Error::validation(
                    "folds",
                    format!("sequence `{id}` is in neither a fold nor the test split"),
                ));
            }
        }
        Ok(())
    }

    pub fn split_of(&self, sequence_id: &str) -> Option<Split> {
        if self.assignment.contains_key(sequence_id) {
            Some(Split::Train)
        } else if self.test.iter().any(|t| t == sequence_id) {
            Some(Split::Test)
        } else {
            None
        }
    }

    pub fn fold_of(&self, sequence_id: &str) -> Option<usize> {
        self.assignment.get(sequence_id).copied()
    }
}

/// Prediction variant used to score `sequence_id` on `split`.
pub fn select_variant(manifest: &FoldManifest, sequence_id: &str, split: Split) -> Result<Variant> {
    match split {
        Split::Train => manifest
            .fold_of(sequence_id)
            .map(|_| Variant::Holdout)
            .ok_or_else(|| Error::Unknown {
                kind: "training sequence",
                name: sequence_id.to_string(),
            }),
        Split::Test => Ok(Variant::Fulltrain),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize, prefix: &str) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    #[test]
    fn variant_selection() {
        let m = FoldManifest::round_robin(5, &ids(10, "tr"), &ids(2, "te"));
        assert_eq!(m.fold_of("tr2"), Some(2));
        assert_eq!(select_variant(&m, "tr2", Split::Train).unwrap(), Variant::Holdout);
        assert_eq!(select_variant(&m, "te0", Split::Test).unwrap(), Variant::Fulltrain);
        assert!(select_variant(&m, "missing", Split::Train).is_err());
    }

    #[test]
    fn five_folds_cover_training_once() {
        let train = ids(12, "tr");
        let test = ids(3, "te");
        let m = FoldManifest::round_robin(5, &train, &test);
        let all: Vec<&str> = train.iter().chain(&test).map(String::as_str).collect();
        m.validate(&all).unwrap();
        let mut per_fold = [0usize; 5];
        for f in m.assignment.values() {
            per_fold[*f] += 1;
        }
        assert_eq!(per_fold.iter().sum::<usize>(), 12);
        assert!(per_fold.iter().all(|&c| c >= 2));
    }

    #[test]
    fn invalid_manifests() {
        let mut m = FoldManifest::round_robin(5, &ids(3, "tr"), &[]);
        m.assignment.insert("tr0".into(), 7);
        assert!(m.validate(&["tr0", "tr1", "tr2"]).is_err());

        let m = FoldManifest::round_robin(5, &ids(3, "tr"), &["tr1".to_string()]);
        assert!(m.validate(&["tr0", "tr1", "tr2"]).is_err());

        let m = FoldManifest::round_robin(5, &ids(2, "tr"), &[]);
        assert!(m.validate(&["tr0", "tr1", "orphan"]).is_err());
    }
}
