//! Dataset manifests and patient-disjoint splits.
//!
//! A manifest serializes to one JSON document:
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "config_hash": "…" | null,
//!   "entries": [
//!     {"record_id": "…", "patient_id": "…", "locator": "records/…",
//!      "labels": {"pr_ms": 160.0, "qrs_ms": 96.0, "qt_ms": 400.0,
//!                 "hr_bpm": 73.0, "pr_present": true}}
//!   ],
//!   "split_assignment": {"<record_id>": "train" | "validation" | "holdout"}
//! }
//! ```

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DataError, IntervalLabels};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Holdout,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Holdout];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Holdout => "holdout",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "holdout" | "test" => Ok(Split::Holdout),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub record_id: String,
    pub patient_id: String,
    /// Path of the waveform header, relative to the manifest's data directory.
    pub locator: String,
    pub labels: IntervalLabels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config_hash: Option<String>,
    pub entries: Vec<ManifestEntry>,
    pub split_assignment: BTreeMap<String, Split>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self, DataError> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.record_id.as_str()) {
                return Err(DataError::DuplicateRecord(e.record_id.clone()));
            }
        }
        Ok(Self {
            format_version: MANIFEST_VERSION,
            config_hash: None,
            entries,
            split_assignment: BTreeMap::new(),
        })
    }

    pub fn split_of(&self, record_id: &str) -> Option<Split> {
        self.split_assignment.get(record_id).copied()
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| self.split_of(&e.record_id) == Some(split))
    }

    pub fn patients(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.patient_id.as_str()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        let m: Self = serde_json::from_str(s)?;
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub holdout: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.70, validation: 0.15, holdout: 0.15 }
    }
}

fn patient_key(seed: u64, patient_id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(patient_id.as_bytes());
    h.finalize().into()
}

/// Assigns every patient, and so all of that patient's records, to exactly
/// one split.
///
/// Patients are ordered by a seeded SHA-256 of their id; the first
/// `round(train * P)` go to train, the next `round(validation * P)` to
/// validation and the rest to holdout. Each split gets at least one patient.
pub fn split_by_patient(
    manifest: &DatasetManifest,
    fractions: SplitFractions,
    seed: u64,
) -> Result<DatasetManifest, DataError> {
    let f = [fractions.train, fractions.validation, fractions.holdout];
    if f.iter().any(|&v| !(v >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::BadFractions(f));
    }
    if manifest.entries.is_empty() {
        return Err(DataError::EmptyManifest);
    }
    let patients = manifest.patients();
    let p = patients.len();
    if p < 3 {
        return Err(DataError::TooFewPatients(p));
    }
    let mut order: Vec<(&str, [u8; 32])> = patients.iter().map(|&id| (id, patient_key(seed, id))).collect();
    order.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(b.0)));

    let mut n_train = ((fractions.train * p as f64).round() as usize).clamp(1, p - 2);
    let mut n_val = ((fractions.validation * p as f64).round() as usize).max(1);
    if n_train + n_val > p - 1 {
        n_val = p - 1 - n_train;
    }
    if n_val == 0 {
        n_val = 1;
        n_train -= 1;
    }
    let assignment: BTreeMap<&str, Split> = order
        .iter()
        .enumerate()
        .map(|(i, (id, _))| {
            let s = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Validation
            } else {
                Split::Holdout
            };
            (*id, s)
        })
        .collect();

    let mut out = manifest.clone();
    out.split_assignment = manifest
        .entries
        .iter()
        .map(|e| (e.record_id.clone(), assignment[e.patient_id.as_str()]))
        .collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn manifest(patients: usize, per_patient: usize) -> DatasetManifest {
        let labels = IntervalLabels::new(160.0, 96.0, 400.0, 73.0).unwrap();
        let entries = (0..patients)
            .flat_map(|p| {
                (0..per_patient).map(move |r| ManifestEntry {
                    record_id: format!("rec{p}_{r}"),
                    patient_id: format!("pat{p}"),
                    locator: format!("records/rec{p}_{r}.hea"),
                    labels,
                })
            })
            .collect();
        DatasetManifest::new(entries).unwrap()
    }

    fn patient_sets(m: &DatasetManifest) -> BTreeMap<Split, BTreeSet<String>> {
        let mut sets: BTreeMap<Split, BTreeSet<String>> = BTreeMap::new();
        for e in &m.entries {
            sets.entry(m.split_of(&e.record_id).unwrap()).or_default().insert(e.patient_id.clone());
        }
        sets
    }

    #[test]
    fn deterministic() {
        let m = manifest(100, 2);
        let a = split_by_patient(&m, SplitFractions::default(), 7).unwrap();
        let b = split_by_patient(&m, SplitFractions::default(), 7).unwrap();
        assert_eq!(a.split_assignment, b.split_assignment);
        let c = split_by_patient(&m, SplitFractions::default(), 8).unwrap();
        assert_ne!(a.split_assignment, c.split_assignment);
    }

    #[test]
    fn patient_disjoint() {
        let m = manifest(57, 3);
        let s = split_by_patient(&m, SplitFractions::default(), 1).unwrap();
        let sets = patient_sets(&s);
        for a in Split::ALL {
            for b in Split::ALL {
                if a < b {
                    assert!(sets[&a].is_disjoint(&sets[&b]));
                }
            }
        }
    }

    #[test]
    fn thousand_patients_sizes() {
        let m = manifest(1000, 1);
        for seed in 0..5 {
            let s = split_by_patient(&m, SplitFractions::default(), seed).unwrap();
            let count = |sp| s.entries_in(sp).count() as i64;
            assert!((count(Split::Train) - 700).abs() <= 20);
            assert!((count(Split::Validation) - 150).abs() <= 20);
            assert!((count(Split::Holdout) - 150).abs() <= 20);
        }
    }

    #[test]
    fn small_and_invalid() {
        let s = split_by_patient(&manifest(3, 1), SplitFractions::default(), 0).unwrap();
        for sp in Split::ALL {
            assert_eq!(s.entries_in(sp).count(), 1);
        }
        assert!(matches!(
            split_by_patient(&manifest(2, 5), SplitFractions::default(), 0),
            Err(DataError::TooFewPatients(2))
        ));
        let bad = SplitFractions { train: 0.7, validation: 0.2, holdout: 0.2 };
        assert!(matches!(split_by_patient(&manifest(10, 1), bad, 0), Err(DataError::BadFractions(_))));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut m = manifest(2, 1);
        m.entries[1].record_id = m.entries[0].record_id.clone();
        assert!(matches!(DatasetManifest::new(m.entries), Err(DataError::DuplicateRecord(_))));
    }

    #[test]
    fn json_roundtrip() {
        let m = split_by_patient(&manifest(5, 1), SplitFractions::default(), 3).unwrap();
        assert_eq!(DatasetManifest::from_json(&m.to_json()).unwrap(), m);
    }
}
