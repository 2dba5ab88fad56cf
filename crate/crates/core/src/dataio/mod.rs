//! Waveform and label ingestion plus patient-disjoint dataset splits.

pub mod labels;
pub mod manifest;
pub mod wfdb;

pub use labels::{parse_label_table, ColumnMap, LabelTable, SkippedRow};
pub use manifest::{split_by_patient, DatasetManifest, ManifestEntry, Split, SplitFractions};
pub use wfdb::{parse_wfdb_record, read_wfdb_record, write_wfdb_record, SignalFormat};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One lead of a sampled ECG, in mV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcgRecord {
    pub record_id: String,
    pub patient_id: String,
    pub samples: Vec<f64>,
    pub sampling_rate: u32,
    pub lead_name: String,
}

impl EcgRecord {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sampling_rate as f64
    }
}

/// Interval labels. A PR of zero means no P-wave could be identified.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalLabels {
    pub pr_ms: f64,
    pub qrs_ms: f64,
    pub qt_ms: f64,
    pub hr_bpm: f64,
    pub pr_present: bool,
}

impl IntervalLabels {
    /// Builds labels with `pr_present` derived from `pr_ms > 0`.
    pub fn new(pr_ms: f64, qrs_ms: f64, qt_ms: f64, hr_bpm: f64) -> Result<Self, DataError> {
        let labels = Self { pr_ms, qrs_ms, qt_ms, hr_bpm, pr_present: pr_ms > 0.0 };
        labels.validate()?;
        Ok(labels)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: &str| Err(DataError::InvalidLabels(msg.to_string()));
        if !(self.pr_ms >= 0.0) {
            return bad("PR must be >= 0");
        }
        if !(self.qrs_ms > 0.0) {
            return bad("QRS must be > 0");
        }
        if !(self.qt_ms > self.qrs_ms) {
            return bad("QT must exceed QRS");
        }
        if !(self.hr_bpm > 0.0) {
            return bad("HR must be > 0");
        }
        if self.pr_present != (self.pr_ms > 0.0) {
            return bad("pr_present must equal PR > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported signal format {0}")]
    UnsupportedFormat(String),
    #[error("lead {0:?} not found")]
    LeadNotFound(String),
    #[error("truncated signal payload: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("zero gain for signal {0:?}")]
    ZeroGain(String),
    #[error("sample {value} mV quantizes to {adc}, outside the {format} range")]
    Overflow { value: f64, adc: i64, format: u16 },
    #[error("invalid labels: {0}")]
    InvalidLabels(String),
    #[error("missing required column {0:?}")]
    MissingColumn(String),
    #[error("empty table")]
    EmptyTable,
    #[error("csv error: {0}")]
    Csv(String),
    #[error("duplicate record id {0:?}")]
    DuplicateRecord(String),
    #[error("need at least 3 patients to split, got {0}")]
    TooFewPatients(usize),
    #[error("split fractions must be nonnegative and sum to 1, got {0:?}")]
    BadFractions([f64; 3]),
    #[error("empty manifest")]
    EmptyManifest,
    #[error("io: {0}")]
    Io(String),
}
