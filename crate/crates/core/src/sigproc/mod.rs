//! Preprocessing of lead-I records: resampling to a common rate, zero-phase
//! bandpass filtering and amplitude gating. Amplitudes stay in mV; no
//! normalization is applied.

mod butterworth;
pub mod cache;
mod resample;

pub use butterworth::{Biquad, SosFilter};
pub use resample::{resample, Resampler};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::EcgRecord;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SigprocError {
    #[error("empty input signal")]
    Empty,
    #[error("invalid sampling rates {from_rate} -> {to_rate}")]
    InvalidRate { from_rate: u32, to_rate: u32 },
    #[error("invalid band edges {low}..{high} Hz at {rate} Hz")]
    InvalidBand { low: f64, high: f64, rate: f64 },
    #[error("invalid preprocessing config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub target_rate: u32,
    pub band_low: f64,
    pub band_high: f64,
    pub amplitude_limit: f64,
    pub target_samples: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_rate: 250,
            band_low: 0.05,
            band_high: 40.0,
            amplitude_limit: 5.0,
            target_samples: 2500,
        }
    }
}

/// Length of the analysed window in seconds.
pub const WINDOW_SECONDS: u32 = 10;

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), SigprocError> {
        let nyq = self.target_rate as f64 / 2.0;
        if !(self.band_low > 0.0 && self.band_low < self.band_high && self.band_high < nyq) {
            return Err(SigprocError::InvalidBand {
                low: self.band_low,
                high: self.band_high,
                rate: self.target_rate as f64,
            });
        }
        if self.target_samples != (self.target_rate * WINDOW_SECONDS) as usize {
            return Err(SigprocError::InvalidConfig(format!(
                "target_samples {} must equal target_rate x {WINDOW_SECONDS}",
                self.target_samples
            )));
        }
        if !(self.amplitude_limit > 0.0) {
            return Err(SigprocError::InvalidConfig("amplitude_limit must be positive".into()));
        }
        Ok(())
    }
}

/// Zero-phase bandpass (order-4 Butterworth highpass and lowpass, applied
/// forward and backward).
pub fn bandpass(samples: &[f64], rate: f64, low: f64, high: f64) -> Result<Vec<f64>, SigprocError> {
    let filter = SosFilter::butter_bandpass(low, high, rate)?;
    Ok(filter.filtfilt(samples, rate))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum GateDecision {
    Keep { max_abs_mv: f64 },
    Reject { max_abs_mv: f64, reason: String },
}

impl GateDecision {
    pub fn is_keep(&self) -> bool {
        matches!(self, GateDecision::Keep { .. })
    }
}

/// Rejects a record iff its peak absolute voltage exceeds `limit_mv`.
pub fn amplitude_gate(samples: &[f64], limit_mv: f64) -> GateDecision {
    let max_abs_mv = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let decision = if max_abs_mv > limit_mv || max_abs_mv.is_nan() {
        GateDecision::Reject {
            max_abs_mv,
            reason: format!("amplitude {max_abs_mv:.3} mV exceeds {limit_mv} mV"),
        }
    } else {
        GateDecision::Keep { max_abs_mv }
    };
    log::debug!("amplitude gate: {decision:?}");
    decision
}

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Rejection {
    #[error("record too short: {seconds:.2} s")]
    TooShort { seconds: f64 },
    #[error("{reason}")]
    Amplitude { max_abs_mv: f64, reason: String },
    #[error("{0}")]
    Signal(String),
}

/// Preprocessing for one record with a reusable filter and resampler.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    config: PreprocessConfig,
    filter: SosFilter,
}

impl Preprocessor {
    pub fn new(config: PreprocessConfig) -> Result<Self, SigprocError> {
        config.validate()?;
        let filter = SosFilter::butter_bandpass(config.band_low, config.band_high, config.target_rate as f64)?;
        Ok(Self { config, filter })
    }

    pub fn config(&self) -> &PreprocessConfig {
        &self.config
    }

    /// Center-crop to 10 s, resample, bandpass, gate. Output is
    /// `target_samples` long and in mV.
    pub fn run(&self, record: &EcgRecord) -> Result<Vec<f32>, Rejection> {
        let rate = record.sampling_rate;
        let need = (rate * WINDOW_SECONDS) as usize;
        if rate == 0 || record.samples.len() < need {
            return Err(Rejection::TooShort {
                seconds: record.samples.len() as f64 / rate.max(1) as f64,
            });
        }
        let start = (record.samples.len() - need) / 2;
        let window = &record.samples[start..start + need];
        let resampled = resample(window, rate, self.config.target_rate)
            .map_err(|e| Rejection::Signal(e.to_string()))?;
        debug_assert_eq!(resampled.len(), self.config.target_samples);
        let filtered = self.filter.filtfilt(&resampled, self.config.target_rate as f64);
        match amplitude_gate(&filtered, self.config.amplitude_limit) {
            GateDecision::Keep { .. } => Ok(filtered.iter().map(|&v| v as f32).collect()),
            GateDecision::Reject { max_abs_mv, reason } => {
                Err(Rejection::Amplitude { max_abs_mv, reason })
            }
        }
    }
}

/// One-shot form of [`Preprocessor::run`].
pub fn preprocess(record: &EcgRecord, config: &PreprocessConfig) -> Result<Vec<f32>, Rejection> {
    Preprocessor::new(config.clone())
        .map_err(|e| Rejection::Signal(e.to_string()))?
        .run(record)
}
