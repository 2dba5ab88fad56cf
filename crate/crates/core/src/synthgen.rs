//! Parametric lead-I-like ECG with exactly known interval ground truth.
//!
//! Each beat is built relative to its QRS onset `o`:
//!
//! * P: Gaussian bump truncated at ±2σ on `[o - PR, o - PR + p_dur]`,
//!   `p_dur = min(110 ms, 0.7·PR)`; omitted when the P-wave is absent.
//! * QRS: biphasic piecewise-linear spike through `(o, 0)`, `(o + 0.4·QRS, R)`,
//!   `(o + 0.75·QRS, -0.25·R)`, `(o + QRS, 0)`.
//! * T: Gaussian bump truncated at ±2σ ending exactly at `o + QT`, of width
//!   `min(0.6·(QT - QRS), 200 ms)`.
//!
//! Truncated bumps are shifted so they reach zero at their support edges,
//! which makes onsets and offsets well-defined sample positions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use std::path::Path;

use crate::dataio::{write_wfdb_record, DataError, DatasetManifest, EcgRecord, IntervalLabels, ManifestEntry, SignalFormat};
use crate::exec::{self, Exec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid beat parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeatTemplateParams {
    pub pr_ms: f64,
    pub qrs_ms: f64,
    pub qt_ms: f64,
    pub hr_bpm: f64,
    pub p_amplitude: f64,
    pub r_amplitude: f64,
    pub t_amplitude: f64,
    pub p_present: bool,
    pub noise_rms: f64,
    pub wander_amplitude: f64,
    pub seed: u64,
}

impl Default for BeatTemplateParams {
    fn default() -> Self {
        Self {
            pr_ms: 160.0,
            qrs_ms: 96.0,
            qt_ms: 400.0,
            hr_bpm: 73.0,
            p_amplitude: 0.15,
            r_amplitude: 1.0,
            t_amplitude: 0.3,
            p_present: true,
            noise_rms: 0.0,
            wander_amplitude: 0.0,
            seed: 0,
        }
    }
}

impl BeatTemplateParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidParams(m));
        let finite = [
            self.pr_ms,
            self.qrs_ms,
            self.qt_ms,
            self.hr_bpm,
            self.p_amplitude,
            self.r_amplitude,
            self.t_amplitude,
            self.noise_rms,
            self.wander_amplitude,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("non-finite parameter".into());
        }
        if self.qrs_ms <= 0.0 || self.qt_ms <= self.qrs_ms {
            return bad(format!("need 0 < QRS < QT, got QRS {} QT {}", self.qrs_ms, self.qt_ms));
        }
        if self.pr_ms < 0.0 || (self.p_present && self.pr_ms <= 0.0) {
            return bad(format!("PR {} invalid for p_present={}", self.pr_ms, self.p_present));
        }
        if self.hr_bpm <= 0.0 || 60_000.0 / self.hr_bpm <= self.qt_ms {
            return bad(format!("beats overlap: HR {} with QT {}", self.hr_bpm, self.qt_ms));
        }
        if self.noise_rms < 0.0 || self.wander_amplitude < 0.0 {
            return bad("negative noise or wander amplitude".into());
        }
        Ok(())
    }

    pub fn labels(&self) -> IntervalLabels {
        let pr = if self.p_present { self.pr_ms } else { 0.0 };
        IntervalLabels {
            pr_ms: pr,
            qrs_ms: self.qrs_ms,
            qt_ms: self.qt_ms,
            hr_bpm: self.hr_bpm,
            pr_present: self.p_present,
        }
    }
}

/// Ground-truth fiducial times (seconds) of one rendered beat.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeatTruth {
    pub p_onset: Option<f64>,
    pub qrs_onset: f64,
    pub r_peak: f64,
    pub qrs_offset: f64,
    pub t_offset: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthRecord {
    pub record: EcgRecord,
    pub labels: IntervalLabels,
    /// Beats whose QRS onset lies inside the window, plus neighbours whose
    /// waves reach into it.
    pub beats: Vec<BeatTruth>,
}

pub const DEFAULT_RATE: u32 = 500;
pub const DURATION_S: f64 = 10.0;

/// Truncated Gaussian on `[start, start + width]` (±2σ), zero at the edges.
fn bump(t: f64, start: f64, width: f64, amp: f64) -> f64 {
    if t <= start || t >= start + width || width <= 0.0 {
        return 0.0;
    }
    let sigma = width / 4.0;
    let u = (t - (start + width / 2.0)) / sigma;
    let floor = (-2.0f64).exp();
    amp * ((-0.5 * u * u).exp() - floor) / (1.0 - floor)
}

fn qrs_shape(t: f64, onset: f64, width: f64, amp: f64) -> f64 {
    let x = (t - onset) / width;
    if x <= 0.0 || x >= 1.0 {
        0.0
    } else if x < 0.4 {
        amp * x / 0.4
    } else if x < 0.75 {
        amp - 1.25 * amp * (x - 0.4) / 0.35
    } else {
        -0.25 * amp * (1.0 - x) / 0.25
    }
}

pub fn p_wave_width_ms(pr_ms: f64) -> f64 {
    (0.7 * pr_ms).min(110.0)
}

pub fn t_wave_width_ms(qrs_ms: f64, qt_ms: f64) -> f64 {
    (0.6 * (qt_ms - qrs_ms)).min(200.0)
}

/// Renders a 10 s record at 500 Hz.
pub fn synth_record(params: &BeatTemplateParams) -> Result<SynthRecord, SynthError> {
    synth_record_at(params, DEFAULT_RATE)
}

pub fn synth_record_at(params: &BeatTemplateParams, rate: u32) -> Result<SynthRecord, SynthError> {
    params.validate()?;
    if rate == 0 {
        return Err(SynthError::InvalidParams("zero sampling rate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let rr = 60.0 / params.hr_bpm;
    let phase = rng.random::<f64>() * rr;
    let (pr, qrs, qt) = (params.pr_ms / 1e3, params.qrs_ms / 1e3, params.qt_ms / 1e3);
    let p_w = p_wave_width_ms(params.pr_ms) / 1e3;
    let t_w = t_wave_width_ms(params.qrs_ms, params.qt_ms) / 1e3;

    let mut beats = Vec::new();
    let mut k = -2i64;
    loop {
        let o = phase + k as f64 * rr;
        k += 1;
        if o + qt <= 0.0 {
            continue;
        }
        if o - pr >= DURATION_S {
            break;
        }
        beats.push(BeatTruth {
            p_onset: params.p_present.then_some(o - pr),
            qrs_onset: o,
            r_peak: o + 0.4 * qrs,
            qrs_offset: o + qrs,
            t_offset: o + qt,
        });
    }

    let n = (DURATION_S * rate as f64).round() as usize;
    let noise = Normal::new(0.0, params.noise_rms.max(0.0)).expect("valid sigma");
    let wander_freq = 0.15 + 0.2 * rng.random::<f64>();
    let wander_phase = std::f64::consts::TAU * rng.random::<f64>();
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / rate as f64;
            let mut v = 0.0;
            for b in &beats {
                if let Some(p0) = b.p_onset {
                    v += bump(t, p0, p_w, params.p_amplitude);
                }
                v += qrs_shape(t, b.qrs_onset, qrs, params.r_amplitude);
                v += bump(t, b.t_offset - t_w, t_w, params.t_amplitude);
            }
            v += params.wander_amplitude * (std::f64::consts::TAU * wander_freq * t + wander_phase).sin();
            if params.noise_rms > 0.0 {
                v += noise.sample(&mut rng);
            }
            v
        })
        .collect();
    let id = format!("synth-{}", params.seed);
    Ok(SynthRecord {
        record: EcgRecord {
            record_id: id.clone(),
            patient_id: id,
            samples,
            sampling_rate: rate,
            lead_name: "I".into(),
        },
        labels: params.labels(),
        beats,
    })
}

/// Mean, standard deviation and clipping range of one Gaussian parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClippedNormal {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl ClippedNormal {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let v: f64 = Normal::new(self.mean, self.std).expect("valid normal").sample(rng);
        v.clamp(self.min, self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamDistribution {
    pub pr: ClippedNormal,
    pub qrs: ClippedNormal,
    pub qt: ClippedNormal,
    pub hr: ClippedNormal,
    pub p_absent_fraction: f64,
    /// Uniform ranges `[lo, hi]`.
    pub p_amplitude: (f64, f64),
    pub r_amplitude: (f64, f64),
    pub t_amplitude: (f64, f64),
    pub noise_rms: (f64, f64),
    pub wander_amplitude: (f64, f64),
    pub sampling_rate: u32,
    /// Mean number of records per synthetic patient (at least 1).
    pub records_per_patient: f64,
}

impl Default for ParamDistribution {
    /// Adult clinical interval moments, clipped to physiologic ranges.
    fn default() -> Self {
        Self {
            pr: ClippedNormal { mean: 158.0, std: 43.9, min: 80.0, max: 300.0 },
            qrs: ClippedNormal { mean: 97.0, std: 24.6, min: 60.0, max: 200.0 },
            qt: ClippedNormal { mean: 394.0, std: 49.9, min: 280.0, max: 560.0 },
            hr: ClippedNormal { mean: 77.0, std: 20.3, min: 40.0, max: 140.0 },
            p_absent_fraction: 0.03,
            p_amplitude: (0.12, 0.30),
            r_amplitude: (0.6, 1.4),
            t_amplitude: (0.15, 0.5),
            noise_rms: (0.005, 0.05),
            wander_amplitude: (0.0, 0.15),
            sampling_rate: DEFAULT_RATE,
            records_per_patient: 1.5,
        }
    }
}

impl ParamDistribution {
    /// Same interval distribution with noise and baseline wander switched off.
    pub fn noiseless() -> Self {
        Self { noise_rms: (0.0, 0.0), wander_amplitude: (0.0, 0.0), ..Self::default() }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R, seed: u64) -> BeatTemplateParams {
        let uni = |rng: &mut R, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
        let pr = self.pr.sample(rng);
        let qrs = self.qrs.sample(rng);
        let qt = self.qt.sample(rng).max(qrs + 40.0);
        let mut hr = self.hr.sample(rng);
        // keep RR at least 40 ms longer than QT
        for _ in 0..100 {
            if 60_000.0 / hr > qt + 40.0 {
                break;
            }
            hr = self.hr.sample(rng);
        }
        if 60_000.0 / hr <= qt + 40.0 {
            hr = 60_000.0 / (qt + 41.0);
        }
        let p_present = !rng.random_bool(self.p_absent_fraction.clamp(0.0, 1.0));
        BeatTemplateParams {
            pr_ms: if p_present { pr } else { 0.0 },
            qrs_ms: qrs,
            qt_ms: qt,
            hr_bpm: hr,
            p_amplitude: uni(rng, self.p_amplitude),
            r_amplitude: uni(rng, self.r_amplitude),
            t_amplitude: uni(rng, self.t_amplitude),
            p_present,
            noise_rms: uni(rng, self.noise_rms),
            wander_amplitude: uni(rng, self.wander_amplitude),
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub manifest: DatasetManifest,
    pub records: Vec<EcgRecord>,
    pub params: Vec<BeatTemplateParams>,
}

/// Draws `n` parameter sets from `dist` and renders them. Output depends only
/// on `(n, dist, seed)`; rendering is data-parallel under [`Exec::Parallel`].
pub fn synth_corpus(n: usize, dist: &ParamDistribution, seed: u64, exec: Exec) -> SynthCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(n);
    let mut patients = Vec::with_capacity(n);
    let mut patient = 0usize;
    let extra_p = (dist.records_per_patient.max(1.0) - 1.0) / dist.records_per_patient.max(1.0);
    for i in 0..n {
        let record_seed: u64 = rng.random();
        params.push(dist.sample(&mut rng, record_seed));
        if i > 0 && !rng.random_bool(extra_p.clamp(0.0, 1.0)) {
            patient += 1;
        }
        patients.push(patient);
    }
    let rendered = exec::map(exec, &params, |p| {
        synth_record_at(p, dist.sampling_rate).expect("sampled parameters are valid")
    });
    let width = n.max(1).to_string().len();
    let mut records = Vec::with_capacity(n);
    let mut entries = Vec::with_capacity(n);
    for (i, (mut s, pat)) in rendered.into_iter().zip(patients).enumerate() {
        let id = format!("syn{i:0width$}");
        s.record.record_id = id.clone();
        s.record.patient_id = format!("pat{pat:0width$}");
        entries.push(ManifestEntry {
            record_id: id.clone(),
            patient_id: s.record.patient_id.clone(),
            locator: format!("records/{id}.hea"),
            labels: s.labels,
        });
        records.push(s.record);
    }
    let manifest = DatasetManifest::new(entries).expect("generated ids are unique");
    SynthCorpus { manifest, records, params }
}

/// ADC units per mV of written records (format 16, baseline 0).
pub const WRITE_GAIN: f64 = 1000.0;

/// Writes `records/<id>.hea` + `.dat`, `labels.csv` and `manifest.json`
/// under `dir`.
pub fn write_corpus(corpus: &SynthCorpus, dir: &Path) -> Result<(), DataError> {
    let io = |e: std::io::Error| DataError::Io(e.to_string());
    let rec_dir = dir.join("records");
    std::fs::create_dir_all(&rec_dir).map_err(io)?;
    for r in &corpus.records {
        let (hea, dat) = write_wfdb_record(r, WRITE_GAIN, 0, SignalFormat::Format16)?;
        std::fs::write(rec_dir.join(format!("{}.hea", r.record_id)), hea).map_err(io)?;
        std::fs::write(rec_dir.join(format!("{}.dat", r.record_id)), dat).map_err(io)?;
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| DataError::Csv(e.to_string());
    w.write_record(["record_id", "patient_id", "pr_ms", "qrs_ms", "qt_ms", "hr_bpm"]).map_err(csv_err)?;
    for e in &corpus.manifest.entries {
        let l = &e.labels;
        w.write_record([
            e.record_id.clone(),
            e.patient_id.clone(),
            l.pr_ms.to_string(),
            l.qrs_ms.to_string(),
            l.qt_ms.to_string(),
            l.hr_bpm.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| DataError::Csv(e.to_string()))?;
    std::fs::write(dir.join("labels.csv"), bytes).map_err(io)?;
    std::fs::write(dir.join("manifest.json"), corpus.manifest.to_json()).map_err(io)?;
    Ok(())
}
