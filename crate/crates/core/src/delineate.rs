//! Heuristic single-lead delineation: R-peak detection, per-beat fiducial
//! search windows, per-beat intervals averaged over the record.
//!
//! R peaks: 5-15 Hz bandpass, five-point derivative, squaring, centered
//! moving-window integration, adaptive signal/noise peak levels with a
//! refractory period and search-back for missed beats.
//!
//! Per beat, on a 40 Hz low-passed copy of the signal:
//! * QRS onset: walking back from the steepest upstroke before R until the
//!   slope drops below a fraction of that maximum.
//! * QRS offset: from the S trough, walking forward past the steepest return
//!   upstroke until the slope drops below the same fraction of it.
//! * T offset: tangent at the steepest descent after the T peak, intersected
//!   with the isoelectric level taken at QRS onset.
//! * P onset: tangent at the steepest ascent before the P peak, intersected
//!   with a straight baseline across the search window. The P-wave counts as
//!   absent when its peak is below a fraction of the R amplitude.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sigproc::{resample, SigprocError, SosFilter};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DelineateError {
    #[error("no delineated beats")]
    NoBeats,
    #[error(transparent)]
    Signal(#[from] SigprocError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DelineatorConfig {
    pub internal_rate: u32,
    pub qrs_band_hz: (f64, f64),
    pub smoothing_hz: f64,
    pub integration_ms: f64,
    pub refractory_ms: f64,
    pub searchback_factor: f64,
    pub r_search_ms: f64,
    pub qrs_window_ms: f64,
    pub slope_fraction: f64,
    pub derivative_ms: f64,
    /// P search window before QRS onset, `(far, near)` in ms.
    pub p_window_ms: (f64, f64),
    pub p_presence_fraction: f64,
    /// T search window after QRS offset, `(near, far)` in ms.
    pub t_window_ms: (f64, f64),
    /// Minimum fraction of beats with a P-wave for the record to get a PR.
    pub pr_min_beat_fraction: f64,
}

impl Default for DelineatorConfig {
    fn default() -> Self {
        Self {
            internal_rate: 500,
            qrs_band_hz: (5.0, 15.0),
            smoothing_hz: 40.0,
            integration_ms: 150.0,
            refractory_ms: 200.0,
            searchback_factor: 1.66,
            r_search_ms: 100.0,
            qrs_window_ms: 120.0,
            slope_fraction: 0.3,
            derivative_ms: 4.0,
            p_window_ms: (300.0, 50.0),
            p_presence_fraction: 0.08,
            t_window_ms: (80.0, 450.0),
            pr_min_beat_fraction: 0.5,
        }
    }
}

/// Fiducial sample indices of one beat.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeatFiducials {
    pub p_onset: Option<usize>,
    pub qrs_onset: usize,
    pub r_peak: usize,
    pub qrs_offset: usize,
    pub t_offset: Option<usize>,
}

impl BeatFiducials {
    pub fn is_ordered(&self) -> bool {
        self.p_onset.is_none_or(|p| p < self.qrs_onset)
            && self.qrs_onset < self.r_peak
            && self.r_peak < self.qrs_offset
            && self.t_offset.is_none_or(|t| self.qrs_offset < t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    pub pr_ms: Option<f64>,
    pub qrs_ms: Option<f64>,
    pub qt_ms: Option<f64>,
    pub hr_bpm: Option<f64>,
    pub pr_present: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delineation {
    /// Rate the fiducial indices refer to.
    pub rate: u32,
    pub r_peaks: Vec<usize>,
    pub beats: Vec<BeatFiducials>,
    pub intervals: IntervalEstimate,
}

fn ms(v: f64, rate: f64) -> usize {
    (v * rate / 1000.0).round() as usize
}

fn zero_phase(filter: Result<SosFilter, SigprocError>, x: &[f64], rate: f64) -> Result<Vec<f64>, SigprocError> {
    Ok(filter?.filtfilt(x, rate))
}

fn smooth(x: &[f64], rate: f64, cfg: &DelineatorConfig) -> Result<Vec<f64>, SigprocError> {
    if cfg.smoothing_hz >= rate / 2.0 {
        return Ok(x.to_vec());
    }
    zero_phase(SosFilter::butter_lowpass(4, cfg.smoothing_hz, rate), x, rate)
}

fn argmax_by(range: std::ops::Range<usize>, f: impl Fn(usize) -> f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for i in range {
        let v = f(i);
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// R-peak sample indices in increasing order, at least the refractory period
/// apart. A flat signal yields none.
pub fn detect_r_peaks(samples: &[f64], rate: f64, cfg: &DelineatorConfig) -> Result<Vec<usize>, SigprocError> {
    let n = samples.len();
    if n < 5 || samples.iter().all(|v| v.abs() < 1e-9) {
        return Ok(vec![]);
    }
    let (lo, hi) = cfg.qrs_band_hz;
    let band = zero_phase(SosFilter::butter_bandpass(lo, hi, rate), samples, rate)?;
    let mut energy = vec![0.0; n];
    for i in 2..n - 2 {
        let d = (2.0 * band[i + 1] + band[i + 2] - band[i - 2] - 2.0 * band[i - 1]) / 8.0;
        energy[i] = d * d;
    }
    let half = ms(cfg.integration_ms, rate) / 2;
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + energy[i];
    }
    let mwi: Vec<f64> = (0..n)
        .map(|i| {
            let a = i.saturating_sub(half);
            let b = (i + half + 1).min(n);
            (prefix[b] - prefix[a]) / (b - a) as f64
        })
        .collect();

    let refractory = ms(cfg.refractory_ms, rate).max(1);
    // local maxima, merged within the refractory period
    let mut cands: Vec<usize> = Vec::new();
    for i in 0..n {
        let left = i == 0 || mwi[i] > mwi[i - 1];
        let right = i + 1 == n || mwi[i] >= mwi[i + 1];
        if left && right && mwi[i] > 0.0 {
            match cands.last_mut() {
                Some(last) if i - *last < refractory => {
                    if mwi[i] > mwi[*last] {
                        *last = i;
                    }
                }
                _ => cands.push(i),
            }
        }
    }
    let init = ms(2000.0, rate).min(n);
    let peak0 = mwi[..init].iter().copied().fold(0.0, f64::max);
    let mut spki = peak0 / 3.0;
    let mut npki = mwi[..init].iter().sum::<f64>() / init as f64 / 2.0;
    let thr = |s: f64, nk: f64| nk + 0.25 * (s - nk);
    let mut accepted: Vec<usize> = Vec::new();
    let mut rejected: Vec<usize> = Vec::new();
    for &c in &cands {
        let t = thr(spki, npki);
        if mwi[c] > t {
            if let Some(&prev) = accepted.last() {
                let rr: Vec<usize> = accepted.windows(2).rev().take(8).map(|w| w[1] - w[0]).collect();
                if !rr.is_empty() {
                    let mean_rr = rr.iter().sum::<usize>() as f64 / rr.len() as f64;
                    if (c - prev) as f64 > cfg.searchback_factor * mean_rr {
                        let missed = rejected
                            .iter()
                            .copied()
                            .filter(|&r| r > prev + refractory && r + refractory < c && mwi[r] > t / 2.0)
                            .max_by(|&a, &b| mwi[a].total_cmp(&mwi[b]));
                        if let Some(m) = missed {
                            spki = 0.25 * mwi[m] + 0.75 * spki;
                            accepted.push(m);
                        }
                    }
                }
            }
            spki = 0.125 * mwi[c] + 0.875 * spki;
            accepted.push(c);
        } else {
            npki = 0.125 * mwi[c] + 0.875 * npki;
            rejected.push(c);
        }
    }

    let sm = smooth(samples, rate, cfg)?;
    let w = ms(cfg.r_search_ms, rate);
    let mut peaks: Vec<usize> = accepted
        .iter()
        .filter_map(|&c| argmax_by(c.saturating_sub(w)..(c + w + 1).min(n), |i| sm[i].abs()))
        .collect();
    peaks.sort_unstable();
    peaks.dedup_by(|b, a| *b - *a < refractory);
    Ok(peaks)
}

/// Fiducials for every beat whose QRS bounds can be located.
pub fn delineate(
    samples: &[f64],
    rate: f64,
    r_peaks: &[usize],
    cfg: &DelineatorConfig,
) -> Result<Vec<BeatFiducials>, SigprocError> {
    let n = samples.len();
    let s = smooth(samples, rate, cfg)?;
    let h = (ms(cfg.derivative_ms, rate) / 2).max(1);
    let d: Vec<f64> = (0..n)
        .map(|i| {
            let a = i.saturating_sub(h);
            let b = (i + h).min(n - 1);
            if b > a { (s[b] - s[a]) / (b - a) as f64 } else { 0.0 }
        })
        .collect();
    let qw = ms(cfg.qrs_window_ms, rate);
    let frac = cfg.slope_fraction;
    let mut beats = Vec::new();
    let mut prev_t_off: Option<usize> = None;

    for (j, &r) in r_peaks.iter().enumerate() {
        if r >= n {
            continue;
        }
        let sign = if s[r] >= 0.0 { 1.0 } else { -1.0 };
        let y = |i: usize| sign * s[i];
        let dy = |i: usize| sign * d[i];

        // QRS onset
        let lo = r.saturating_sub(qw);
        let Some(i_up) = argmax_by(lo..r, dy) else { continue };
        let up_max = dy(i_up);
        if up_max <= 0.0 {
            continue;
        }
        let Some(onset) = (lo..=i_up).rev().find(|&i| dy(i) < frac * up_max) else { continue };

        // QRS offset
        let hi = (r + qw).min(n - 1);
        let Some(i_s) = argmax_by(r..hi + 1, |i| -y(i)) else { continue };
        let down = (r..=i_s).map(|i| -dy(i)).fold(0.0, f64::max);
        if down <= 0.0 {
            continue;
        }
        // a return upstroke steeper than a tenth of the downstroke ends the QRS
        let offset = match argmax_by(i_s..hi + 1, dy) {
            Some(i_ret) if dy(i_ret) >= 0.1 * down => {
                let thr_off = frac * dy(i_ret);
                (i_ret..=hi).find(|&i| dy(i) < thr_off).unwrap_or(hi)
            }
            _ => i_s,
        };
        if !(onset < r && r < offset) {
            continue;
        }
        let base = y(onset);
        let r_amp = y(r) - base;

        // T offset
        let t_start = offset + ms(cfg.t_window_ms.0, rate);
        let mut t_end = (offset + ms(cfg.t_window_ms.1, rate)).min(n - 1);
        if let Some(&next) = r_peaks.get(j + 1) {
            t_end = t_end.min(next.saturating_sub(qw));
        }
        let t_offset = (t_start < t_end)
            .then(|| {
                let tp = argmax_by(t_start..t_end + 1, |i| (y(i) - base).abs())?;
                let ts = if y(tp) >= base { 1.0 } else { -1.0 };
                let z = |i: usize| ts * (y(i) - base);
                let peak = z(tp);
                // the wave must return most of the way to baseline inside the window
                let fall_end = (tp..=t_end).find(|&i| z(i) <= 0.2 * peak)?;
                let i_d = argmax_by(tp..fall_end + 1, |i| -ts * dy(i))?;
                let slope = ts * dy(i_d);
                if slope >= 0.0 || z(i_d) <= 0.0 {
                    return None;
                }
                let t = i_d as f64 + z(i_d) / -slope;
                Some((t.round() as usize).min(n - 1))
            })
            .flatten()
            .filter(|&t| t > offset);

        // P onset
        let mut p_lo = onset.saturating_sub(ms(cfg.p_window_ms.0, rate));
        if let Some(pt) = prev_t_off {
            p_lo = p_lo.max(pt);
        }
        let p_hi = onset.saturating_sub(ms(cfg.p_window_ms.1, rate));
        let p_onset = (p_hi > p_lo + ms(40.0, rate))
            .then(|| {
                let line_slope = (y(onset) - y(p_lo)) / (onset - p_lo) as f64;
                let z = |i: usize| y(i) - (y(p_lo) + line_slope * (i - p_lo) as f64);
                let pp = argmax_by(p_lo..p_hi + 1, z)?;
                if z(pp) < cfg.p_presence_fraction * r_amp {
                    return None;
                }
                let i_u = argmax_by(p_lo..pp + 1, |i| dy(i) - line_slope)?;
                let slope = dy(i_u) - line_slope;
                if slope <= 0.0 {
                    return None;
                }
                let t = (i_u as f64 - z(i_u) / slope).max(p_lo as f64);
                Some(t.round() as usize)
            })
            .flatten()
            .filter(|&p| p < onset);

        let beat = BeatFiducials { p_onset, qrs_onset: onset, r_peak: r, qrs_offset: offset, t_offset };
        debug_assert!(beat.is_ordered());
        prev_t_off = t_offset.or(Some(offset));
        beats.push(beat);
    }
    Ok(beats)
}

/// Per-beat intervals averaged over the beats that have the needed fiducials.
/// Heart rate comes from the first and last R peak.
pub fn intervals_from_fiducials(
    beats: &[BeatFiducials],
    r_peaks: &[usize],
    rate: f64,
    cfg: &DelineatorConfig,
) -> Result<IntervalEstimate, DelineateError> {
    if beats.is_empty() {
        return Err(DelineateError::NoBeats);
    }
    let to_ms = |a: usize, b: usize| (b as f64 - a as f64) * 1000.0 / rate;
    let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let pr: Vec<f64> = beats.iter().filter_map(|b| b.p_onset.map(|p| to_ms(p, b.qrs_onset))).collect();
    let pr_present = pr.len() as f64 >= cfg.pr_min_beat_fraction * beats.len() as f64 && !pr.is_empty();
    let qrs = beats.iter().map(|b| to_ms(b.qrs_onset, b.qrs_offset)).collect();
    let qt = beats.iter().filter_map(|b| b.t_offset.map(|t| to_ms(b.qrs_onset, t))).collect();
    let hr = match (r_peaks.first(), r_peaks.last()) {
        (Some(&a), Some(&b)) if b > a => Some(60.0 * (r_peaks.len() - 1) as f64 / ((b - a) as f64 / rate)),
        _ => None,
    };
    Ok(IntervalEstimate {
        pr_ms: if pr_present { mean(pr) } else { None },
        qrs_ms: mean(qrs),
        qt_ms: mean(qt),
        hr_bpm: hr,
        pr_present,
    })
}

/// Full pipeline on one record: resample to the internal rate, detect,
/// delineate and average.
pub fn delineate_record(samples: &[f64], rate: u32, cfg: &DelineatorConfig) -> Result<Delineation, DelineateError> {
    let x = if rate == cfg.internal_rate {
        samples.to_vec()
    } else {
        resample(samples, rate, cfg.internal_rate)?
    };
    let fs = cfg.internal_rate as f64;
    let r_peaks = detect_r_peaks(&x, fs, cfg)?;
    let beats = delineate(&x, fs, &r_peaks, cfg)?;
    let intervals = intervals_from_fiducials(&beats, &r_peaks, fs, cfg)?;
    Ok(Delineation { rate: cfg.internal_rate, r_peaks, beats, intervals })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{synth_record, BeatTemplateParams};

    fn cfg() -> DelineatorConfig {
        DelineatorConfig::default()
    }

    #[test]
    fn flat_signal_has_no_peaks() {
        assert!(detect_r_peaks(&vec![0.0; 5000], 500.0, &cfg()).unwrap().is_empty());
    }

    #[test]
    fn hr60_ten_peaks() {
        for seed in 0..10 {
            let p = BeatTemplateParams { hr_bpm: 60.0, seed, ..Default::default() };
            let s = synth_record(&p).unwrap();
            let peaks = detect_r_peaks(&s.record.samples, 500.0, &cfg()).unwrap();
            let truth: Vec<f64> = s.beats.iter().map(|b| b.r_peak * 500.0).filter(|&t| (0.0..5000.0).contains(&t)).collect();
            assert_eq!(peaks.len(), 10, "seed {seed}: {peaks:?} vs {truth:?}");
            for (p, t) in peaks.iter().zip(&truth) {
                assert!((*p as f64 - t).abs() <= 1.0, "seed {seed}: {p} vs {t}");
            }
        }
    }

    #[test]
    fn average_and_hr() {
        let beats = vec![
            BeatFiducials { p_onset: Some(0), qrs_onset: 75, r_peak: 95, qrs_offset: 120, t_offset: Some(275) },
            BeatFiducials { p_onset: Some(500), qrs_onset: 585, r_peak: 605, qrs_offset: 630, t_offset: Some(785) },
        ];
        let peaks: Vec<usize> = (0..10).map(|i| 100 + 500 * i).collect();
        let e = intervals_from_fiducials(&beats, &peaks, 500.0, &cfg()).unwrap();
        assert!((e.pr_ms.unwrap() - 160.0).abs() < 1e-9);
        assert!((e.hr_bpm.unwrap() - 60.0).abs() < 1e-9);
        assert!((e.qrs_ms.unwrap() - 90.0).abs() < 1e-9);
        assert!((e.qt_ms.unwrap() - 400.0).abs() < 1e-9);
        assert_eq!(intervals_from_fiducials(&[], &peaks, 500.0, &cfg()), Err(DelineateError::NoBeats));
    }

    #[test]
    fn noiseless_intervals() {
        let p = BeatTemplateParams::default();
        let s = synth_record(&p).unwrap();
        let d = delineate_record(&s.record.samples, 500, &cfg()).unwrap();
        let e = d.intervals;
        assert!((e.pr_ms.unwrap() - 160.0).abs() <= 10.0, "{e:?}");
        assert!((e.qt_ms.unwrap() - 400.0).abs() <= 20.0, "{e:?}");
        assert!((e.qrs_ms.unwrap() - 96.0).abs() <= 20.0, "{e:?}");
        assert!(d.beats.iter().all(BeatFiducials::is_ordered));
    }
}
