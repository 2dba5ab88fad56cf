use leadi_core::delineate::{delineate, delineate_record, detect_r_peaks, intervals_from_fiducials, BeatFiducials, DelineatorConfig};
use leadi_core::exec::Exec;
use leadi_core::synthgen::{synth_corpus, synth_record, BeatTemplateParams, ParamDistribution};
use proptest::prelude::*;

const FS: f64 = 500.0;

fn cfg() -> DelineatorConfig {
    DelineatorConfig::default()
}

#[test]
fn noisy_peaks_within_two_samples() {
    for seed in 0..20 {
        let p = BeatTemplateParams { hr_bpm: 60.0, noise_rms: 0.05, seed, ..Default::default() };
        let s = synth_record(&p).unwrap();
        let peaks = detect_r_peaks(&s.record.samples, FS, &cfg()).unwrap();
        let truth: Vec<f64> = s.beats.iter().map(|b| b.r_peak * FS).filter(|t| (0.0..5000.0).contains(t)).collect();
        let hits = truth.iter().filter(|t| peaks.iter().any(|&p| (p as f64 - **t).abs() <= 2.0)).count();
        assert!(hits >= 9, "seed {seed}: {hits} of {} ({peaks:?})", truth.len());
    }
}

#[test]
fn absent_p_is_reported_absent() {
    let (mut absent, mut total) = (0, 0);
    for seed in 0..10 {
        let p = BeatTemplateParams { p_present: false, pr_ms: 0.0, noise_rms: 0.01, seed, ..Default::default() };
        let d = delineate_record(&synth_record(&p).unwrap().record.samples, 500, &cfg()).unwrap();
        total += d.beats.len();
        absent += d.beats.iter().filter(|b| b.p_onset.is_none()).count();
        assert!(!d.intervals.pr_present, "seed {seed}");
    }
    assert!(absent as f64 >= 0.9 * total as f64, "{absent} of {total}");
}

#[test]
fn mixed_beats_average() {
    // PR of 150 ms and 170 ms at 500 Hz is 75 and 85 samples
    let beat = |r: usize, pr: usize| BeatFiducials { p_onset: Some(r - 20 - pr), qrs_onset: r - 20, r_peak: r, qrs_offset: r + 25, t_offset: Some(r + 180) };
    let beats = [beat(500, 75), beat(1000, 85), beat(1500, 75), beat(2000, 85)];
    let r: Vec<usize> = beats.iter().map(|b| b.r_peak).collect();
    let est = intervals_from_fiducials(&beats, &r, FS, &cfg()).unwrap();
    assert!((est.pr_ms.unwrap() - 160.0).abs() < 1e-9);
    assert!((est.qrs_ms.unwrap() - 90.0).abs() < 1e-9);
    assert!((est.qt_ms.unwrap() - 400.0).abs() < 1e-9);
    assert!((est.hr_bpm.unwrap() - 60.0).abs() < 1e-9);
}

#[test]
fn shift_equivariance() {
    let p = BeatTemplateParams { hr_bpm: 70.0, noise_rms: 0.0, seed: 3, ..Default::default() };
    let x = synth_record(&p).unwrap().record.samples;
    let peaks = detect_r_peaks(&x, FS, &cfg()).unwrap();
    let beats = delineate(&x, FS, &peaks, &cfg()).unwrap();
    for k in [1usize, 7, 50, 333] {
        let mut y = vec![x[0]; k];
        y.extend_from_slice(&x[..x.len() - k]);
        let shifted_peaks = detect_r_peaks(&y, FS, &cfg()).unwrap();
        let shifted = delineate(&y, FS, &shifted_peaks, &cfg()).unwrap();
        // beats well inside both windows
        let inner = |b: &BeatFiducials| b.r_peak > 600 && b.r_peak + k + 600 < x.len();
        let mut compared = 0;
        for b in beats.iter().filter(|b| inner(b)) {
            let s = shifted.iter().find(|s| s.r_peak == b.r_peak + k).unwrap_or_else(|| panic!("k={k}: no beat at {}", b.r_peak + k));
            assert_eq!(s.qrs_onset, b.qrs_onset + k);
            assert_eq!(s.qrs_offset, b.qrs_offset + k);
            assert_eq!(s.p_onset, b.p_onset.map(|v| v + k));
            assert_eq!(s.t_offset, b.t_offset.map(|v| v + k));
            compared += 1;
        }
        assert!(compared >= 6, "k={k}: only {compared} beats compared");
    }
}

#[test]
fn noiseless_corpus_mae_within_20ms() {
    let corpus = synth_corpus(60, &ParamDistribution::noiseless(), 17, Exec::Parallel);
    let (mut pr, mut qrs, mut qt) = (vec![], vec![], vec![]);
    for (rec, e) in corpus.records.iter().zip(&corpus.manifest.entries) {
        let d = delineate_record(&rec.samples, rec.sampling_rate, &cfg()).unwrap();
        let l = e.labels;
        if let (Some(v), true) = (d.intervals.pr_ms, l.pr_present) {
            pr.push((v - l.pr_ms).abs());
        }
        if let Some(v) = d.intervals.qrs_ms {
            qrs.push((v - l.qrs_ms).abs());
        }
        if let Some(v) = d.intervals.qt_ms {
            qt.push((v - l.qt_ms).abs());
        }
    }
    for (name, errs) in [("PR", pr), ("QRS", qrs), ("QT", qt)] {
        let mae = errs.iter().sum::<f64>() / errs.len() as f64;
        println!("{name}: MAE {mae:.2} ms over {}", errs.len());
        assert!(errs.len() >= 40 && mae <= 20.0, "{name}: MAE {mae} over {}", errs.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fiducials_are_ordered(seed in 0u64..10_000, noise in 0.0f64..0.05) {
        let dist = ParamDistribution { noise_rms: (noise, noise), ..ParamDistribution::default() };
        let corpus = synth_corpus(1, &dist, seed, Exec::Sequential);
        if let Ok(d) = delineate_record(&corpus.records[0].samples, 500, &cfg()) {
            prop_assert!(d.beats.iter().all(BeatFiducials::is_ordered));
            prop_assert!(d.r_peaks.windows(2).all(|w| (w[1] - w[0]) as f64 >= 0.2 * FS));
        }
    }
}
