use std::f64::consts::PI;

use leadi_core::dataio::EcgRecord;
use leadi_core::sigproc::{bandpass, preprocess, resample, PreprocessConfig, Rejection, Resampler};
use proptest::prelude::*;

const RATE: f64 = 250.0;

fn sine(freq: f64, rate: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| (2.0 * PI * freq * i as f64 / rate).sin()).collect()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Drops the first and last second.
fn interior(x: &[f64]) -> &[f64] {
    let e = RATE as usize;
    &x[e..x.len() - e]
}

#[test]
fn sine_survives_decimation() {
    let x = sine(5.0, 500.0, 5000);
    let y = resample(&x, 500, 250).unwrap();
    assert_eq!(y.len(), 2500);
    let expect = sine(5.0, 250.0, 2500);
    let worst = interior(&y).iter().zip(interior(&expect)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("5 Hz 500->250 interior max error {worst:.2e}");
    assert!(worst < 0.01);
}

#[test]
fn dc_is_removed() {
    let y = bandpass(&vec![1.0; 2500], RATE, 0.05, 40.0).unwrap();
    let worst = interior(&y).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    println!("DC residue {worst:.2e}");
    assert!(worst < 0.01);
}

#[test]
fn mains_is_attenuated() {
    let x = sine(60.0, RATE, 2500);
    let y = bandpass(&x, RATE, 0.05, 40.0).unwrap();
    let db = 20.0 * (rms(interior(&y)) / rms(interior(&x))).log10();
    println!("60 Hz gain {db:.1} dB");
    assert!(db <= -20.0);
}

#[test]
fn passband_tone_keeps_amplitude() {
    let x = sine(10.0, RATE, 2500);
    let y = bandpass(&x, RATE, 0.05, 40.0).unwrap();
    let ratio = rms(interior(&y)) / rms(interior(&x));
    assert!((ratio - 1.0).abs() < 0.01, "{ratio}");
}

#[test]
fn symmetric_pulse_peak_stays() {
    for center in [600usize, 1250, 1901] {
        let x: Vec<f64> = (0..2500).map(|i| (-((i as f64 - center as f64) / 4.0).powi(2)).exp()).collect();
        let y = bandpass(&x, RATE, 0.05, 40.0).unwrap();
        let peak = y.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert!(peak.abs_diff(center) <= 1, "peak at {peak}, expected {center}");
    }
}

fn record(samples: Vec<f64>, rate: u32) -> EcgRecord {
    EcgRecord { record_id: "r".into(), patient_id: "p".into(), samples, sampling_rate: rate, lead_name: "I".into() }
}

#[test]
fn long_records_are_center_cropped() {
    // a marker pulse in the middle of a 14 s record lands mid-window
    let rate = 500;
    let mut x = vec![0.0; 14 * rate as usize];
    x[7 * rate as usize] = 1.0;
    let y = preprocess(&record(x, rate), &PreprocessConfig::default()).unwrap();
    assert_eq!(y.len(), 2500);
    let peak = y.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    assert!(peak.abs_diff(1250) <= 1, "{peak}");
}

#[test]
fn short_and_saturated_records_are_rejected() {
    let cfg = PreprocessConfig::default();
    assert!(matches!(preprocess(&record(vec![0.0; 4000], 500), &cfg), Err(Rejection::TooShort { .. })));
    let mut x = sine(1.0, 500.0, 5000);
    x[2500..2600].fill(9.0);
    assert!(matches!(preprocess(&record(x, 500), &cfg), Err(Rejection::Amplitude { .. })));
}

proptest! {
    #[test]
    fn resampled_length(n in 10usize..3000, rates in prop::sample::select(vec![(500u32, 250u32), (250, 500), (1000, 250), (360, 250), (250, 250)])) {
        let (from, to) = rates;
        let y = resample(&vec![0.5; n], from, to).unwrap();
        prop_assert_eq!(y.len(), Resampler::new(from, to).unwrap().output_len(n));
        prop_assert_eq!(y.len(), ((n as u64 * to as u64) as f64 / from as f64).round() as usize);
    }

    #[test]
    fn resampling_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..100) {
        let x: Vec<f64> = (0..400).map(|i| ((i as u64 * 31 + seed) % 17) as f64 / 17.0).collect();
        let z: Vec<f64> = (0..400).map(|i| ((i as u64 * 7 + seed) % 13) as f64 / 13.0).collect();
        let mix: Vec<f64> = x.iter().zip(&z).map(|(p, q)| a * p + b * q).collect();
        let (rx, rz, rm) = (resample(&x, 500, 250).unwrap(), resample(&z, 500, 250).unwrap(), resample(&mix, 500, 250).unwrap());
        for i in 0..rm.len() {
            prop_assert!((rm[i] - (a * rx[i] + b * rz[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn filtering_is_time_reversal_symmetric(seed in 0u64..100) {
        // zero phase: away from the edges, filtering the reversed signal gives
        // the reversed output
        let x: Vec<f64> = (0..1000).map(|i| (((i as u64 * 2654435761 + seed) % 1000) as f64 / 500.0) - 1.0).collect();
        let y = bandpass(&x, RATE, 5.0, 40.0).unwrap();
        let rev: Vec<f64> = x.iter().rev().copied().collect();
        let yr = bandpass(&rev, RATE, 5.0, 40.0).unwrap();
        let yr: Vec<f64> = yr.into_iter().rev().collect();
        for i in 250..750 {
            prop_assert!((y[i] - yr[i]).abs() < 1e-6, "{} vs {}", y[i], yr[i]);
        }
    }
}
