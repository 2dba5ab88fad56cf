use std::collections::{BTreeMap, BTreeSet};

use leadi_core::dataio::{
    parse_label_table, parse_wfdb_record, read_wfdb_record, split_by_patient, write_wfdb_record, ColumnMap,
    DatasetManifest, EcgRecord, IntervalLabels, ManifestEntry, SignalFormat, Split, SplitFractions,
};
use leadi_core::exec::Exec;
use leadi_core::synthgen::{synth_corpus, write_corpus, ParamDistribution, WRITE_GAIN};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A record whose samples sit exactly on the ADC grid of `(gain, baseline)`.
fn grid_record(rng: &mut ChaCha8Rng, format: SignalFormat, i: usize) -> (EcgRecord, f64, i64) {
    let (lo, hi) = format.adc_range();
    let gain = [200.0, 1000.0, 1.0 / 0.0048828125, 409.6][rng.random_range(0..4)];
    let baseline = rng.random_range(-100..=100);
    let n = rng.random_range(1..600);
    let samples = (0..n).map(|_| (rng.random_range(lo - baseline.min(0)..=hi - baseline.max(0)) - baseline) as f64 / gain).collect();
    let rate = [250, 360, 500, 1000][rng.random_range(0..4)];
    (
        EcgRecord { record_id: format!("rt{i}"), patient_id: format!("rt{i}"), samples, sampling_rate: rate, lead_name: "I".into() },
        gain,
        baseline,
    )
}

fn assert_round_trip(format: SignalFormat) {
    let mut rng = ChaCha8Rng::seed_from_u64(format.code() as u64);
    for i in 0..1000 {
        let (rec, gain, baseline) = grid_record(&mut rng, format, i);
        let (hea, dat) = write_wfdb_record(&rec, gain, baseline, format).unwrap();
        let back = parse_wfdb_record(&hea, &dat, "I").unwrap();
        assert_eq!(back.samples, rec.samples, "record {i}, format {}", format.code());
        assert_eq!(back.sampling_rate, rec.sampling_rate);
        assert_eq!(back.record_id, rec.record_id);
    }
}

#[test]
fn format16_round_trip_is_exact() {
    assert_round_trip(SignalFormat::Format16);
}

#[test]
fn format212_round_trip_is_exact() {
    assert_round_trip(SignalFormat::Format212);
}

#[test]
fn out_of_range_sample_is_an_error() {
    let rec = EcgRecord { record_id: "x".into(), patient_id: "x".into(), samples: vec![0.0, 3.0], sampling_rate: 500, lead_name: "I".into() };
    assert!(write_wfdb_record(&rec, 1000.0, 0, SignalFormat::Format212).is_err());
    assert!(write_wfdb_record(&rec, 1000.0, 0, SignalFormat::Format16).is_ok());
}

#[test]
fn written_corpus_reads_back() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(12, &ParamDistribution::default(), 4, Exec::Sequential);
    write_corpus(&corpus, dir.path()).unwrap();

    let csv = std::fs::read(dir.path().join("labels.csv")).unwrap();
    let table = parse_label_table(&csv, &ColumnMap::synthetic()).unwrap();
    assert!(table.skipped.is_empty());
    assert_eq!(table.rows.len(), 12);
    let manifest: DatasetManifest =
        DatasetManifest::from_json(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    for ((row, entry), rec) in table.rows.iter().zip(&manifest.entries).zip(&corpus.records) {
        assert_eq!(row.record_id, entry.record_id);
        assert_eq!(row.labels, entry.labels);
        let back = read_wfdb_record(&dir.path().join(&entry.locator), "I").unwrap();
        assert_eq!(back.samples.len(), rec.samples.len());
        let worst = back.samples.iter().zip(&rec.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 0.5 / WRITE_GAIN + 1e-12);
    }
}

#[test]
fn missing_lead_and_file() {
    let dir = tempfile::tempdir().unwrap();
    let rec = EcgRecord { record_id: "a".into(), patient_id: "a".into(), samples: vec![0.1; 10], sampling_rate: 500, lead_name: "I".into() };
    let (hea, dat) = write_wfdb_record(&rec, 1000.0, 0, SignalFormat::Format16).unwrap();
    assert!(parse_wfdb_record(&hea, &dat, "II").is_err());
    std::fs::write(dir.path().join("a.hea"), &hea).unwrap();
    assert!(read_wfdb_record(&dir.path().join("a.hea"), "I").is_err());
    std::fs::write(dir.path().join("a.dat"), &dat).unwrap();
    assert_eq!(read_wfdb_record(&dir.path().join("a.hea"), "I").unwrap().samples, rec.samples);
}

fn manifest(patients: &[usize]) -> DatasetManifest {
    let labels = IntervalLabels::new(150.0, 90.0, 390.0, 70.0).unwrap();
    let entries = patients
        .iter()
        .enumerate()
        .flat_map(|(p, &k)| {
            (0..k).map(move |r| ManifestEntry {
                record_id: format!("r{p}_{r}"),
                patient_id: format!("p{p}"),
                locator: format!("records/r{p}_{r}.hea"),
                labels,
            })
        })
        .collect();
    DatasetManifest::new(entries).unwrap()
}

proptest! {
    #[test]
    fn split_keeps_patients_whole(per_patient in prop::collection::vec(1usize..5, 3..80), seed in any::<u64>()) {
        let m = manifest(&per_patient);
        let s = split_by_patient(&m, SplitFractions::default(), seed).unwrap();
        prop_assert_eq!(s.split_assignment.len(), m.entries.len());
        let mut of_patient: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
        for e in &s.entries {
            of_patient.entry(&e.patient_id).or_default().insert(s.split_of(&e.record_id).unwrap());
        }
        prop_assert!(of_patient.values().all(|v| v.len() == 1));
        for sp in [Split::Train, Split::Validation, Split::Holdout] {
            prop_assert!(s.entries_in(sp).count() > 0);
        }
        let mut reversed = m.clone();
        reversed.entries.reverse();
        let r = split_by_patient(&reversed, SplitFractions::default(), seed).unwrap();
        prop_assert_eq!(r.split_assignment, s.split_assignment);
    }

    #[test]
    fn label_rows_parse_or_skip(rows in prop::collection::vec((0.0f64..400.0, 40.0f64..200.0, 250.0f64..600.0, 30.0f64..200.0, any::<bool>()), 1..40)) {
        let mut csv = String::from("record_id,patient_id,pr_ms,qrs_ms,qt_ms,hr_bpm\n");
        let mut good = 0;
        for (i, (pr, qrs, qt, hr, blank)) in rows.iter().enumerate() {
            if *blank && i % 3 == 0 {
                csv += &format!("id{i},p{i},,{qrs},{qt},{hr}\n");
            } else {
                csv += &format!("id{i},p{i},{pr},{qrs},{qt},{hr}\n");
                good += 1;
            }
        }
        let t = parse_label_table(csv.as_bytes(), &ColumnMap::synthetic()).unwrap();
        prop_assert_eq!(t.rows.len(), good);
        prop_assert_eq!(t.rows.len() + t.skipped.len(), rows.len());
        for r in &t.rows {
            prop_assert_eq!(r.labels.pr_present, r.labels.pr_ms > 0.0);
        }
    }
}
