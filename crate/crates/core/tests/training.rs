use std::sync::OnceLock;

use leadi_core::exec::Exec;
use leadi_core::model::{load_checkpoint, predict_batch, save_checkpoint, IKres, IKresConfig, ModelCheckpoint, Task};
use leadi_core::sigproc::{preprocess, PreprocessConfig};
use leadi_core::synthgen::{synth_corpus, ParamDistribution};
use leadi_core::training::{predict, task_targets, train_task, Example, Normalizer, TrainConfig, TrainOutcome};
use proptest::prelude::*;

fn tiny() -> IKresConfig {
    IKresConfig { ingest_filters: 4, block_filters: vec![4, 4, 8, 8], kernel: 8, input_len: 2500, head_hidden: 8 }
}

fn examples() -> &'static (Vec<Example>, Vec<Example>) {
    static DATA: OnceLock<(Vec<Example>, Vec<Example>)> = OnceLock::new();
    DATA.get_or_init(|| {
        let corpus = synth_corpus(96, &ParamDistribution::default(), 21, Exec::Parallel);
        let cfg = PreprocessConfig::default();
        let all: Vec<Example> = corpus
            .records
            .iter()
            .zip(&corpus.manifest.entries)
            .map(|(r, e)| Example { record_id: e.record_id.clone(), signal: preprocess(r, &cfg).unwrap(), labels: e.labels })
            .collect();
        let (train, val) = all.split_at(72);
        (train.to_vec(), val.to_vec())
    })
}

fn train_cfg(exec: Exec) -> TrainConfig {
    TrainConfig { batch_size: 16, max_epochs: 7, patience: 100, seed: 3, shards: 2, exec, ..TrainConfig::default() }
}

fn outcome() -> &'static TrainOutcome {
    static OUT: OnceLock<TrainOutcome> = OnceLock::new();
    OUT.get_or_init(|| {
        let (train, val) = examples();
        train_task(Task::Qrs, train, val, &tiny(), &train_cfg(Exec::Parallel)).unwrap()
    })
}

#[test]
fn kaiming_variance() {
    let model = IKres::<f32>::new(IKresConfig::default(), Task::Qt, 1).unwrap();
    let mut checked = 0;
    for (name, t) in model.param_names().iter().zip(model.params()) {
        if !name.ends_with(".weight") || t.len() < 20_000 {
            continue;
        }
        let fan_in: usize = t.shape()[1..].iter().product();
        let var = t.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / t.len() as f64;
        let expect = 2.0 / fan_in as f64;
        assert!((var / expect - 1.0).abs() < 0.05, "{name}: {var} vs {expect}");
        checked += 1;
    }
    assert!(checked >= 8);
}

#[test]
fn eval_mode_is_batch_permutation_equivariant() {
    let (train, _) = examples();
    let model = IKres::<f32>::new(tiny(), Task::Qt, 4).unwrap();
    let signals: Vec<&[f32]> = train[..8].iter().map(|e| e.signal.as_slice()).collect();
    let out = predict_batch(&model, &signals).unwrap();
    let perm = [5, 2, 7, 0, 3, 1, 6, 4];
    let permuted: Vec<&[f32]> = perm.iter().map(|&i| signals[i]).collect();
    let out_p = predict_batch(&model, &permuted).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        for (a, b) in out_p[k].iter().zip(&out[i]) {
            assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
    let single = predict_batch(&model, &signals[3..4]).unwrap();
    for (a, b) in single[0].iter().zip(&out[3]) {
        assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()));
    }
}

#[test]
fn checkpoint_file_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut ck = outcome().checkpoint.clone();
    ck.config_hash = Some("abc123".into());
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&ck, &a).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    assert_eq!(loaded, ck);
    save_checkpoint(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let model = loaded.to_model().unwrap();
    let again = ModelCheckpoint::from_model(&model, loaded.normalizer.clone(), loaded.prchk_threshold);
    assert_eq!(again.tensors, ck.tensors);
}

#[test]
fn learning_rate_table() {
    let lrs: Vec<f64> = outcome().log.iter().map(|e| e.lr).collect();
    assert_eq!(lrs, vec![0.01, 0.01, 0.01, 0.005, 0.005, 0.005, 0.0025]);
    let cfg = TrainConfig::default();
    assert_eq!((0..9).map(|e| cfg.lr(e)).collect::<Vec<_>>(), vec![0.01, 0.01, 0.01, 0.005, 0.005, 0.005, 0.0025, 0.0025, 0.0025]);
}

#[test]
fn returned_weights_are_the_best_epoch() {
    let out = outcome();
    let best = out.log.iter().min_by(|a, b| a.val_loss.total_cmp(&b.val_loss)).unwrap();
    assert_eq!(out.best_epoch, best.epoch);

    // recompute the validation loss of the returned weights from scratch
    let (_, val) = examples();
    let model = out.checkpoint.to_model().unwrap();
    let signals: Vec<&[f32]> = val.iter().map(|e| e.signal.as_slice()).collect();
    let pred = predict(&model, &signals, 16, Exec::Sequential).unwrap();
    let norm = &out.checkpoint.normalizer;
    let mse = pred
        .iter()
        .zip(val)
        .map(|(p, e)| (p[0] as f64 - norm.forward(0, task_targets(Task::Qrs, &e.labels)[0])).powi(2))
        .sum::<f64>()
        / val.len() as f64;
    assert!((mse - best.val_loss).abs() <= 1e-4 * best.val_loss, "{mse} vs {}", best.val_loss);
}

#[test]
fn early_stopping_halts_after_patience() {
    let (train, val) = examples();
    let cfg = TrainConfig { patience: 1, max_epochs: 12, lr0: 0.05, ..train_cfg(Exec::Parallel) };
    let out = train_task(Task::Qrs, train, val, &tiny(), &cfg).unwrap();
    let best = out.log.iter().min_by(|a, b| a.val_loss.total_cmp(&b.val_loss)).unwrap().epoch;
    assert_eq!(out.best_epoch, best);
    assert!(out.log.len() == cfg.max_epochs || out.log.len() == best + cfg.patience + 1, "{} epochs, best {best}", out.log.len());
}

#[test]
fn sequential_and_parallel_train_identically() {
    let (train, val) = examples();
    let cfg = TrainConfig { max_epochs: 2, ..train_cfg(Exec::Sequential) };
    let a = train_task(Task::Prchk, train, val, &tiny(), &cfg).unwrap();
    let b = train_task(Task::Prchk, train, val, &tiny(), &TrainConfig { exec: Exec::Parallel, ..cfg }).unwrap();
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    assert_eq!(a.checkpoint.prchk_threshold, b.checkpoint.prchk_threshold);
}

#[test]
fn normalizer_comes_from_training_split() {
    let (train, _) = examples();
    let qrs: Vec<f64> = train.iter().map(|e| e.labels.qrs_ms).collect();
    let mean = qrs.iter().sum::<f64>() / qrs.len() as f64;
    let t = &outcome().checkpoint.normalizer.targets[0];
    assert_eq!(t.name, "qrs_ms");
    assert!((t.mean - mean).abs() < 1e-9);
}

proptest! {
    #[test]
    fn z_score_round_trip(rows in prop::collection::vec((50.0f64..600.0, 30.0f64..200.0), 2..60), probe in -1000.0f64..1000.0) {
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|(a, b)| vec![a, b]).collect();
        prop_assume!(rows.iter().any(|r| r != &rows[0]));
        let Ok(n) = Normalizer::fit(&["qt_ms", "hr_bpm"], &rows) else { return Ok(()) };
        for r in &rows {
            for j in 0..2 {
                prop_assert!((n.inverse(j, n.forward(j, r[j])) - r[j]).abs() < 1e-6);
            }
        }
        prop_assert!((n.forward(0, n.inverse(0, probe)) - probe).abs() < 1e-6);
        let z: f64 = rows.iter().map(|r| n.forward(0, r[0])).sum();
        prop_assert!(z.abs() < 1e-6 * rows.len() as f64);
    }
}
