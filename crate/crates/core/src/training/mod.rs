//! Losses, target normalization, Adam, the step schedule, early stopping and
//! the per-task training loop.

mod normalizer;

pub use normalizer::{Normalizer, TargetStats};

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::IntervalLabels;
use crate::eval;
use crate::exec::{self, Exec};
use crate::model::{batch_tensor, IKres, IKresConfig, ModelCheckpoint, ModelError, Task};
use crate::tensor::{BatchNormStats, Graph, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("no training examples for {0}")]
    EmptySubset(String),
    #[error("target {0} has zero or non-finite spread")]
    DegenerateTarget(String),
    #[error("non-finite gradient for {0}")]
    NonFiniteGradient(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// `lr0 * 0.5^floor(epoch / decay_every)`.
pub fn lr_schedule(epoch: usize, lr0: f64, decay_every: usize) -> f64 {
    lr0 * 0.5f64.powi((epoch / decay_every.max(1)) as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam over a list of tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self { config, step: 0, m, v }
    }

    /// One update. Non-finite gradients abort before anything is modified.
    pub fn step<T: crate::tensor::Scalar>(
        &mut self,
        params: &mut [Tensor<T>],
        grads: &[Tensor<T>],
        names: &[String],
        lr: f64,
    ) -> Result<(), TrainError> {
        for (i, g) in grads.iter().enumerate() {
            if !g.is_finite() {
                return Err(TrainError::NonFiniteGradient(names.get(i).cloned().unwrap_or_default()));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            for (((pi, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = gi.to_f64_lossy();
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let upd = lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                *pi = T::from_f64_lossy(pi.to_f64_lossy() - upd);
            }
        }
        Ok(())
    }
}

/// Patience-based stopping on validation loss with min-delta 0.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_loss: f64,
    pub best_epoch: Option<usize>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best_loss: f64::INFINITY, best_epoch: None, since_best: 0 }
    }

    /// Records an epoch; returns `true` when `epoch` is the new best.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best_loss {
            self.best_loss = val_loss;
            self.best_epoch = Some(epoch);
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Each batch is split into this many shards with their own batch-norm
    /// statistics; gradients are summed in shard order.
    pub shards: usize,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            lr_decay: 0.5,
            decay_every: 3,
            batch_size: 64,
            max_epochs: 20,
            patience: 3,
            adam: AdamConfig::default(),
            seed: 0,
            shards: 1,
            exec: Exec::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.lr0 > 0.0) {
            return bad("lr0 must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 || self.decay_every == 0 {
            return bad("patience, batch_size, max_epochs and decay_every must be positive");
        }
        if self.shards == 0 || self.shards > self.batch_size {
            return bad("shards must be in 1..=batch_size");
        }
        Ok(())
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_s: f64,
}

/// A preprocessed signal with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub record_id: String,
    pub signal: Vec<f32>,
    pub labels: IntervalLabels,
}

/// Regression targets in natural units, in head-output order.
pub fn task_targets(task: Task, l: &IntervalLabels) -> Vec<f64> {
    match task {
        Task::Qt => vec![l.qt_ms, l.hr_bpm],
        Task::Qrs => vec![l.qrs_ms],
        Task::Pr => vec![l.pr_ms],
        Task::Prchk => vec![if l.pr_present { 1.0 } else { 0.0 }],
    }
}

/// Records a task trains and is scored on. The PR regressor only sees records
/// with an identifiable P-wave.
pub fn task_filter(task: Task, l: &IntervalLabels) -> bool {
    task != Task::Pr || l.pr_present
}

/// BCE weights `(positive, negative)`: positives weigh 1 and negatives
/// `n_pos / n_neg`, so both classes contribute equally.
pub fn class_weights(labels: &[bool]) -> (f64, f64) {
    let pos = labels.iter().filter(|&&b| b).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        (1.0, 1.0)
    } else {
        (1.0, pos as f64 / neg as f64)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn log_jsonl(&self) -> String {
        self.log.iter().map(|e| serde_json::to_string(e).expect("log serializes") + "\n").collect()
    }
}

struct Prepared<'a> {
    signals: Vec<&'a [f32]>,
    /// z-scored targets, or 0/1 labels for the classifier.
    targets: Vec<Vec<f32>>,
}

fn prepare<'a>(task: Task, data: &'a [Example], norm: &Normalizer) -> Prepared<'a> {
    let kept: Vec<&Example> = data.iter().filter(|e| task_filter(task, &e.labels)).collect();
    let targets = kept
        .iter()
        .map(|e| {
            let t = task_targets(task, &e.labels);
            if task.is_classifier() {
                t.iter().map(|&v| v as f32).collect()
            } else {
                t.iter().enumerate().map(|(j, &v)| norm.forward(j, v) as f32).collect()
            }
        })
        .collect();
    Prepared { signals: kept.iter().map(|e| e.signal.as_slice()).collect(), targets }
}

/// Loss of one mini-batch; `bn` must be the stats the forward pass should use.
fn batch_loss(
    model: &IKres<f32>,
    g: &mut Graph<f32>,
    signals: &[&[f32]],
    targets: &[&Vec<f32>],
    weights: (f64, f64),
    bn: &mut [BatchNormStats<f32>],
    train: bool,
) -> Result<(crate::tensor::Var, Vec<crate::tensor::Var>), TrainError> {
    let x = g.input(batch_tensor(signals)?);
    let fp = model.forward_with_stats(g, x, bn, train)?;
    let flat: Vec<f32> = targets.iter().flat_map(|t| t.iter().copied()).collect();
    let loss = if model.task().is_classifier() {
        let w: Vec<f32> = flat.iter().map(|&y| if y > 0.5 { weights.0 as f32 } else { weights.1 as f32 }).collect();
        g.weighted_bce_loss(fp.output, &flat, &w)?
    } else {
        let t = g.input(Tensor::new(vec![targets.len(), model.task().outputs()], flat)?);
        g.mse_loss(fp.output, t)?
    };
    Ok((loss, fp.params))
}

fn validation_loss(
    model: &IKres<f32>,
    data: &Prepared,
    weights: (f64, f64),
    batch: usize,
    exec: Exec,
) -> Result<f64, TrainError> {
    let n = data.signals.len();
    let chunks = n.div_ceil(batch);
    let parts = exec::map_range(exec, chunks, |c| {
        let r = c * batch..((c + 1) * batch).min(n);
        let mut g = Graph::new();
        let mut bn = model.bn_stats().to_vec();
        let targets: Vec<&Vec<f32>> = data.targets[r.clone()].iter().collect();
        let (loss, _) = batch_loss(model, &mut g, &data.signals[r.clone()], &targets, weights, &mut bn, false)?;
        Ok::<_, TrainError>(g.value(loss).data()[0] as f64 * r.len() as f64)
    });
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total / n as f64)
}

/// One optimizer step over `idx`. Returns the batch loss.
fn train_step(
    model: &mut IKres<f32>,
    adam: &mut Adam,
    data: &Prepared,
    idx: &[usize],
    weights: (f64, f64),
    lr: f64,
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let shards = cfg.shards.min(idx.len());
    let base = idx.len() / shards;
    let extra = idx.len() % shards;
    let mut bounds = Vec::with_capacity(shards);
    let mut start = 0;
    for s in 0..shards {
        let len = base + usize::from(s < extra);
        bounds.push(start..start + len);
        start += len;
    }
    let frozen: &IKres<f32> = model;
    let results = exec::map(cfg.exec, &bounds, |r| {
        let ids = &idx[r.clone()];
        let signals: Vec<&[f32]> = ids.iter().map(|&i| data.signals[i]).collect();
        let targets: Vec<&Vec<f32>> = ids.iter().map(|&i| &data.targets[i]).collect();
        let mut g = Graph::new();
        let mut bn = frozen.bn_stats().to_vec();
        let (loss, params) = batch_loss(frozen, &mut g, &signals, &targets, weights, &mut bn, true)?;
        let loss_val = g.value(loss).data()[0] as f64;
        let mut grads = g.backward(loss)?;
        let grads: Vec<Tensor<f32>> = params
            .iter()
            .zip(frozen.params())
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
            .collect();
        Ok::<_, TrainError>((loss_val, grads, bn, r.len()))
    });

    let n = idx.len() as f32;
    let mut total: Option<Vec<Tensor<f32>>> = None;
    let mut loss = 0.0;
    let mut stats: Vec<Vec<BatchNormStats<f32>>> = Vec::with_capacity(shards);
    for res in results {
        let (l, grads, bn, len) = res?;
        let w = len as f32 / n;
        loss += l * len as f64 / n as f64;
        match total.as_mut() {
            None => {
                total = Some(
                    grads
                        .into_iter()
                        .map(|mut g| {
                            g.data_mut().iter_mut().for_each(|v| *v *= w);
                            g
                        })
                        .collect(),
                )
            }
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(grads) {
                    a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += w * y);
                }
            }
        }
        stats.push(bn);
    }
    if !loss.is_finite() {
        return Err(TrainError::Divergence { epoch: 0, loss });
    }
    let grads = total.expect("at least one shard");
    let names = model.param_names().to_vec();
    adam.step(model.params_mut(), &grads, &names, lr)?;
    // running statistics: mean over shards, in shard order
    let inv = 1.0 / stats.len() as f32;
    for (l, dst) in model.bn_stats_mut().iter_mut().enumerate() {
        for c in 0..dst.running_mean.len() {
            dst.running_mean[c] = stats.iter().map(|s| s[l].running_mean[c]).sum::<f32>() * inv;
            dst.running_var[c] = stats.iter().map(|s| s[l].running_var[c]).sum::<f32>() * inv;
        }
    }
    Ok(loss)
}

/// Raw head outputs for every signal, in input order.
pub fn predict(model: &IKres<f32>, signals: &[&[f32]], batch: usize, exec: Exec) -> Result<Vec<Vec<f32>>, TrainError> {
    let batch = batch.max(1);
    let chunks = signals.len().div_ceil(batch);
    let parts = exec::map_range(exec, chunks, |c| {
        let r = c * batch..((c + 1) * batch).min(signals.len());
        crate::model::predict_batch(model, &signals[r])
    });
    let mut out = Vec::with_capacity(signals.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Trains one task from scratch. The normalizer and class weights come from
/// `train` only; early stopping watches the loss on `val` and the parameters
/// of the best epoch are returned. The classifier threshold maximizes
/// sensitivity + specificity on the training split.
pub fn train_task(
    task: Task,
    train: &[Example],
    val: &[Example],
    model_config: &IKresConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let kept: Vec<&Example> = train.iter().filter(|e| task_filter(task, &e.labels)).collect();
    if kept.is_empty() {
        return Err(TrainError::EmptySubset(format!("{task} training split")));
    }
    let normalizer = if task.is_classifier() {
        Normalizer::default()
    } else {
        let rows: Vec<Vec<f64>> = kept.iter().map(|e| task_targets(task, &e.labels)).collect();
        Normalizer::fit(task.target_names(), &rows)?
    };
    let weights = if task.is_classifier() {
        let labels: Vec<bool> = kept.iter().map(|e| e.labels.pr_present).collect();
        class_weights(&labels)
    } else {
        (1.0, 1.0)
    };
    let tr = prepare(task, train, &normalizer);
    let va = prepare(task, val, &normalizer);
    if va.signals.is_empty() {
        return Err(TrainError::EmptySubset(format!("{task} validation split")));
    }

    let mut model = IKres::<f32>::new(model_config.clone(), task, cfg.seed)?;
    let mut adam = Adam::new(cfg.adam, model.params().iter().map(Tensor::len));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_0bde);
    let mut order: Vec<usize> = (0..tr.signals.len()).collect();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.clone();
    let mut log = Vec::new();

    for epoch in 0..cfg.max_epochs {
        let t0 = Instant::now();
        let lr = cfg.lr(epoch);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let l = train_step(&mut model, &mut adam, &tr, idx, weights, lr, cfg).map_err(|e| match e {
                TrainError::Divergence { loss, .. } => TrainError::Divergence { epoch, loss },
                other => other,
            })?;
            sum += l * idx.len() as f64;
        }
        let train_loss = sum / tr.signals.len() as f64;
        let val_loss = validation_loss(&model, &va, weights, cfg.batch_size, cfg.exec)?;
        if !val_loss.is_finite() {
            return Err(TrainError::Divergence { epoch, loss: val_loss });
        }
        let entry = EpochLog { epoch, lr, train_loss, val_loss, wall_s: t0.elapsed().as_secs_f64() };
        log::info!("{task} {}", serde_json::to_string(&entry).expect("log serializes"));
        log.push(entry);
        if stopper.observe(epoch, val_loss) {
            best = model.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }

    let threshold = if task.is_classifier() {
        let scores: Vec<f64> = predict(&best, &tr.signals, cfg.batch_size, cfg.exec)?
            .into_iter()
            .map(|o| o[0] as f64)
            .collect();
        let labels: Vec<bool> = tr.targets.iter().map(|t| t[0] > 0.5).collect();
        match eval::select_threshold(&scores, &labels) {
            Ok(t) => Some(t.threshold),
            Err(e) => {
                log::warn!("threshold selection failed ({e}); using 0.5");
                Some(0.5)
            }
        }
    } else {
        None
    };
    Ok(TrainOutcome {
        checkpoint: ModelCheckpoint::from_model(&best, normalizer, threshold),
        log,
        best_epoch: stopper.best_epoch.expect("at least one epoch"),
    })
}
