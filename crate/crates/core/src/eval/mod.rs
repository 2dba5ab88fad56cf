//! Interval metrics, ROC and precision-recall analysis, threshold selection,
//! the classifier-gated PR estimate, density plots and reports.

mod kde;
mod report;

pub use kde::{kde2d, Bandwidth, KdeGrid};
pub use report::{
    ClassificationMetrics, MethodReport, MetricsReport, Provenance, RegressionMetrics, TandemSummary,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::model::ModelCheckpoint;
use crate::training::predict;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("zero variance in {0}")]
    DegenerateVariance(&'static str),
    #[error("only one class present")]
    SingleClass,
    #[error("degenerate scores: all scores are equal")]
    DegenerateScores,
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("inference failed: {0}")]
    Inference(String),
}

fn check(preds: &[f64], labels: &[f64]) -> Result<(), EvalError> {
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch(preds.len(), labels.len()));
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

pub fn mae(preds: &[f64], labels: &[f64]) -> Result<f64, EvalError> {
    check(preds, labels)?;
    Ok(preds.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / preds.len() as f64)
}

/// Population standard deviation of `preds - labels`.
pub fn sderr(preds: &[f64], labels: &[f64]) -> Result<f64, EvalError> {
    check(preds, labels)?;
    let n = preds.len() as f64;
    let d: Vec<f64> = preds.iter().zip(labels).map(|(p, y)| p - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    Ok((d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
}

pub fn pearson_r(preds: &[f64], labels: &[f64]) -> Result<f64, EvalError> {
    check(preds, labels)?;
    let n = preds.len() as f64;
    let mp = preds.iter().sum::<f64>() / n;
    let my = labels.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, y) in preds.iter().zip(labels) {
        sxy += (p - mp) * (y - my);
        sxx += (p - mp).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 {
        return Err(EvalError::DegenerateVariance("predictions"));
    }
    if syy == 0.0 {
        return Err(EvalError::DegenerateVariance("labels"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub threshold: f64,
}

/// Confusion counts for "positive iff score >= threshold" at every distinct
/// score, from the highest threshold down. Each entry is `(threshold, tp, fp)`.
fn sweep(scores: &[f64], labels: &[bool]) -> Result<(Vec<(f64, usize, usize)>, usize, usize), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0, 0);
    let mut out = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((s, tp, fp));
    }
    Ok((out, pos, neg))
}

/// ROC curve from (0, 0) to (1, 1) and its trapezoidal area.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<(Vec<RocPoint>, f64), EvalError> {
    let (steps, pos, neg) = sweep(scores, labels)?;
    let mut curve = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY }];
    let mut auc = 0.0;
    for (t, tp, fp) in steps {
        let p = RocPoint { fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64, threshold: t };
        let last = curve.last().unwrap();
        auc += (p.fpr - last.fpr) * (p.tpr + last.tpr) / 2.0;
        curve.push(p);
    }
    Ok((curve, auc))
}

/// Precision-recall curve and average precision
/// `sum_k (R_k - R_{k-1}) * P_k` over distinct thresholds.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<(Vec<PrPoint>, f64), EvalError> {
    let (steps, pos, _) = sweep(scores, labels)?;
    let mut curve = Vec::with_capacity(steps.len());
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (t, tp, fp) in steps {
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        curve.push(PrPoint { recall, precision, threshold: t });
    }
    Ok((curve, ap))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Threshold maximizing sensitivity + specificity over all distinct scores,
/// with "positive iff score >= threshold". Ties go to the higher specificity
/// (the higher threshold).
pub fn select_threshold(scores: &[f64], labels: &[bool]) -> Result<ThresholdChoice, EvalError> {
    let (steps, pos, neg) = sweep(scores, labels)?;
    if steps.len() == 1 {
        return Err(EvalError::DegenerateScores);
    }
    let mut best: Option<ThresholdChoice> = None;
    for (t, tp, fp) in steps {
        let c = ThresholdChoice {
            threshold: t,
            sensitivity: tp as f64 / pos as f64,
            specificity: (neg - fp) as f64 / neg as f64,
        };
        let better = match best {
            None => true,
            Some(b) => {
                let (j, jb) = (c.sensitivity + c.specificity, b.sensitivity + b.specificity);
                j > jb || (j == jb && c.specificity > b.specificity)
            }
        };
        if better {
            best = Some(c);
        }
    }
    Ok(best.expect("nonempty sweep"))
}

/// Binary summary at a fixed threshold.
pub fn classification_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ClassificationMetrics, EvalError> {
    let (_, auc) = roc_auc(scores, labels)?;
    let (_, auprc) = pr_auc(scores, labels)?;
    let (mut tp, mut tn, mut fp, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let n_pos = tp + fneg;
    let n_neg = tn + fp;
    Ok(ClassificationMetrics {
        auc,
        auprc,
        accuracy: (tp + tn) as f64 / scores.len() as f64,
        sensitivity: tp as f64 / n_pos as f64,
        specificity: tn as f64 / n_neg as f64,
        threshold,
        n_pos,
        n_neg,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TandemOutput {
    Emitted { pr_ms: f64, probability: f64 },
    Suppressed { probability: f64 },
}

impl TandemOutput {
    pub fn estimate(&self) -> Option<f64> {
        match *self {
            TandemOutput::Emitted { pr_ms, .. } => Some(pr_ms),
            TandemOutput::Suppressed { .. } => None,
        }
    }
}

/// Emits the PR estimate iff the presence probability is at least `threshold`.
pub fn tandem_gate(probabilities: &[f64], pr_ms: &[f64], threshold: f64) -> Result<Vec<TandemOutput>, EvalError> {
    if probabilities.len() != pr_ms.len() {
        return Err(EvalError::LengthMismatch(probabilities.len(), pr_ms.len()));
    }
    Ok(probabilities
        .iter()
        .zip(pr_ms)
        .map(|(&probability, &pr)| {
            if probability >= threshold {
                TandemOutput::Emitted { pr_ms: pr, probability }
            } else {
                TandemOutput::Suppressed { probability }
            }
        })
        .collect())
}

/// Runs the presence classifier and the PR regressor on preprocessed signals
/// and gates the regressor with the classifier's stored threshold.
pub fn tandem_pr_inference(
    signals: &[&[f32]],
    prchk: &ModelCheckpoint,
    pr: &ModelCheckpoint,
    exec: Exec,
) -> Result<Vec<TandemOutput>, EvalError> {
    use crate::model::Task;
    let mismatch = |m: String| Err(EvalError::CheckpointMismatch(m));
    if prchk.task != Task::Prchk || pr.task != Task::Pr {
        return mismatch(format!("expected prchk and pr checkpoints, got {} and {}", prchk.task, pr.task));
    }
    if prchk.format_version != pr.format_version {
        return mismatch(format!("format versions {} and {}", prchk.format_version, pr.format_version));
    }
    if prchk.config.input_len != pr.config.input_len {
        return mismatch(format!("input lengths {} and {}", prchk.config.input_len, pr.config.input_len));
    }
    if let Some(s) = signals.iter().find(|s| s.len() != pr.config.input_len) {
        return mismatch(format!("signal length {} vs model input {}", s.len(), pr.config.input_len));
    }
    let Some(threshold) = prchk.prchk_threshold else {
        return mismatch("classifier checkpoint carries no threshold".into());
    };
    let inf = |e: &dyn std::fmt::Display| EvalError::Inference(e.to_string());
    let cm = prchk.to_model().map_err(|e| inf(&e))?;
    let rm = pr.to_model().map_err(|e| inf(&e))?;
    let probs: Vec<f64> = predict(&cm, signals, 64, exec).map_err(|e| inf(&e))?.iter().map(|o| o[0] as f64).collect();
    let est: Vec<f64> = predict(&rm, signals, 64, exec)
        .map_err(|e| inf(&e))?
        .iter()
        .map(|o| pr.normalizer.inverse(0, o[0] as f64))
        .collect();
    tandem_gate(&probs, &est, threshold)
}
