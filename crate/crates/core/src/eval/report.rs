//! Report schema. Serialized as JSON:
//!
//! ```json
//! {
//!   "provenance": {"dataset_id": "…", "checkpoint_ids": ["…"], "config_hash": "…"},
//!   "methods": [
//!     {"method": "ikres",
//!      "regression": [{"target": "qt_ms", "unit": "ms", "mae": 0.0, "sderr": 0.0,
//!                      "pearson_r": 1.0 | null, "n": 0}],
//!      "classification": {"auc": …, "auprc": …, "accuracy": …, "sensitivity": …,
//!                         "specificity": …, "threshold": …, "n_pos": 0, "n_neg": 0} | null,
//!      "tandem": {"n_total": 0, "n_emitted": 0, "n_suppressed": 0} | null}
//!   ]
//! }
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{mae, pearson_r, sderr, EvalError};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_id: String,
    pub checkpoint_ids: Vec<String>,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub target: String,
    pub unit: String,
    pub mae: f64,
    pub sderr: f64,
    /// `None` when either side has zero variance.
    pub pearson_r: Option<f64>,
    pub n: usize,
}

impl RegressionMetrics {
    pub fn compute(target: &str, unit: &str, preds: &[f64], labels: &[f64]) -> Result<Self, EvalError> {
        Ok(Self {
            target: target.to_string(),
            unit: unit.to_string(),
            mae: mae(preds, labels)?,
            sderr: sderr(preds, labels)?,
            pearson_r: match pearson_r(preds, labels) {
                Ok(r) => Some(r),
                Err(EvalError::DegenerateVariance(_)) => None,
                Err(e) => return Err(e),
            },
            n: preds.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub auc: f64,
    pub auprc: f64,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub threshold: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TandemSummary {
    pub n_total: usize,
    pub n_emitted: usize,
    pub n_suppressed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub regression: Vec<RegressionMetrics>,
    pub classification: Option<ClassificationMetrics>,
    pub tandem: Option<TandemSummary>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub provenance: Provenance,
    pub methods: Vec<MethodReport>,
}

fn target_title(t: &str) -> String {
    match t {
        "qt_ms" => "QT interval".into(),
        "qrs_ms" => "QRS duration".into(),
        "pr_ms" => "PR interval".into(),
        "hr_bpm" => "Heart rate".into(),
        other => other.to_string(),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"))
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Metric rows MAE / SDerr / Pearson-R / N per target, one column per
    /// method.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "dataset: {}", self.provenance.dataset_id);
        let _ = writeln!(out, "config hash: {}", self.provenance.config_hash);
        let targets: BTreeSet<(String, String)> = self
            .methods
            .iter()
            .flat_map(|m| m.regression.iter().map(|r| (r.target.clone(), r.unit.clone())))
            .collect();
        let header: String = self.methods.iter().map(|m| format!("{:>14}", m.method)).collect();
        for (target, unit) in &targets {
            let _ = writeln!(out, "\n{:<22}{header}", format!("{} ({unit})", target_title(target)));
            let cell = |m: &MethodReport, f: &dyn Fn(&RegressionMetrics) -> String| {
                m.regression.iter().find(|r| &r.target == target).map_or_else(|| "-".to_string(), f)
            };
            let rows: [(&str, &dyn Fn(&RegressionMetrics) -> String); 4] = [
                ("MAE", &|r| format!("{:.3}", r.mae)),
                ("SDerr", &|r| format!("{:.3}", r.sderr)),
                ("Pearson-R", &|r| fmt_opt(r.pearson_r)),
                ("N", &|r| r.n.to_string()),
            ];
            for (name, f) in rows {
                let cells: String = self.methods.iter().map(|m| format!("{:>14}", cell(m, f))).collect();
                let _ = writeln!(out, "{name:<22}{cells}");
            }
        }
        for m in &self.methods {
            if let Some(c) = &m.classification {
                let _ = writeln!(out, "\nP-wave presence ({})", m.method);
                for (k, v) in [
                    ("AUC", format!("{:.4}", c.auc)),
                    ("AUPRC", format!("{:.4}", c.auprc)),
                    ("accuracy", format!("{:.4}", c.accuracy)),
                    ("sensitivity", format!("{:.4}", c.sensitivity)),
                    ("specificity", format!("{:.4}", c.specificity)),
                    ("threshold", format!("{:.4}", c.threshold)),
                    ("N pos/neg", format!("{}/{}", c.n_pos, c.n_neg)),
                ] {
                    let _ = writeln!(out, "{k:<22}{v:>14}");
                }
            }
            if let Some(t) = &m.tandem {
                let _ = writeln!(
                    out,
                    "\nPR tandem ({}): {} emitted, {} suppressed of {}",
                    m.method, t.n_emitted, t.n_suppressed, t.n_total
                );
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> MetricsReport {
        let y = [380.0, 400.0, 420.0];
        MetricsReport {
            provenance: Provenance { dataset_id: "d".into(), checkpoint_ids: vec!["c".into()], config_hash: "h".into() },
            methods: vec![MethodReport {
                method: "ikres".into(),
                regression: vec![RegressionMetrics::compute("qt_ms", "ms", &y, &y).unwrap()],
                classification: None,
                tandem: Some(TandemSummary { n_total: 3, n_emitted: 2, n_suppressed: 1 }),
            }],
        }
    }

    #[test]
    fn table_rows() {
        let t = report().to_table();
        for row in ["MAE", "SDerr", "Pearson-R", "N "] {
            assert!(t.lines().any(|l| l.starts_with(row)), "{row} missing:\n{t}");
        }
        assert!(t.contains("QT interval (ms)"));
    }

    #[test]
    fn json_roundtrip_is_stable() {
        let r = report();
        let s = r.to_json();
        assert_eq!(MetricsReport::from_json(&s).unwrap(), r);
        assert_eq!(MetricsReport::from_json(&s).unwrap().to_json(), s);
    }

    #[test]
    fn constant_predictions_have_no_r() {
        let m = RegressionMetrics::compute("qrs_ms", "ms", &[90.0, 90.0], &[80.0, 100.0]).unwrap();
        assert_eq!(m.pearson_r, None);
        assert_eq!(m.mae, 10.0);
    }
}
