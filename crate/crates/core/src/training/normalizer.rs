use serde::{Deserialize, Serialize};

use super::TrainError;

/// Mean and standard deviation of one regression target, in natural units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetStats {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

/// Per-target z-scoring fitted on the training split.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Normalizer {
    pub targets: Vec<TargetStats>,
}

impl Normalizer {
    pub fn new(targets: Vec<TargetStats>) -> Result<Self, TrainError> {
        for t in &targets {
            if !(t.std > 0.0) || !t.std.is_finite() || !t.mean.is_finite() {
                return Err(TrainError::DegenerateTarget(t.name.clone()));
            }
        }
        Ok(Self { targets })
    }

    /// Fits one target per column of `rows` using the population std.
    pub fn fit(names: &[&str], rows: &[Vec<f64>]) -> Result<Self, TrainError> {
        if rows.is_empty() {
            return Err(TrainError::EmptySubset("normalizer fit".into()));
        }
        let n = rows.len() as f64;
        let targets = names
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
                let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
                TargetStats { name: name.to_string(), mean, std: var.sqrt() }
            })
            .collect();
        Self::new(targets)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn forward(&self, j: usize, x: f64) -> f64 {
        let t = &self.targets[j];
        (x - t.mean) / t.std
    }

    pub fn inverse(&self, j: usize, z: f64) -> f64 {
        let t = &self.targets[j];
        z * t.std + t.mean
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stored_stats_invert_zero_to_mean() {
        let n = Normalizer::new(vec![TargetStats { name: "qt_ms".into(), mean: 394.0, std: 49.9 }]).unwrap();
        assert_eq!(n.inverse(0, 0.0), 394.0);
        assert!((n.forward(0, 443.9) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_and_roundtrip() {
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![300.0 + i as f64, 60.0 + (i % 7) as f64]).collect();
        let n = Normalizer::fit(&["qt_ms", "hr_bpm"], &rows).unwrap();
        assert!((n.targets[0].mean - 324.5).abs() < 1e-9);
        for r in &rows {
            for j in 0..2 {
                let back = n.inverse(j, n.forward(j, r[j]));
                assert!((back - r[j]).abs() <= 1e-6 * r[j].abs());
            }
        }
    }

    #[test]
    fn constant_target_rejected() {
        let rows = vec![vec![1.0], vec![1.0]];
        assert!(matches!(Normalizer::fit(&["x"], &rows), Err(TrainError::DegenerateTarget(_))));
    }
}
