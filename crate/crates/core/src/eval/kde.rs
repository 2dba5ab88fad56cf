use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::EvalError;

pub const MIN_POINTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// `h = sigma * n^(-1/6)` per axis, the two-dimensional normal-reference rule.
    Silverman,
    Fixed { hx: f64, hy: f64 },
}

/// Density of `(label, prediction)` pairs on a uniform `size x size` grid.
/// `x` runs over labels and `y` over predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeGrid {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// Row-major, `density[j * xs.len() + i]` at `(xs[i], ys[j])`.
    pub density: Vec<f64>,
    pub hx: f64,
    pub hy: f64,
}

fn std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt()
}

fn axis(v: &[f64], h: f64, size: usize) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min) - 4.0 * h;
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 4.0 * h;
    let step = (hi - lo) / (size - 1) as f64;
    (0..size).map(|i| lo + i as f64 * step).collect()
}

/// Product-Gaussian kernel density estimate. The grid spans the data
/// extended by four bandwidths on each side.
pub fn kde2d(labels: &[f64], preds: &[f64], bandwidth: Bandwidth, size: usize) -> Result<KdeGrid, EvalError> {
    if labels.len() != preds.len() {
        return Err(EvalError::LengthMismatch(labels.len(), preds.len()));
    }
    if labels.len() < MIN_POINTS {
        return Err(EvalError::TooFewPoints { need: MIN_POINTS, got: labels.len() });
    }
    let size = size.max(2);
    let n = labels.len() as f64;
    let (hx, hy) = match bandwidth {
        Bandwidth::Silverman => {
            let f = n.powf(-1.0 / 6.0);
            let fallback = |s: f64, v: &[f64]| if s > 0.0 { s } else { 1e-3 * v[0].abs().max(1.0) };
            (fallback(std(labels), labels) * f, fallback(std(preds), preds) * f)
        }
        Bandwidth::Fixed { hx, hy } => (hx, hy),
    };
    let xs = axis(labels, hx, size);
    let ys = axis(preds, hy, size);
    let norm = 1.0 / (n * 2.0 * std::f64::consts::PI * hx * hy);
    let mut density = vec![0.0; size * size];
    for (&lx, &py) in labels.iter().zip(preds) {
        let kx: Vec<f64> = xs.iter().map(|&x| (-0.5 * ((x - lx) / hx).powi(2)).exp()).collect();
        for (j, &y) in ys.iter().enumerate() {
            let ky = (-0.5 * ((y - py) / hy).powi(2)).exp();
            if ky < 1e-300 {
                continue;
            }
            let row = &mut density[j * size..(j + 1) * size];
            for (d, &k) in row.iter_mut().zip(&kx) {
                *d += k * ky;
            }
        }
    }
    density.iter_mut().for_each(|d| *d *= norm);
    Ok(KdeGrid { xs, ys, density, hx, hy })
}

impl KdeGrid {
    pub fn cell_area(&self) -> f64 {
        (self.xs[1] - self.xs[0]) * (self.ys[1] - self.ys[0])
    }

    /// Riemann sum of the density over the grid.
    pub fn integral(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.cell_area()
    }

    /// Grid coordinates of the highest density.
    pub fn mode(&self) -> (f64, f64) {
        let (k, _) = self
            .density
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bk, bv), (k, &v)| if v > bv { (k, v) } else { (bk, bv) });
        let n = self.xs.len();
        (self.xs[k % n], self.ys[k / n])
    }

    /// `x,y,density` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,density\n");
        let n = self.xs.len();
        for (j, &y) in self.ys.iter().enumerate() {
            for (i, &x) in self.xs.iter().enumerate() {
                let _ = writeln!(out, "{x},{y},{}", self.density[j * n + i]);
            }
        }
        out
    }

    /// Heat map of the grid with the identity line drawn as an orange dotted
    /// line.
    pub fn to_svg(&self, title: &str, unit: &str) -> String {
        const W: f64 = 480.0;
        const M: f64 = 60.0;
        let n = self.xs.len();
        let (x0, x1) = (self.xs[0], self.xs[n - 1]);
        let (y0, y1) = (self.ys[0], self.ys[self.ys.len() - 1]);
        let sx = |x: f64| M + (x - x0) / (x1 - x0) * W;
        let sy = |y: f64| M + W - (y - y0) / (y1 - y0) * W;
        let max = self.density.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let cw = W / n as f64;
        let ch = W / self.ys.len() as f64;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{0}" height="{0}" viewBox="0 0 {0} {0}">"#,
            W + 2.0 * M
        );
        let _ = writeln!(s, r#"<rect x="{M}" y="{M}" width="{W}" height="{W}" fill="white" stroke="black"/>"#);
        for (j, &y) in self.ys.iter().enumerate() {
            for (i, &x) in self.xs.iter().enumerate() {
                let a = self.density[j * n + i] / max;
                if a < 0.01 {
                    continue;
                }
                let _ = writeln!(
                    s,
                    r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#1f4e99" fill-opacity="{:.3}"/>"##,
                    sx(x) - cw / 2.0,
                    sy(y) - ch / 2.0,
                    cw,
                    ch,
                    a
                );
            }
        }
        let lo = x0.max(y0);
        let hi = x1.min(y1);
        if lo < hi {
            let _ = writeln!(
                s,
                r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="orange" stroke-width="2" stroke-dasharray="2,4"/>"#,
                sx(lo),
                sy(lo),
                sx(hi),
                sy(hi)
            );
        }
        let _ = writeln!(s, r#"<text x="{}" y="30" text-anchor="middle" font-size="16">{title}</text>"#, M + W / 2.0);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">label ({unit})</text>"#,
            M + W / 2.0,
            W + M + 35.0
        );
        let _ = writeln!(
            s,
            r#"<text x="20" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 20 {})">prediction ({unit})</text>"#,
            M + W / 2.0,
            M + W / 2.0
        );
        for (v, anchor) in [(x0, "start"), (x1, "end")] {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{}" text-anchor="{anchor}" font-size="10">{v:.0}</text>"#,
                sx(v),
                W + M + 15.0
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrates_to_one() {
        let x: Vec<f64> = (0..200).map(|i| 300.0 + (i * 37 % 101) as f64).collect();
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v + (i % 13) as f64 - 6.0).collect();
        let g = kde2d(&x, &y, Bandwidth::Silverman, 128).unwrap();
        assert!((g.integral() - 1.0).abs() < 1e-3, "{}", g.integral());
    }

    #[test]
    fn too_few() {
        assert!(matches!(kde2d(&[1.0; 9], &[1.0; 9], Bandwidth::Silverman, 64), Err(EvalError::TooFewPoints { .. })));
    }

    #[test]
    fn svg_has_identity_line() {
        let x: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let g = kde2d(&x, &x, Bandwidth::Silverman, 32).unwrap();
        let svg = g.to_svg("QT", "ms");
        assert!(svg.contains("stroke=\"orange\""));
        assert!(svg.contains("stroke-dasharray"));
        assert_eq!(g.to_csv().lines().count(), 1 + 32 * 32);
    }
}
