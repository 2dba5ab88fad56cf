//! Butterworth sections and zero-phase forward-backward filtering.

use std::f64::consts::PI;

use super::SigprocError;

/// One biquad in direct form II transposed, normalized so `a0 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn run(&self, x: &mut [f64], z: [f64; 2]) {
        let [b0, b1, b2] = self.b;
        let [_, a1, a2] = self.a;
        let (mut z1, mut z2) = (z[0], z[1]);
        for v in x.iter_mut() {
            let xi = *v;
            let y = b0 * xi + z1;
            z1 = b1 * xi - a1 * y + z2;
            z2 = b2 * xi - a2 * y;
            *v = y;
        }
    }

    /// State that makes the section sit at steady state for a constant input
    /// equal to `x0`.
    fn steady_state(&self, x0: f64) -> [f64; 2] {
        let [b0, b1, b2] = self.b;
        let [_, a1, a2] = self.a;
        let dc_gain = (b0 + b1 + b2) / (1.0 + a1 + a2);
        let y = dc_gain * x0;
        let z2 = b2 * x0 - a2 * y;
        let z1 = b1 * x0 - a1 * y + z2;
        [z1, z2]
    }

    fn response(&self, f: f64, rate: f64) -> f64 {
        let w = 2.0 * PI * f / rate;
        let (c1, s1, c2, s2) = (w.cos(), w.sin(), (2.0 * w).cos(), (2.0 * w).sin());
        let num = (self.b[0] + self.b[1] * c1 + self.b[2] * c2, -(self.b[1] * s1 + self.b[2] * s2));
        let den = (self.a[0] + self.a[1] * c1 + self.a[2] * c2, -(self.a[1] * s1 + self.a[2] * s2));
        (num.0.hypot(num.1)) / (den.0.hypot(den.1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Lowpass,
    Highpass,
}

/// Cascade of biquads.
#[derive(Debug, Clone, PartialEq)]
pub struct SosFilter {
    pub sections: Vec<Biquad>,
}

impl SosFilter {
    /// Even-order Butterworth lowpass via the bilinear transform with
    /// frequency prewarping.
    pub fn butter_lowpass(order: usize, cutoff: f64, rate: f64) -> Result<Self, SigprocError> {
        Self::design(order, cutoff, rate, Kind::Lowpass)
    }

    pub fn butter_highpass(order: usize, cutoff: f64, rate: f64) -> Result<Self, SigprocError> {
        Self::design(order, cutoff, rate, Kind::Highpass)
    }

    /// Order-4 highpass at `low` followed by order-4 lowpass at `high`.
    pub fn butter_bandpass(low: f64, high: f64, rate: f64) -> Result<Self, SigprocError> {
        if !(low > 0.0 && low < high && high < rate / 2.0) {
            return Err(SigprocError::InvalidBand { low, high, rate });
        }
        let mut sections = Self::butter_highpass(4, low, rate)?.sections;
        sections.extend(Self::butter_lowpass(4, high, rate)?.sections);
        Ok(Self { sections })
    }

    fn design(order: usize, cutoff: f64, rate: f64, kind: Kind) -> Result<Self, SigprocError> {
        if order == 0 || order % 2 != 0 || !(cutoff > 0.0 && cutoff < rate / 2.0) {
            return Err(SigprocError::InvalidBand { low: cutoff, high: cutoff, rate });
        }
        // bilinear transform s = 2 fs (z - 1)/(z + 1), prewarped analog cutoff
        let k = (PI * cutoff / rate).tan();
        let k2 = k * k;
        let sections = (0..order / 2)
            .map(|i| {
                let theta = PI * (2 * i + 1) as f64 / (2 * order) as f64;
                // pole pair quality: s^2 + 2 sin(theta) s + 1
                let q2 = 2.0 * theta.sin();
                let a0 = 1.0 + q2 * k + k2;
                let a1 = 2.0 * (k2 - 1.0) / a0;
                let a2 = (1.0 - q2 * k + k2) / a0;
                let b = match kind {
                    Kind::Lowpass => [k2 / a0, 2.0 * k2 / a0, k2 / a0],
                    Kind::Highpass => [1.0 / a0, -2.0 / a0, 1.0 / a0],
                };
                Biquad { b, a: [1.0, a1, a2] }
            })
            .collect();
        Ok(Self { sections })
    }

    /// Magnitude response at `f` Hz.
    pub fn magnitude(&self, f: f64, rate: f64) -> f64 {
        self.sections.iter().map(|s| s.response(f, rate)).product()
    }

    /// Causal filtering with steady-state initial conditions for the first sample.
    pub fn filter_in_place(&self, x: &mut [f64]) {
        let Some(&x0) = x.first() else { return };
        let mut level = x0;
        for s in &self.sections {
            let z = s.steady_state(level);
            level *= (s.b.iter().sum::<f64>()) / (s.a.iter().sum::<f64>());
            s.run(x, z);
        }
    }

    /// Number of samples until the impulse response envelope stays below
    /// `1e-3` of its peak, capped at `cap`.
    pub fn settling_len(&self, cap: usize) -> usize {
        let mut h = vec![0.0; cap.max(1)];
        h[0] = 1.0;
        for s in &self.sections {
            s.run(&mut h, [0.0, 0.0]);
        }
        let peak = h.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let tol = 1e-3 * peak;
        h.iter().rposition(|v| v.abs() > tol).map_or(1, |i| i + 1)
    }

    /// Zero-phase forward-backward filtering. The signal is extended on both
    /// sides by mirror reflection of `2 × settling_len` samples (repeated as
    /// needed for short inputs), and each pass starts from steady state.
    pub fn filtfilt(&self, x: &[f64], rate: f64) -> Vec<f64> {
        if x.is_empty() {
            return Vec::new();
        }
        let cap = (rate * 120.0) as usize;
        let pad = 2 * self.settling_len(cap);
        let mut ext = reflect_pad(x, pad);
        self.filter_in_place(&mut ext);
        ext.reverse();
        self.filter_in_place(&mut ext);
        ext.reverse();
        ext[pad..pad + x.len()].to_vec()
    }
}

/// Symmetric extension `... x2 x1 | x0 x1 ... xn-1 | xn-2 ...`, periodically
/// continued when `pad` exceeds the signal length.
fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len() as isize;
    let period = if n > 1 { 2 * (n - 1) } else { 1 };
    let at = |i: isize| -> f64 {
        if n == 1 {
            return x[0];
        }
        let mut j = i.rem_euclid(period);
        if j >= n {
            j = period - j;
        }
        x[j as usize]
    };
    let p = pad as isize;
    (-p..n + p).map(at).collect()
}
