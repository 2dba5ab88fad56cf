//! Rational-ratio polyphase resampling with a Kaiser-windowed sinc kernel.

use std::f64::consts::PI;

use super::SigprocError;

/// Zero crossings of the prototype sinc on each side, counted at the slower
/// of the two rates.
const HALF_ZERO_CROSSINGS: usize = 24;
/// Passband edge as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.94;
const KAISER_BETA: f64 = 9.0;

/// Resampler for a fixed `from_rate -> to_rate` pair (`L/M` after reduction).
#[derive(Debug, Clone)]
pub struct Resampler {
    up: usize,
    down: usize,
    /// taps per phase
    width: usize,
    /// `bank[phase][j]` weights input sample `base + j - (width/2 - 1)`.
    bank: Vec<Vec<f64>>,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 { 1.0 } else { (PI * x).sin() / (PI * x) }
}

impl Resampler {
    pub fn new(from_rate: u32, to_rate: u32) -> Result<Self, SigprocError> {
        if from_rate == 0 || to_rate == 0 {
            return Err(SigprocError::InvalidRate { from_rate, to_rate });
        }
        let g = gcd(from_rate as usize, to_rate as usize);
        let (up, down) = (to_rate as usize / g, from_rate as usize / g);
        if up == 1 && down == 1 {
            return Ok(Self { up, down, width: 1, bank: vec![vec![1.0]] });
        }
        // cutoff in cycles per upsampled sample
        let fc = 0.5 * ROLLOFF / up.max(down) as f64;
        // half-length of the prototype in upsampled samples
        let half = (HALF_ZERO_CROSSINGS as f64 / (2.0 * fc)).ceil();
        let width = 2 * ((half / up as f64).ceil() as usize + 1);
        let i0_beta = bessel_i0(KAISER_BETA);
        let bank = (0..up)
            .map(|phase| {
                (0..width)
                    .map(|j| {
                        // distance (in upsampled samples) between output and input tap
                        let offset = j as isize - (width / 2 - 1) as isize;
                        let d = phase as f64 - (offset * up as isize) as f64;
                        if d.abs() > half {
                            return 0.0;
                        }
                        let r = d / half;
                        let w = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0_beta;
                        up as f64 * 2.0 * fc * sinc(2.0 * fc * d) * w
                    })
                    .collect()
            })
            .collect();
        Ok(Self { up, down, width, bank })
    }

    pub fn ratio(&self) -> (usize, usize) {
        (self.up, self.down)
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        ((input_len * self.up) as f64 / self.down as f64).round() as usize
    }

    /// Edges are handled by mirror reflection of the input.
    pub fn process(&self, x: &[f64]) -> Vec<f64> {
        if self.up == 1 && self.down == 1 {
            return x.to_vec();
        }
        let n = x.len() as isize;
        let at = |i: isize| -> f64 {
            if n == 1 {
                return x[0];
            }
            let period = 2 * (n - 1);
            let mut j = i.rem_euclid(period);
            if j >= n {
                j = period - j;
            }
            x[j as usize]
        };
        let lead = (self.width / 2 - 1) as isize;
        (0..self.output_len(x.len()))
            .map(|m| {
                let t = m * self.down;
                let base = (t / self.up) as isize;
                let taps = &self.bank[t % self.up];
                let start = base - lead;
                if start >= 0 && start + self.width as isize <= n {
                    let s = start as usize;
                    taps.iter().zip(&x[s..s + self.width]).map(|(h, v)| h * v).sum()
                } else {
                    taps.iter().enumerate().map(|(j, h)| h * at(start + j as isize)).sum()
                }
            })
            .collect()
    }
}

/// One-shot convenience wrapper around [`Resampler`].
pub fn resample(samples: &[f64], from_rate: u32, to_rate: u32) -> Result<Vec<f64>, SigprocError> {
    if samples.is_empty() {
        return Err(SigprocError::Empty);
    }
    Ok(Resampler::new(from_rate, to_rate)?.process(samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bessel_reference_values() {
        assert!((bessel_i0(0.0) - 1.0).abs() < 1e-15);
        // I0(1) = 1.2660658777520082
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_2).abs() < 1e-13);
    }

    #[test]
    fn identity_rate() {
        let x = vec![1.0, -3.0, 2.5];
        assert_eq!(resample(&x, 250, 250).unwrap(), x);
    }

    #[test]
    fn lengths() {
        let x = vec![0.0; 5000];
        assert_eq!(resample(&x, 500, 250).unwrap().len(), 2500);
        assert_eq!(resample(&vec![0.0; 3600], 360, 250).unwrap().len(), 2500);
        assert_eq!(resample(&vec![0.0; 2500], 250, 500).unwrap().len(), 5000);
    }

    #[test]
    fn errors() {
        assert!(matches!(resample(&[], 500, 250), Err(SigprocError::Empty)));
        assert!(matches!(resample(&[1.0], 0, 250), Err(SigprocError::InvalidRate { .. })));
    }

    #[test]
    fn dc_gain_is_unity_for_every_phase() {
        let r = Resampler::new(250, 360).unwrap();
        for taps in &r.bank {
            let s: f64 = taps.iter().sum();
            assert!((s - 1.0).abs() < 1e-3, "{s}");
        }
    }
}
