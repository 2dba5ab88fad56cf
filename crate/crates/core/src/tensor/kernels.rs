use serde::{Deserialize, Serialize};

use super::Scalar;

/// Zero padding applied to the two ends of the length axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub const NONE: Padding = Padding { left: 0, right: 0 };

    pub fn symmetric(p: usize) -> Self {
        Self { left: p, right: p }
    }

    /// Padding that yields `ceil(len / stride)` outputs. The extra sample of an
    /// odd total goes to the right.
    pub fn same(len: usize, kernel: usize, stride: usize) -> Self {
        let out = len.div_ceil(stride);
        let total = ((out.saturating_sub(1)) * stride + kernel).saturating_sub(len);
        Self { left: total / 2, right: total - total / 2 }
    }

    pub fn output_len(&self, len: usize, kernel: usize, stride: usize) -> Option<usize> {
        let padded = len + self.left + self.right;
        if kernel == 0 || stride == 0 || kernel > padded {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }
}

/// Unfolds one `[in_ch, len]` item into a `[in_ch * k, out_len]` column matrix.
pub(crate) fn im2col<T: Scalar>(
    x: &[T],
    in_ch: usize,
    len: usize,
    k: usize,
    stride: usize,
    pad: Padding,
    out_len: usize,
    cols: &mut [T],
) {
    debug_assert_eq!(cols.len(), in_ch * k * out_len);
    for c in 0..in_ch {
        let xc = &x[c * len..(c + 1) * len];
        for kk in 0..k {
            let row = &mut cols[(c * k + kk) * out_len..(c * k + kk + 1) * out_len];
            // input index of output t is t * stride + kk - left
            let (lo, hi) = valid_range(kk, stride, pad.left, len, out_len);
            row[..lo].fill(T::zero());
            row[hi..].fill(T::zero());
            if stride == 1 {
                let start = lo + kk - pad.left;
                row[lo..hi].copy_from_slice(&xc[start..start + (hi - lo)]);
            } else {
                for (t, r) in row.iter_mut().enumerate().take(hi).skip(lo) {
                    *r = xc[t * stride + kk - pad.left];
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a column matrix back into `dx`.
pub(crate) fn col2im<T: Scalar>(
    cols: &[T],
    in_ch: usize,
    len: usize,
    k: usize,
    stride: usize,
    pad: Padding,
    out_len: usize,
    dx: &mut [T],
) {
    for c in 0..in_ch {
        let dxc = &mut dx[c * len..(c + 1) * len];
        for kk in 0..k {
            let row = &cols[(c * k + kk) * out_len..(c * k + kk + 1) * out_len];
            let (lo, hi) = valid_range(kk, stride, pad.left, len, out_len);
            if stride == 1 {
                let start = lo + kk - pad.left;
                for (d, &r) in dxc[start..start + (hi - lo)].iter_mut().zip(&row[lo..hi]) {
                    *d = *d + r;
                }
            } else {
                for (t, &r) in row.iter().enumerate().take(hi).skip(lo) {
                    let i = t * stride + kk - pad.left;
                    dxc[i] = dxc[i] + r;
                }
            }
        }
    }
}

/// Output positions `t` in `[lo, hi)` whose input index `t*stride + kk - left`
/// falls inside `[0, len)`.
fn valid_range(kk: usize, stride: usize, left: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if kk >= left { 0 } else { (left - kk).div_ceil(stride) };
    // t*stride + kk - left <= len - 1
    let hi = if len + left < kk + 1 {
        0
    } else {
        ((len + left - kk - 1) / stride + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_lengths() {
        assert_eq!(Padding::same(2500, 16, 1), Padding { left: 7, right: 8 });
        assert_eq!(Padding::same(2500, 16, 1).output_len(2500, 16, 1), Some(2500));
        for (len, out) in [(2500, 1250), (1250, 625), (625, 313), (313, 157)] {
            let p = Padding::same(len, 16, 2);
            assert_eq!(p.output_len(len, 16, 2), Some(out));
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)>
        let (in_ch, len, k, stride) = (2, 11, 4, 2);
        let pad = Padding::same(len, k, stride);
        let out_len = pad.output_len(len, k, stride).unwrap();
        let x: Vec<f64> = (0..in_ch * len).map(|i| (i as f64 * 0.37).sin()).collect();
        let c: Vec<f64> = (0..in_ch * k * out_len).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&x, in_ch, len, k, stride, pad, out_len, &mut cols);
        let mut dx = vec![0.0; x.len()];
        col2im(&c, in_ch, len, k, stride, pad, out_len, &mut dx);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
