//! Small numeric helpers shared across modules.

use crate::error::{invalid, Result};

pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
pub fn phi(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal CDF via erfc, accurate in both tails.
pub fn big_phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Nearest-rank percentile: the value at rank ceil(p/100 * n) of the sorted
/// data, with rank clamped to [1, n].
pub fn nearest_rank(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return invalid("percentile of an empty set");
    }
    if !(0.0..=100.0).contains(&p) {
        return invalid(format!("percentile {p} outside [0, 100]"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ceil_count(p / 100.0, n).clamp(1, n);
    Ok(sorted[rank - 1])
}

/// ceil(q * n) without float noise pushing exact products up a notch.
pub(crate) fn ceil_count(q: f64, n: usize) -> usize {
    let x = q * n as f64;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * (n as f64).max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (n - 1 denominator).
pub fn sample_var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Mean and its standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    (mean(xs), (sample_var(xs) / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_examples() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(nearest_rank(&v, 100.0).unwrap(), 4.0);
        assert_eq!(nearest_rank(&v, 50.0).unwrap(), 2.0);
        assert_eq!(nearest_rank(&v, 0.0).unwrap(), 1.0);
        assert_eq!(nearest_rank(&[5.0, 5.0, 5.0], 37.0).unwrap(), 5.0);
        assert!(nearest_rank(&[], 50.0).is_err());
    }

    #[test]
    fn normal_reference_values() {
        assert!((big_phi(0.0) - 0.5).abs() < 1e-16);
        assert!((big_phi(1.959963984540054) - 0.975).abs() < 1e-15);
        assert!((big_phi(-8.0) - 6.220960574271785e-16).abs() < 1e-29);
        assert!((phi(0.0) - INV_SQRT_2PI).abs() < 1e-16);
    }
}
