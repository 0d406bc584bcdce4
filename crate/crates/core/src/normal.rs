//! Standard normal distribution helpers.
//!
//! Tail probabilities go through `erfc` directly so that values far in the
//! tails keep full relative precision.

use statrs::function::erf::{erfc, erfc_inv};
use std::f64::consts::{FRAC_1_SQRT_2, SQRT_2};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub fn pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Lower tail `P(Z <= x)`.
#[inline]
pub fn cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Upper tail `P(Z > x)`.
#[inline]
pub fn sf(x: f64) -> f64 {
    0.5 * erfc(x * FRAC_1_SQRT_2)
}

/// Quantile function. Returns `-inf` at 0 and `+inf` at 1.
#[inline]
pub fn quantile(p: f64) -> f64 {
    -SQRT_2 * erfc_inv(2.0 * p)
}

/// Inverse upper tail: the `z` with `P(Z > z) = p`.
#[inline]
pub fn isf(p: f64) -> f64 {
    SQRT_2 * erfc_inv(2.0 * p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_values() {
        assert!((cdf(0.0) - 0.5).abs() < 1e-16);
        assert!((isf(0.025) - 1.959_963_984_540_054).abs() < 1e-12);
        assert!((quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-12);
        assert_eq!(quantile(0.0), f64::NEG_INFINITY);
        assert_eq!(quantile(1.0), f64::INFINITY);
        assert_eq!(isf(0.0), f64::INFINITY);
    }

    #[test]
    fn tails_keep_relative_precision() {
        let p = sf(10.0);
        assert!((p / 7.619_853_024_160_527e-24 - 1.0).abs() < 1e-10);
        assert!((isf(p) - 10.0).abs() < 1e-9);
        for &x in &[-6.0, -1.3, 0.2, 2.5] {
            assert!((quantile(cdf(x)) - x).abs() < 1e-9, "x={x}");
        }
        for &x in &[-2.5, 0.2, 7.0, 12.0] {
            assert!((isf(sf(x)) - x).abs() < 1e-9, "x={x}");
        }
    }
}
