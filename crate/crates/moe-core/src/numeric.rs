//! Scalar special functions shared by the tensor ops and the losses.

use std::f64::consts::PI;

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Error function, accurate to well under 1e-12 absolute error.
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// CDF of `N(0, sigma^2)`.
pub fn normal_cdf(x: f64, sigma: f64) -> f64 {
    0.5 * (1.0 + erf(x / (sigma * SQRT_2)))
}

/// Density of `N(0, sigma^2)`.
pub fn normal_pdf(x: f64, sigma: f64) -> f64 {
    (-x * x / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * PI).sqrt())
}

/// Exact GELU: `x * Phi(x)` under the standard normal CDF.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x, 1.0)
}

pub fn gelu_derivative(x: f64) -> f64 {
    normal_cdf(x, 1.0) + x * normal_pdf(x, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_matches_high_precision_reference() {
        // reference values computed with 50-digit arithmetic
        let cases = [
            (0.5, 0.5204998778130465),
            (1.5, 0.9661051464753107),
            (3.0, 0.9999779095030014),
            (0.1234, 0.13853843435647299),
        ];
        for (x, want) in cases {
            assert!((erf(x) - want).abs() < 1e-12, "erf({x})");
            assert!((erf(-x) + want).abs() < 1e-12, "erf(-{x})");
        }
    }

    #[test]
    fn normal_cdf_reference_points() {
        assert!((normal_cdf(0.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.0, 1.0) - 0.8413447460685429).abs() < 1e-12);
        assert!((normal_cdf(-3.0, 1.0) - 0.0013498980316300945).abs() < 1e-15);
        // scaling: Phi_sigma(x) = Phi_1(x / sigma)
        assert!((normal_cdf(1.0, 2.0) - normal_cdf(0.5, 1.0)).abs() < 1e-15);
    }

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.8413447460685429).abs() < 1e-12);
        // odd-ish symmetry: gelu(x) - x = gelu(-x) reflected
        let x = 0.7;
        assert!(((gelu(x) - gelu(-x)) - x).abs() < 1e-12);
    }
}
