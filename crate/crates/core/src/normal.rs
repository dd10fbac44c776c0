//! Standard normal distribution helpers.

use std::f64::consts::SQRT_2;

/// `Φ(z)`, evaluated through the complementary error function so the lower
/// tail keeps full relative precision.
pub fn standard_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}
