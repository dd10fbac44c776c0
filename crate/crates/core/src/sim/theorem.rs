use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::{stream, SimError};
use crate::watermark::{argmax_label, perturb, sample_hard, ProbabilityVector};

const TAG_THEOREM: u64 = 20;

/// Distribution of the victim's probability for class 0 in a binary task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PDist {
    Beta { a: f64, b: f64 },
    PointMass { p: f64 },
    Uniform,
}

impl PDist {
    fn sampler(&self) -> Result<Box<dyn Fn(&mut rand_chacha::ChaCha20Rng) -> f64>, SimError> {
        match *self {
            PDist::Beta { a, b } => {
                let beta = Beta::new(a, b).map_err(|e| SimError::InvalidParameter(format!("beta({a}, {b}): {e}")))?;
                Ok(Box::new(move |rng| beta.sample(rng)))
            }
            PDist::PointMass { p } => {
                if !(0.0..=1.0).contains(&p) {
                    return Err(SimError::InvalidParameter(format!("point mass {p} outside [0, 1]")));
                }
                Ok(Box::new(move |_| p))
            }
            PDist::Uniform => Ok(Box::new(|rng| rng.random::<f64>())),
        }
    }
}

/// Empirical accuracies of the binary victim and its two watermarked output
/// modes, with the corresponding lower bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoremCheck {
    pub epsilon: f64,
    pub tau: f64,
    pub samples: usize,
    pub acc_victim: f64,
    pub acc_soft_emp: f64,
    pub acc_hard_emp: f64,
    pub bound_soft: f64,
    pub bound_hard: f64,
    pub se_soft: f64,
    pub se_hard: f64,
    /// Estimate of `P[0.5 − ε ≤ p̂ ≤ 0.5 + ε]`.
    pub band_mass: f64,
    /// Estimate of `E[2p̂² − 2p̂ + 1]`.
    pub agreement: f64,
    /// `E[max(p̂, 1 − p̂)]`, the calibrated victim's accuracy without label noise.
    pub acc_victim_expected: f64,
    /// Both bounds evaluated on `acc_victim_expected`; every term is then an
    /// average over p̂ only.
    pub bound_soft_expected: f64,
    pub bound_hard_expected: f64,
}

impl TheoremCheck {
    pub fn holds(&self) -> bool {
        self.acc_soft_emp >= self.bound_soft - 3.0 * self.se_soft && self.acc_hard_emp >= self.bound_hard - 3.0 * self.se_hard
    }
}

impl std::fmt::Display for TheoremCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "eps {} tau {}: acc_victim {:.6}, acc_soft {:.6} vs bound {:.6}, acc_hard {:.6} vs bound {:.6} (se {:.2e}, {:.2e})",
            self.epsilon,
            self.tau,
            self.acc_victim,
            self.acc_soft_emp,
            self.bound_soft,
            self.acc_hard_emp,
            self.bound_hard,
            self.se_soft,
            self.se_hard
        )
    }
}

/// Monte Carlo check of the argmax-soft and sampling-hard accuracy bounds on
/// a calibrated binary victim. Labels are drawn from the victim's own
/// probabilities, the phase is uniform and selection happens with
/// probability `tau`. Fails with every number attached when an empirical
/// accuracy falls more than three standard errors below its bound.
pub fn theorem_bound_check(dist: PDist, epsilon: f64, tau: f64, samples: usize, seed: u64) -> Result<TheoremCheck, SimError> {
    if !(0.0..=0.5).contains(&epsilon) || !(0.0..=1.0).contains(&tau) || samples == 0 {
        return Err(SimError::InvalidParameter(format!(
            "need epsilon in [0, 0.5], tau in [0, 1], samples > 0; got {epsilon}, {tau}, {samples}"
        )));
    }
    let draw = dist.sampler()?;
    let mut rng = stream(seed, TAG_THEOREM, 0);
    let (mut victim, mut soft, mut hard, mut band, mut agreement) = (0usize, 0usize, 0usize, 0usize, 0.0);
    let mut expected = 0.0;
    for _ in 0..samples {
        let p = draw(&mut rng);
        let p_hat = ProbabilityVector::new(vec![p, 1.0 - p]).expect("binary vector");
        let truth = if rng.random::<f64>() < p { 0 } else { 1 };
        let selected = rng.random::<f64>() < tau;
        let z = (TAU * rng.random::<f64>()).cos();

        let clean = argmax_label(&p_hat);
        let (soft_label, hard_label) = if selected {
            let y = perturb(&p_hat, 0, z, epsilon);
            (argmax_label(&y), sample_hard(&y, &mut rng))
        } else {
            (clean, clean)
        };
        victim += usize::from(clean == truth);
        soft += usize::from(soft_label == truth);
        hard += usize::from(hard_label == truth);
        band += usize::from((p - 0.5).abs() <= epsilon);
        agreement += 2.0 * p * p - 2.0 * p + 1.0;
        expected += p.max(1.0 - p);
    }
    let n = samples as f64;
    let acc_victim = victim as f64 / n;
    let band_mass = band as f64 / n;
    let agreement = agreement / n;
    let acc_victim_expected = expected / n;
    let soft_bound = |acc: f64| acc - tau * (0.5 + epsilon) * band_mass;
    let hard_bound = |acc: f64| (1.0 - tau) * acc + tau / (1.0 + 2.0 * epsilon) * agreement;
    let se = |a: f64| (a * (1.0 - a) / n).sqrt();
    let acc_soft_emp = soft as f64 / n;
    let acc_hard_emp = hard as f64 / n;
    let check = TheoremCheck {
        epsilon,
        tau,
        samples,
        acc_victim,
        acc_soft_emp,
        acc_hard_emp,
        bound_soft: soft_bound(acc_victim),
        bound_hard: hard_bound(acc_victim),
        se_soft: se(acc_soft_emp),
        se_hard: se(acc_hard_emp),
        band_mass,
        agreement,
        acc_victim_expected,
        bound_soft_expected: soft_bound(acc_victim_expected),
        bound_hard_expected: hard_bound(acc_victim_expected),
    };
    if check.holds() {
        Ok(check)
    } else {
        Err(SimError::BoundViolation(Box::new(check)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_watermark_matches_victim() {
        let c = theorem_bound_check(PDist::Uniform, 0.0, 0.0, 100_000, 1).unwrap();
        assert_eq!(c.acc_soft_emp, c.acc_victim);
        assert_eq!(c.acc_hard_emp, c.acc_victim);
        assert_eq!(c.bound_soft, c.acc_victim);
        assert_eq!(c.bound_hard, c.acc_victim);
    }

    #[test]
    fn point_mass_hard_accuracy() {
        let eps = 0.2;
        let c = theorem_bound_check(PDist::PointMass { p: 1.0 }, eps, 1.0, 200_000, 2).unwrap();
        assert_eq!(c.acc_victim, 1.0);
        assert!((c.bound_hard - 1.0 / (1.0 + 2.0 * eps)).abs() < 1e-12);
        // the hard label keeps the target with probability (1 + ε(1 + z))/(1 + 2ε), averaging (1 + ε)/(1 + 2ε)
        let expected = (1.0 + eps) / (1.0 + 2.0 * eps);
        assert!((c.acc_hard_emp - expected).abs() < 4.0 * c.se_hard.max(1e-3), "{c}");
    }

    #[test]
    fn invalid_inputs() {
        assert!(theorem_bound_check(PDist::Uniform, 0.6, 0.5, 10, 0).is_err());
        assert!(theorem_bound_check(PDist::Beta { a: -1.0, b: 1.0 }, 0.1, 0.5, 10, 0).is_err());
        assert!(theorem_bound_check(PDist::PointMass { p: 1.5 }, 0.1, 0.5, 10, 0).is_err());
    }
}
