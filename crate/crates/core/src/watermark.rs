//! Output perturbation.
//!
//! For a selected input the target class receives `ε(1 + z)` extra mass and
//! every other class receives `ε(1 - z)/(m - 1)`, where `z` is a cosine of the
//! token's phase hash; the vector is then rescaled by `1/(1 + 2ε)` so it stays
//! a distribution. Unselected inputs pass through untouched.

use std::f64::consts::TAU;
use std::ops::Deref;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keys::{HashRole, KeyError, OutputMode, WatermarkConfig, WatermarkKey};

/// Sums within this distance of one are accepted as-is.
pub const SUM_TOLERANCE: f64 = 1e-9;
/// Sums within this distance of one are renormalised; anything worse is rejected.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum WatermarkError {
    #[error("invalid probability vector: {0}")]
    InvalidProbability(String),
    #[error("probability vector has {found} classes, key expects {expected}")]
    ClassCountMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Key(#[from] KeyError),
}

/// A categorical distribution over the classes.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    /// Validates `probs`. Vectors whose sum is off by more than
    /// [`SUM_TOLERANCE`] but at most [`RENORMALIZE_TOLERANCE`] are rescaled.
    pub fn new(probs: Vec<f64>) -> Result<Self, WatermarkError> {
        if probs.is_empty() {
            return Err(WatermarkError::InvalidProbability("empty vector".into()));
        }
        if let Some(bad) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(WatermarkError::InvalidProbability(format!(
                "entry {bad} outside [0, 1]"
            )));
        }
        let sum: f64 = probs.iter().sum();
        let gap = (sum - 1.0).abs();
        if gap <= SUM_TOLERANCE {
            Ok(Self(probs))
        } else if gap <= RENORMALIZE_TOLERANCE {
            Ok(Self(probs.into_iter().map(|p| p / sum).collect()))
        } else {
            Err(WatermarkError::InvalidProbability(format!(
                "entries sum to {sum}"
            )))
        }
    }

    /// Point mass on `class`.
    pub fn one_hot(classes: usize, class: usize) -> Self {
        let mut v = vec![0.0; classes];
        v[class] = 1.0;
        Self(v)
    }

    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0 / classes as f64; classes])
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ProbabilityVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl<'de> Deserialize<'de> for ProbabilityVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        ProbabilityVector::new(v).map_err(serde::de::Error::custom)
    }
}

/// What the protected API returns.
#[derive(Debug, Clone, PartialEq)]
pub enum Answer {
    Soft(ProbabilityVector),
    Hard(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WatermarkedOutput {
    pub answer: Answer,
    /// Whether the perturbation was applied.
    pub selected: bool,
}

impl WatermarkedOutput {
    pub fn mode(&self) -> OutputMode {
        match self.answer {
            Answer::Soft(_) => OutputMode::Soft,
            Answer::Hard(_) => OutputMode::Hard,
        }
    }
}

/// `cos(2π f_w g)` for the target class and its negation for every other
/// class, `g` being the token's phase hash.
pub fn periodic_signal(key: &WatermarkKey, token: usize, class: usize) -> Result<f64, KeyError> {
    key.check_class(class)?;
    let g = key.hash(HashRole::Phase, token)?;
    Ok(signal_from_hash(key, g, class))
}

/// Signal value for a precomputed phase hash. The non-target value is the
/// exact negation of the target value, so the two always sum to zero.
pub fn signal_from_hash(key: &WatermarkKey, phase_hash: f64, class: usize) -> f64 {
    let z = (TAU * key.frequency() * phase_hash).cos();
    if class == key.target_class() {
        z
    } else {
        -z
    }
}

/// Applies the perturbation for target-class signal `z` regardless of selection.
pub fn perturb(p_hat: &ProbabilityVector, target: usize, z: f64, epsilon: f64) -> ProbabilityVector {
    if epsilon == 0.0 {
        return p_hat.clone();
    }
    let m = p_hat.classes() as f64;
    let norm = 1.0 + 2.0 * epsilon;
    let other = epsilon * (1.0 - z) / (m - 1.0);
    let out = p_hat
        .iter()
        .enumerate()
        .map(|(c, &p)| {
            let bump = if c == target { epsilon * (1.0 + z) } else { other };
            ((p + bump) / norm).clamp(0.0, 1.0)
        })
        .collect();
    ProbabilityVector(out)
}

/// Watermarks one soft prediction. Tokens outside the key's vocabulary pass
/// through unselected.
pub fn apply_watermark(
    key: &WatermarkKey,
    cfg: &WatermarkConfig,
    token: usize,
    p_hat: &ProbabilityVector,
) -> Result<(ProbabilityVector, bool), WatermarkError> {
    if p_hat.classes() != key.classes() {
        return Err(WatermarkError::ClassCountMismatch {
            expected: key.classes(),
            found: p_hat.classes(),
        });
    }
    if token >= key.vocab_size() || !key.is_selected(cfg, token)? {
        return Ok((p_hat.clone(), false));
    }
    let z = periodic_signal(key, token, key.target_class())?;
    Ok((perturb(p_hat, key.target_class(), z, cfg.epsilon()), true))
}

/// Full serving path: watermark, then in hard mode either sample a label from
/// the perturbed vector (selected inputs) or return the plain argmax.
pub fn respond<R: Rng + ?Sized>(
    key: &WatermarkKey,
    cfg: &WatermarkConfig,
    token: usize,
    p_hat: &ProbabilityVector,
    rng: &mut R,
) -> Result<WatermarkedOutput, WatermarkError> {
    let (y_hat, selected) = apply_watermark(key, cfg, token, p_hat)?;
    let answer = match cfg.mode() {
        OutputMode::Soft => Answer::Soft(y_hat),
        OutputMode::Hard if selected => Answer::Hard(sample_hard(&y_hat, rng)),
        OutputMode::Hard => Answer::Hard(argmax_label(&y_hat)),
    };
    Ok(WatermarkedOutput { answer, selected })
}

/// Draws class `i` with probability `y_hat[i]`.
pub fn sample_hard<R: Rng + ?Sized>(y_hat: &ProbabilityVector, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &p) in y_hat.iter().enumerate() {
        if p > 0.0 {
            cum += p;
            last_positive = i;
            if u < cum {
                return i;
            }
        }
    }
    // rounding left `cum` just under one
    last_positive
}

/// Index of the largest probability; ties go to the smallest index.
pub fn argmax_label(y_hat: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in y_hat.iter().enumerate().skip(1) {
        if p > y_hat[best] {
            best = i;
        }
    }
    best
}

/// Counter-based random stream for hard-label sampling: one independent
/// ChaCha stream per `(seed, sequence)` pair.
pub fn sampling_stream(seed: u64, sequence: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(sequence);
    rng
}
