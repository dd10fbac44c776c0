use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{stream, SimError};
use crate::keys::{WatermarkConfig, WatermarkKey};
use crate::watermark::{argmax_label, respond, ProbabilityVector, WatermarkedOutput};

const ZIPF_EXPONENT: f64 = 1.1;
const TAG_TASK: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskParams {
    pub vocab_size: usize,
    pub classes: usize,
    pub concentration: f64,
    /// Expected share of class `target_class` in each row; `None` is symmetric.
    pub target_class_mass: Option<f64>,
    pub target_class: usize,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            vocab_size: 2000,
            classes: 2,
            concentration: 1.0,
            target_class_mass: None,
            target_class: 0,
        }
    }
}

/// Calibrated victim: `pi[x]` is both the victim's prediction and the true
/// label distribution of token `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub vocab_size: usize,
    pub classes: usize,
    pub pi: Vec<ProbabilityVector>,
    pub token_freq: Vec<f64>,
}

pub fn make_task(seed: u64, params: &TaskParams) -> Result<SyntheticTask, SimError> {
    let TaskParams {
        vocab_size,
        classes: m,
        concentration,
        target_class_mass,
        target_class,
    } = *params;
    if vocab_size == 0 || m < 2 {
        return Err(SimError::InvalidParameter(format!(
            "need vocab_size >= 1 and classes >= 2, got {vocab_size} and {m}"
        )));
    }
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(SimError::InvalidParameter(format!("concentration {concentration} must be positive")));
    }
    let mut alpha = vec![concentration; m];
    if let Some(w) = target_class_mass {
        if !(w > 0.0 && w < 1.0) || target_class >= m {
            return Err(SimError::InvalidParameter(format!(
                "target class mass {w} must be in (0, 1) and target class {target_class} below {m}"
            )));
        }
        let total = concentration * m as f64;
        alpha.iter_mut().for_each(|a| *a = total * (1.0 - w) / (m - 1) as f64);
        alpha[target_class] = total * w;
    }
    let gammas: Vec<Gamma<f64>> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("positive shape"))
        .collect();

    let mut rng = stream(seed, TAG_TASK, 0);
    let mut pi = Vec::with_capacity(vocab_size);
    for _ in 0..vocab_size {
        pi.push(dirichlet_row(&gammas, &mut rng));
    }

    let mut ranks: Vec<usize> = (1..=vocab_size).collect();
    ranks.shuffle(&mut rng);
    let weights: Vec<f64> = ranks.iter().map(|&r| (r as f64).powf(-ZIPF_EXPONENT)).collect();
    let total: f64 = weights.iter().sum();
    let token_freq = weights.into_iter().map(|w| w / total).collect();

    Ok(SyntheticTask {
        vocab_size,
        classes: m,
        pi,
        token_freq,
    })
}

fn dirichlet_row<R: Rng>(gammas: &[Gamma<f64>], rng: &mut R) -> ProbabilityVector {
    loop {
        let draws: Vec<f64> = gammas.iter().map(|g| g.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        // tiny shapes can underflow every component
        if sum > 0.0 && sum.is_finite() {
            let row = draws.into_iter().map(|d| d / sum).collect();
            return ProbabilityVector::new(row).expect("normalised row");
        }
    }
}

impl SyntheticTask {
    /// Frequency-weighted accuracy of predicting `label(x)` for every token.
    pub fn accuracy_of(&self, label: impl Fn(usize) -> usize) -> f64 {
        (0..self.vocab_size)
            .map(|x| self.token_freq[x] * self.pi[x][label(x)])
            .sum()
    }

    /// Frequency-weighted expected accuracy of answering token `x` with a
    /// label drawn from `dist(x)`.
    pub fn sampled_accuracy_of(&self, dist: impl Fn(usize) -> Vec<f64>) -> f64 {
        (0..self.vocab_size)
            .map(|x| {
                let d = dist(x);
                self.token_freq[x] * d.iter().zip(self.pi[x].iter()).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum()
    }

    pub fn victim_accuracy(&self) -> f64 {
        self.accuracy_of(|x| argmax_label(&self.pi[x]))
    }
}

/// The watermarked victim answering one query; the output mode is the config's.
pub fn victim_answer<R: Rng + ?Sized>(
    task: &SyntheticTask,
    key: &WatermarkKey,
    cfg: &WatermarkConfig,
    x: usize,
    rng: &mut R,
) -> Result<WatermarkedOutput, SimError> {
    if x >= task.vocab_size {
        return Err(SimError::InvalidParameter(format!(
            "token {x} outside vocabulary of {}",
            task.vocab_size
        )));
    }
    Ok(respond(key, cfg, x, &task.pi[x], rng)?)
}
