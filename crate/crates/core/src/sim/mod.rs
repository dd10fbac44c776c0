//! Desk-scale distillation simulator: a calibrated victim over a discrete
//! vocabulary, students distilled from it, detection experiments, the
//! accuracy bounds check and parameter sweeps.

mod experiment;
mod student;
mod sweep;
mod task;
mod theorem;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::detect::DetectError;
use crate::keys::KeyError;
use crate::watermark::WatermarkError;

pub use experiment::{
    fidelity_monte_carlo, probe_tokens, run_detection_experiment, run_experiment_detailed, Analog, ExperimentConfig,
    ExperimentResult, ExperimentRun, FidelityReport, ModeResult, ModelRole, ProbeSet, ProbedModel,
};
pub use student::{distill_student, FeaturizedStudent, Loss, StudentModel, StudentSpec, TableStudent, TrainOptions, TrainReport};
pub use sweep::{format_sweep_table, sweep_parameter, SweepParameter, SweepRow};
pub use task::{make_task, victim_answer, SyntheticTask, TaskParams};
pub use theorem::{theorem_bound_check, PDist, TheoremCheck};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("bound violated: {0}")]
    BoundViolation(Box<TheoremCheck>),
    #[error(transparent)]
    Key(#[from] KeyError),
    #[error(transparent)]
    Watermark(#[from] WatermarkError),
    #[error(transparent)]
    Detect(#[from] DetectError),
}

/// Independent random stream for `(master seed, purpose tag, index)`.
pub fn stream(master: u64, tag: u64, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(master ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}
