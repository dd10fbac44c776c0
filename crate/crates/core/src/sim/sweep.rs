use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::experiment::{run_detection_experiment, ExperimentConfig, ExperimentResult};
use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Epsilon,
    Tau,
    TargetClassMass,
}

impl FromStr for SweepParameter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "epsilon" => Ok(Self::Epsilon),
            "tau" => Ok(Self::Tau),
            "target_class_mass" | "target-class-mass" => Ok(Self::TargetClassMass),
            other => Err(format!("unknown sweep parameter `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub result: ExperimentResult,
}

impl SweepRow {
    pub fn mean_positive_snr_soft(&self) -> Option<f64> {
        self.result.soft.as_ref().map(|m| m.mean_positive_snr)
    }

    pub fn mean_positive_snr_hard(&self) -> Option<f64> {
        self.result.hard.as_ref().map(|m| m.mean_positive_snr)
    }
}

/// Runs the experiment once per value, changing only `parameter`.
pub fn sweep_parameter(base: &ExperimentConfig, parameter: SweepParameter, values: &[f64]) -> Result<Vec<SweepRow>, SimError> {
    if values.is_empty() {
        return Err(SimError::InvalidParameter("sweep needs at least one value".into()));
    }
    values
        .iter()
        .map(|&value| {
            let mut cfg = base.clone();
            match parameter {
                SweepParameter::Epsilon => cfg.epsilon = value,
                SweepParameter::Tau => cfg.tau = value,
                SweepParameter::TargetClassMass => cfg.target_class_mass = Some(value),
            }
            Ok(SweepRow {
                value,
                result: run_detection_experiment(&cfg)?,
            })
        })
        .collect()
}

/// Whitespace-separated table, one row per value. Modes that were not run
/// show `nan`.
pub fn format_sweep_table(parameter: SweepParameter, rows: &[SweepRow]) -> String {
    let name = match parameter {
        SweepParameter::Epsilon => "epsilon",
        SweepParameter::Tau => "tau",
        SweepParameter::TargetClassMass => "target_class_mass",
    };
    let mut out = format!(
        "# {name} map_soft map_hard victim_acc argmax_soft_acc sampling_hard_acc snr_soft snr_hard\n"
    );
    for row in rows {
        let r = &row.result;
        let pick = |m: Option<&super::experiment::ModeResult>, f: fn(&super::experiment::ModeResult) -> f64| m.map(f).unwrap_or(f64::NAN);
        let _ = writeln!(
            out,
            "{} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
            row.value,
            pick(r.soft.as_ref(), |m| m.map),
            pick(r.hard.as_ref(), |m| m.map),
            r.victim_acc,
            r.argmax_soft_acc,
            r.sampling_hard_acc,
            pick(r.soft.as_ref(), |m| m.mean_positive_snr),
            pick(r.hard.as_ref(), |m| m.mean_positive_snr),
        );
    }
    out
}
