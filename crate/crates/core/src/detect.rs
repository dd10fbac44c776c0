//! Probing a suspect model with a key, the detection report, the JSD
//! baseline and mean average precision over ranked suspects.

use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::io::{read_json_lines, to_json_lines, to_json_string, write_atomic, ProbeLine, RecordError};
use crate::keys::{HashRole, KeyError, WatermarkConfig, WatermarkKey};
use crate::spectral::{lomb_scargle, snr_score, FrequencyGrid, GridSpec, ProbeSeries, SnrResult, SpectralError};
use crate::watermark::{ProbabilityVector, WatermarkError};

/// Fewest selected probes accepted when every record is soft.
pub const MIN_SOFT_PROBES: usize = 8;
/// Fewest selected probes accepted once any record is a hard label; a 0/1
/// indicator carries far less signal per probe than a probability.
pub const MIN_HARD_PROBES: usize = 64;
pub const DEFAULT_THRESHOLD: f64 = 10.0;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("too few probes: {found} selected, need {required}")]
    TooFewProbes { found: usize, required: usize },
    #[error("probe record {index}: {reason}")]
    InvalidRecord { index: usize, reason: String },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("ranking trial {0} needs at least one positive and one negative score")]
    EmptyTrial(usize),
    #[error("ranking trial {0} contains a NaN score")]
    NanScore(usize),
    #[error(transparent)]
    Key(#[from] KeyError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Records(#[from] RecordError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// What a suspect returned for one probe input.
#[derive(Debug, Clone, PartialEq)]
pub enum ProbeOutput {
    Soft(ProbabilityVector),
    Hard(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRecord {
    pub x: usize,
    pub output: ProbeOutput,
}

impl ProbeRecord {
    pub fn soft(x: usize, probs: ProbabilityVector) -> Self {
        Self {
            x,
            output: ProbeOutput::Soft(probs),
        }
    }

    pub fn hard(x: usize, label: usize) -> Self {
        Self {
            x,
            output: ProbeOutput::Hard(label),
        }
    }

    pub fn is_hard(&self) -> bool {
        matches!(self.output, ProbeOutput::Hard(_))
    }

    fn from_line(index: usize, line: ProbeLine) -> Result<Self, DetectError> {
        let bad = |reason: String| DetectError::InvalidRecord { index, reason };
        let x = usize::try_from(line.x).map_err(|_| bad(format!("token id {} too large", line.x)))?;
        match (line.probs, line.label) {
            (Some(probs), None) => {
                let pv = ProbabilityVector::new(probs).map_err(|e: WatermarkError| bad(e.to_string()))?;
                Ok(Self::soft(x, pv))
            }
            (None, Some(label)) => {
                let label = usize::try_from(label).map_err(|_| bad(format!("label {label} too large")))?;
                Ok(Self::hard(x, label))
            }
            (Some(_), Some(_)) => Err(bad("has both probs and label".into())),
            (None, None) => Err(bad("has neither probs nor label".into())),
        }
    }

    pub fn to_line(&self) -> ProbeLine {
        match &self.output {
            ProbeOutput::Soft(p) => ProbeLine {
                x: self.x as u64,
                probs: Some(p.to_vec()),
                label: None,
            },
            ProbeOutput::Hard(c) => ProbeLine {
                x: self.x as u64,
                probs: None,
                label: Some(*c as u64),
            },
        }
    }
}

pub fn read_probe_file(path: &Path) -> Result<Vec<ProbeRecord>, DetectError> {
    read_json_lines::<ProbeLine>(path)?
        .into_iter()
        .enumerate()
        .map(|(i, line)| ProbeRecord::from_line(i + 1, line))
        .collect()
}

pub fn write_probe_file(path: &Path, records: &[ProbeRecord]) -> Result<(), DetectError> {
    let lines: Vec<ProbeLine> = records.iter().map(ProbeRecord::to_line).collect();
    write_atomic(path, to_json_lines(&lines).as_bytes()).map_err(std::io::Error::from)?;
    Ok(())
}

/// Probe floor for a record set.
pub fn required_probes(records: &[ProbeRecord]) -> usize {
    if records.iter().any(ProbeRecord::is_hard) {
        MIN_HARD_PROBES
    } else {
        MIN_SOFT_PROBES
    }
}

/// Keeps the selected records and pairs each one's phase hash with its
/// target-class score.
pub fn build_probe_series(
    key: &WatermarkKey,
    cfg: &WatermarkConfig,
    records: &[ProbeRecord],
) -> Result<ProbeSeries, DetectError> {
    let (t, y) = selected_pairs(key, cfg, records)?;
    let required = required_probes(records);
    if t.len() < required {
        return Err(DetectError::TooFewProbes {
            found: t.len(),
            required,
        });
    }
    Ok(ProbeSeries::new(t, y)?)
}

fn selected_pairs(
    key: &WatermarkKey,
    cfg: &WatermarkConfig,
    records: &[ProbeRecord],
) -> Result<(Vec<f64>, Vec<f64>), DetectError> {
    let target = key.target_class();
    let mut t = Vec::new();
    let mut y = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        let score = match &rec.output {
            ProbeOutput::Soft(p) => {
                if p.classes() != key.classes() {
                    return Err(DetectError::InvalidRecord {
                        index: i + 1,
                        reason: format!("{} classes, key has {}", p.classes(), key.classes()),
                    });
                }
                p[target]
            }
            ProbeOutput::Hard(c) => {
                if *c >= key.classes() {
                    return Err(DetectError::InvalidRecord {
                        index: i + 1,
                        reason: format!("label {c} out of range for {} classes", key.classes()),
                    });
                }
                if *c == target {
                    1.0
                } else {
                    0.0
                }
            }
        };
        if !key.is_selected(cfg, rec.x)? {
            continue;
        }
        t.push(key.hash(HashRole::Phase, rec.x)?);
        y.push(score);
    }
    Ok((t, y))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionParams {
    pub grid: FrequencyGrid,
    pub delta: f64,
    pub f_max: f64,
    pub threshold: f64,
    /// Copy the probe series into the report.
    pub echo_series: bool,
}

impl Default for DetectionParams {
    fn default() -> Self {
        Self {
            grid: FrequencyGrid::default(),
            delta: 2.0,
            f_max: 50.0,
            threshold: DEFAULT_THRESHOLD,
            echo_series: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectionWarning {
    TooFewProbes { found: usize, required: usize },
    /// The target-class score was constant over the selected probes.
    DegenerateSeries,
    ZeroNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionReport {
    #[serde(flatten)]
    pub snr: SnrResult,
    pub n_probes_used: usize,
    pub decision: Decision,
    pub threshold: f64,
    pub grid: GridSpec,
    pub warnings: Vec<DetectionWarning>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub series: Option<ProbeSeries>,
}

impl DetectionReport {
    pub fn is_positive(&self) -> bool {
        self.decision == Decision::Positive
    }

    pub fn too_few_probes(&self) -> bool {
        self.warnings
            .iter()
            .any(|w| matches!(w, DetectionWarning::TooFewProbes { .. }))
    }

    pub fn to_json(&self) -> String {
        to_json_string(self)
    }

    pub fn save(&self, path: &Path) -> Result<(), DetectError> {
        let mut text = self.to_json();
        text.push('\n');
        write_atomic(path, text.as_bytes()).map_err(std::io::Error::from)?;
        Ok(())
    }
}

/// Probes a suspect: selection filter, periodogram, SNR, threshold.
///
/// Too few probes and constant series give a negative report carrying a
/// warning. Malformed records and bad windows are errors.
pub fn detect_watermark(
    key: &WatermarkKey,
    cfg: &WatermarkConfig,
    records: &[ProbeRecord],
    params: &DetectionParams,
) -> Result<DetectionReport, DetectError> {
    let (t, y) = selected_pairs(key, cfg, records)?;
    let required = required_probes(records);
    if t.len() < required {
        check_window(key.frequency(), params)?;
        return Ok(negative_report(
            key.frequency(),
            t.len(),
            params,
            DetectionWarning::TooFewProbes {
                found: t.len(),
                required,
            },
        ));
    }
    let series = ProbeSeries::new(t, y)?;
    detect_series(&series, key.frequency(), params)
}

/// Scores an already built series against frequency `f_w`.
pub fn detect_series(series: &ProbeSeries, f_w: f64, params: &DetectionParams) -> Result<DetectionReport, DetectError> {
    let spectrum = lomb_scargle(series, &params.grid);
    let snr = snr_score(&spectrum, f_w, params.delta, params.f_max)?;
    let mut warnings = Vec::new();
    if spectrum.degenerate {
        warnings.push(DetectionWarning::DegenerateSeries);
    } else if snr.zero_noise {
        warnings.push(DetectionWarning::ZeroNoise);
    }
    let decision = if !spectrum.degenerate && snr.p_snr >= params.threshold {
        Decision::Positive
    } else {
        Decision::Negative
    };
    Ok(DetectionReport {
        snr,
        n_probes_used: series.len(),
        decision,
        threshold: params.threshold,
        grid: params.grid.spec(),
        warnings,
        series: params.echo_series.then(|| series.clone()),
    })
}

fn check_window(f_w: f64, params: &DetectionParams) -> Result<(), DetectError> {
    let freqs = params.grid.freqs();
    let flat = crate::spectral::PowerSpectrum::from_values(freqs.to_vec(), vec![1.0; freqs.len()])?;
    snr_score(&flat, f_w, params.delta, params.f_max)?;
    Ok(())
}

fn negative_report(f_w: f64, used: usize, params: &DetectionParams, warning: DetectionWarning) -> DetectionReport {
    DetectionReport {
        snr: SnrResult::empty(f_w, params.delta, params.f_max),
        n_probes_used: used,
        decision: Decision::Negative,
        threshold: params.threshold,
        grid: params.grid.spec(),
        warnings: vec![warning],
        series: None,
    }
}

/// Jensen-Shannon divergence of one pair, natural log.
pub fn jsd_pair(a: &[f64], b: &[f64]) -> f64 {
    let mut total = 0.0;
    let term = |v: f64, u: f64| if v > 0.0 { v * (v / u).ln() } else { 0.0 };
    for (&p, &q) in a.iter().zip(b) {
        let u = 0.5 * (p + q);
        // fixed summation order keeps the result exactly symmetric
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        total += term(lo, u) + term(hi, u);
    }
    0.5 * total
}

/// Mean Jensen-Shannon divergence between paired output lists.
pub fn jsd_score(a: &[ProbabilityVector], b: &[ProbabilityVector]) -> Result<f64, DetectError> {
    if a.len() != b.len() {
        return Err(DetectError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, (p, q)) in a.iter().zip(b).enumerate() {
        if p.classes() != q.classes() {
            return Err(DetectError::InvalidRecord {
                index: i + 1,
                reason: format!("{} classes vs {}", p.classes(), q.classes()),
            });
        }
        total += jsd_pair(p, q);
    }
    Ok(total / a.len() as f64)
}

#[derive(Debug, Clone, PartialEq, serde::Deserialize, Serialize)]
pub struct RankingTrial {
    pub positive_scores: Vec<f64>,
    pub negative_scores: Vec<f64>,
    pub higher_is_positive: bool,
}

/// Average precision of the positives when all scores are ranked, most
/// positive-looking first. Tied scores put negatives ahead of positives.
pub fn average_precision(trial: &RankingTrial) -> Result<f64, DetectError> {
    average_precision_at(0, trial)
}

fn average_precision_at(index: usize, trial: &RankingTrial) -> Result<f64, DetectError> {
    if trial.positive_scores.is_empty() || trial.negative_scores.is_empty() {
        return Err(DetectError::EmptyTrial(index));
    }
    let sign = if trial.higher_is_positive { 1.0 } else { -1.0 };
    let mut ranked: Vec<(f64, bool)> = trial
        .positive_scores
        .iter()
        .map(|&s| (s, true))
        .chain(trial.negative_scores.iter().map(|&s| (s, false)))
        .collect();
    if ranked.iter().any(|(s, _)| s.is_nan()) {
        return Err(DetectError::NanScore(index));
    }
    ranked.sort_by(|a, b| (sign * b.0).total_cmp(&(sign * a.0)).then(a.1.cmp(&b.1)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &(_, positive)) in ranked.iter().enumerate() {
        if positive {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / trial.positive_scores.len() as f64)
}

pub fn mean_average_precision(trials: &[RankingTrial]) -> Result<f64, DetectError> {
    if trials.is_empty() {
        return Err(DetectError::EmptyTrial(0));
    }
    let mut total = 0.0;
    for (i, trial) in trials.iter().enumerate() {
        total += average_precision_at(i, trial)?;
    }
    Ok(total / trials.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keys::{KeyParams, OutputMode};

    fn pv(v: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(v.to_vec()).unwrap()
    }

    fn small_key() -> WatermarkKey {
        let params = KeyParams {
            vocab_size: 500,
            ..KeyParams::default()
        };
        WatermarkKey::generate(&params, 11).unwrap()
    }

    #[test]
    fn jsd_extremes() {
        assert_eq!(jsd_pair(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert!((jsd_pair(&[1.0, 0.0], &[0.0, 1.0]) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn jsd_is_symmetric_and_checks_lengths() {
        let a = vec![pv(&[0.8, 0.2]), pv(&[0.1, 0.9])];
        let b = vec![pv(&[0.6, 0.4]), pv(&[0.5, 0.5])];
        assert_eq!(jsd_score(&a, &b).unwrap(), jsd_score(&b, &a).unwrap());
        assert!(matches!(jsd_score(&a, &b[..1]), Err(DetectError::LengthMismatch { .. })));
    }

    #[test]
    fn ap_hand_case() {
        let t = RankingTrial {
            positive_scores: vec![3.0, 1.0],
            negative_scores: vec![2.0],
            higher_is_positive: true,
        };
        assert!((average_precision(&t).unwrap() - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn ap_lower_is_positive_and_ties() {
        let t = RankingTrial {
            positive_scores: vec![0.1, 0.2],
            negative_scores: vec![0.5, 0.9],
            higher_is_positive: false,
        };
        assert_eq!(average_precision(&t).unwrap(), 1.0);
        // one tie: the negative is ranked first
        let t = RankingTrial {
            positive_scores: vec![1.0],
            negative_scores: vec![1.0],
            higher_is_positive: true,
        };
        assert_eq!(average_precision(&t).unwrap(), 0.5);
    }

    #[test]
    fn empty_trials_are_errors() {
        let t = RankingTrial {
            positive_scores: vec![],
            negative_scores: vec![1.0],
            higher_is_positive: true,
        };
        assert!(matches!(mean_average_precision(&[t]), Err(DetectError::EmptyTrial(0))));
        assert!(mean_average_precision(&[]).is_err());
    }

    #[test]
    fn full_selection_keeps_every_record() {
        let key = small_key();
        let cfg = WatermarkConfig::new(0.2, 1.0, OutputMode::Soft).unwrap();
        let records: Vec<_> = (0..40).map(|x| ProbeRecord::soft(x, pv(&[0.5, 0.5]))).collect();
        let s = build_probe_series(&key, &cfg, &records).unwrap();
        assert_eq!(s.len(), 40);
    }

    #[test]
    fn hard_records_raise_the_floor() {
        let key = small_key();
        let cfg = WatermarkConfig::new(0.2, 1.0, OutputMode::Hard).unwrap();
        let records: Vec<_> = (0..40).map(|x| ProbeRecord::hard(x, 0)).collect();
        let err = build_probe_series(&key, &cfg, &records).unwrap_err();
        assert!(matches!(err, DetectError::TooFewProbes { found: 40, required: 64 }));
        let report = detect_watermark(&key, &cfg, &records, &DetectionParams::default()).unwrap();
        assert!(report.too_few_probes());
        assert_eq!(report.decision, Decision::Negative);
    }

    #[test]
    fn constant_hard_labels_are_negative() {
        let key = small_key();
        let cfg = WatermarkConfig::new(0.2, 1.0, OutputMode::Hard).unwrap();
        let records: Vec<_> = (0..200).map(|x| ProbeRecord::hard(x, key.target_class())).collect();
        let s = build_probe_series(&key, &cfg, &records).unwrap();
        assert!(s.y().iter().all(|&v| v == 1.0));
        let report = detect_watermark(&key, &cfg, &records, &DetectionParams::default()).unwrap();
        assert_eq!(report.warnings, vec![DetectionWarning::DegenerateSeries]);
        assert_eq!(report.snr.p_snr, 0.0);
        assert!(!report.is_positive());
    }

    #[test]
    fn bad_records_are_rejected() {
        let key = small_key();
        let cfg = WatermarkConfig::default();
        let rec = [ProbeRecord::hard(0, 5)];
        assert!(matches!(
            build_probe_series(&key, &cfg, &rec),
            Err(DetectError::InvalidRecord { index: 1, .. })
        ));
        let rec = [ProbeRecord::soft(10_000, pv(&[0.5, 0.5]))];
        assert!(matches!(build_probe_series(&key, &cfg, &rec), Err(DetectError::Key(_))));
    }

    #[test]
    fn probe_lines_need_exactly_one_output() {
        let both = ProbeLine {
            x: 1,
            probs: Some(vec![1.0, 0.0]),
            label: Some(0),
        };
        assert!(ProbeRecord::from_line(3, both).is_err());
        let neither = ProbeLine {
            x: 1,
            probs: None,
            label: None,
        };
        assert!(matches!(
            ProbeRecord::from_line(4, neither),
            Err(DetectError::InvalidRecord { index: 4, .. })
        ));
    }

    #[test]
    fn report_document_fields() {
        let key = small_key();
        let cfg = WatermarkConfig::new(0.2, 1.0, OutputMode::Soft).unwrap();
        let records: Vec<_> = (0..100)
            .map(|x| {
                let p = 0.3 + 0.01 * (x % 7) as f64;
                ProbeRecord::soft(x, pv(&[p, 1.0 - p]))
            })
            .collect();
        let report = detect_watermark(&key, &cfg, &records, &DetectionParams::default()).unwrap();
        let doc: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        for field in ["p_signal", "p_noise", "p_snr", "n_probes_used", "decision", "threshold", "delta", "f_max", "grid"] {
            assert!(doc.get(field).is_some(), "missing {field}");
        }
        assert_eq!(doc["n_probes_used"], 100);
    }
}
