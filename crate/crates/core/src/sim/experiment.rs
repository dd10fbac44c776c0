use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::student::{distill_student, Loss, StudentSpec};
use super::task::{make_task, victim_answer, SyntheticTask, TaskParams};
use super::{stream, SimError};
use crate::detect::{detect_watermark, jsd_score, mean_average_precision, DetectionParams, DetectionReport, ProbeRecord, RankingTrial};
use crate::keys::{KeyParams, OutputMode, WatermarkConfig, WatermarkKey};
use crate::spectral::{FrequencyGrid, GridSpec};
use crate::watermark::{apply_watermark, argmax_label, respond, sample_hard, Answer, ProbabilityVector};

const TAG_ANALOG: u64 = 10;
const TAG_INIT: u64 = 11;
const TAG_ANSWERS: u64 = 12;
const TAG_FIDELITY: u64 = 13;

/// Which tokens are used to probe a suspect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeSet {
    /// Every token in the vocabulary.
    All,
    /// Tokens whose clean victim prediction is the target class.
    VictimLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub vocab_size: usize,
    pub classes: usize,
    pub concentration: f64,
    pub target_class_mass: Option<f64>,
    pub dim: usize,
    pub frequency: f64,
    pub target_class: usize,
    pub epsilon: f64,
    pub tau: f64,
    pub positives: usize,
    pub unwatermarked_negatives: usize,
    pub true_label_negatives: usize,
    pub soft_queries_per_token: usize,
    pub hard_queries_per_token: usize,
    pub student: StudentSpec,
    /// Fit tolerance for students trained on hard labels. Label frequencies
    /// from a few dozen draws are noisy at the 1e-1 level, so fitting them
    /// to the soft-target tolerance only costs epochs.
    pub hard_label_tol: f64,
    pub probe_set: ProbeSet,
    pub modes: Vec<OutputMode>,
    pub grid: GridSpec,
    pub delta: f64,
    pub f_max: f64,
    pub threshold: f64,
    /// Independent (task, key) pairs; each contributes one ranking.
    pub analogs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            vocab_size: 2000,
            classes: 2,
            concentration: 1.0,
            target_class_mass: None,
            dim: 128,
            frequency: 16.0,
            target_class: 0,
            epsilon: 0.2,
            tau: 0.5,
            positives: 10,
            unwatermarked_negatives: 10,
            true_label_negatives: 10,
            soft_queries_per_token: 1,
            hard_queries_per_token: 50,
            student: StudentSpec::default(),
            hard_label_tol: 1e-3,
            probe_set: ProbeSet::All,
            modes: vec![OutputMode::Soft, OutputMode::Hard],
            grid: GridSpec::default(),
            delta: 2.0,
            f_max: 50.0,
            threshold: 10.0,
            analogs: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn task_params(&self) -> TaskParams {
        TaskParams {
            vocab_size: self.vocab_size,
            classes: self.classes,
            concentration: self.concentration,
            target_class_mass: self.target_class_mass,
            target_class: self.target_class,
        }
    }

    pub fn key_params(&self) -> KeyParams {
        KeyParams {
            classes: self.classes,
            vocab_size: self.vocab_size,
            dim: self.dim,
            frequency: self.frequency,
            target_class: self.target_class,
        }
    }

    pub fn watermark_config(&self, mode: OutputMode) -> Result<WatermarkConfig, SimError> {
        Ok(WatermarkConfig::new(self.epsilon, self.tau, mode)?)
    }

    pub fn detection_params(&self) -> Result<DetectionParams, SimError> {
        let grid = FrequencyGrid::try_from(self.grid).map_err(crate::detect::DetectError::from)?;
        Ok(DetectionParams {
            grid,
            delta: self.delta,
            f_max: self.f_max,
            threshold: self.threshold,
            echo_series: false,
        })
    }

    fn validate(&self) -> Result<(), SimError> {
        if self.positives == 0 || self.unwatermarked_negatives + self.true_label_negatives < 2 {
            return Err(SimError::InvalidParameter(
                "need at least one positive and two negatives".into(),
            ));
        }
        if self.analogs == 0 || self.modes.is_empty() {
            return Err(SimError::InvalidParameter("need at least one analog and one mode".into()));
        }
        if self.soft_queries_per_token == 0 || self.hard_queries_per_token == 0 {
            return Err(SimError::InvalidParameter("query budgets must be positive".into()));
        }
        self.watermark_config(OutputMode::Soft)?;
        self.detection_params()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    /// Distilled from the watermarked victim.
    Positive,
    /// Distilled from the same victim with the watermark switched off.
    UnwatermarkedNegative,
    /// Trained on labels drawn from the true conditionals.
    TrueLabelNegative,
}

/// A trained suspect together with its probe records and detection report.
#[derive(Debug, Clone)]
pub struct ProbedModel {
    pub analog: usize,
    pub role: ModelRole,
    /// Distillation mode; true-label negatives are listed under `Hard`.
    pub mode: OutputMode,
    pub index: usize,
    pub records: Vec<ProbeRecord>,
    pub report: DetectionReport,
    /// Mean JSD between the suspect and the clean victim on the probe tokens.
    pub jsd: f64,
    pub accuracy: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeResult {
    pub map: f64,
    /// mAP when suspects are ranked by JSD to the victim, lowest first.
    pub jsd_map: f64,
    pub mean_positive_snr: f64,
    pub snr_positives: Vec<f64>,
    /// Unwatermarked-distilled negatives first, then true-label negatives.
    pub snr_negatives: Vec<f64>,
    pub student_acc: f64,
}

impl ModeResult {
    /// Positives above `hi` plus negatives below `lo`.
    pub fn separated(&self, hi: f64, lo: f64) -> usize {
        self.snr_positives.iter().filter(|&&s| s > hi).count() + self.snr_negatives.iter().filter(|&&s| s < lo).count()
    }

    pub fn models(&self) -> usize {
        self.snr_positives.len() + self.snr_negatives.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub victim_acc: f64,
    pub argmax_soft_acc: f64,
    pub sampling_hard_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub soft: Option<ModeResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hard: Option<ModeResult>,
}

impl ExperimentResult {
    pub fn mode(&self, mode: OutputMode) -> Option<&ModeResult> {
        match mode {
            OutputMode::Soft => self.soft.as_ref(),
            OutputMode::Hard => self.hard.as_ref(),
        }
    }
}

pub struct Analog {
    pub task: SyntheticTask,
    pub key: WatermarkKey,
}

pub struct ExperimentRun {
    pub result: ExperimentResult,
    pub analogs: Vec<Analog>,
    pub models: Vec<ProbedModel>,
}

pub fn run_detection_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult, SimError> {
    Ok(run_experiment_detailed(cfg)?.result)
}

#[derive(Debug, Clone, Copy)]
struct Job {
    analog: usize,
    role: ModelRole,
    mode: OutputMode,
    index: usize,
}

impl Job {
    fn id(&self) -> u64 {
        let role = match self.role {
            ModelRole::Positive => 0,
            ModelRole::UnwatermarkedNegative => 1,
            ModelRole::TrueLabelNegative => 2,
        };
        let mode = match self.mode {
            OutputMode::Soft => 0,
            OutputMode::Hard => 1,
        };
        ((self.analog as u64) << 32) | (role << 24) | (mode << 20) | self.index as u64
    }
}

/// Trains, probes and ranks every suspect, keeping the probe records.
pub fn run_experiment_detailed(cfg: &ExperimentConfig) -> Result<ExperimentRun, SimError> {
    cfg.validate()?;
    let analogs = (0..cfg.analogs)
        .map(|a| {
            let seeds = stream(cfg.seed, TAG_ANALOG, a as u64);
            let (task_seed, key_seed) = {
                use rand::Rng;
                let mut s = seeds;
                (s.random::<u64>(), s.random::<u64>())
            };
            Ok(Analog {
                task: make_task(task_seed, &cfg.task_params())?,
                key: WatermarkKey::generate(&cfg.key_params(), key_seed)?,
            })
        })
        .collect::<Result<Vec<_>, SimError>>()?;

    let mut jobs = Vec::new();
    for analog in 0..cfg.analogs {
        for &mode in &cfg.modes {
            for index in 0..cfg.positives {
                jobs.push(Job {
                    analog,
                    role: ModelRole::Positive,
                    mode,
                    index,
                });
            }
            for index in 0..cfg.unwatermarked_negatives {
                jobs.push(Job {
                    analog,
                    role: ModelRole::UnwatermarkedNegative,
                    mode,
                    index,
                });
            }
        }
        for index in 0..cfg.true_label_negatives {
            jobs.push(Job {
                analog,
                role: ModelRole::TrueLabelNegative,
                mode: OutputMode::Hard,
                index,
            });
        }
    }

    let params = cfg.detection_params()?;
    let models = jobs
        .par_iter()
        .map(|job| run_job(cfg, &analogs[job.analog], *job, &params))
        .collect::<Result<Vec<_>, SimError>>()?;

    let mut victim_acc = 0.0;
    let mut argmax_soft_acc = 0.0;
    let mut sampling_hard_acc = 0.0;
    for a in &analogs {
        let acc = output_accuracies(&a.task, &a.key, &cfg.watermark_config(OutputMode::Soft)?)?;
        victim_acc += acc.0;
        argmax_soft_acc += acc.1;
        sampling_hard_acc += acc.2;
    }
    let n = analogs.len() as f64;

    let mut result = ExperimentResult {
        config: cfg.clone(),
        victim_acc: victim_acc / n,
        argmax_soft_acc: argmax_soft_acc / n,
        sampling_hard_acc: sampling_hard_acc / n,
        soft: None,
        hard: None,
    };
    for &mode in &cfg.modes {
        let summary = summarize(cfg, &models, mode)?;
        match mode {
            OutputMode::Soft => result.soft = Some(summary),
            OutputMode::Hard => result.hard = Some(summary),
        }
    }
    Ok(ExperimentRun {
        result,
        analogs,
        models,
    })
}

fn run_job(cfg: &ExperimentConfig, analog: &Analog, job: Job, params: &DetectionParams) -> Result<ProbedModel, SimError> {
    let Analog { task, key } = analog;
    let mut answer_rng = stream(cfg.seed, TAG_ANSWERS, job.id());
    let mut init_rng = stream(cfg.seed, TAG_INIT, job.id());

    let per_token = match job.mode {
        OutputMode::Soft => cfg.soft_queries_per_token,
        OutputMode::Hard => cfg.hard_queries_per_token,
    };
    let queries: Vec<usize> = (0..task.vocab_size)
        .flat_map(|x| std::iter::repeat_n(x, per_token))
        .collect();
    let answers: Vec<Answer> = match job.role {
        ModelRole::TrueLabelNegative => queries
            .iter()
            .map(|&x| Answer::Hard(sample_hard(&task.pi[x], &mut answer_rng)))
            .collect(),
        role => {
            let eps = if role == ModelRole::Positive { cfg.epsilon } else { 0.0 };
            let serving = WatermarkConfig::new(eps, cfg.tau, job.mode)?;
            queries
                .iter()
                .map(|&x| victim_answer(task, key, &serving, x, &mut answer_rng).map(|o| o.answer))
                .collect::<Result<_, _>>()?
        }
    };
    let loss = match job.mode {
        OutputMode::Soft => Loss::Kl,
        OutputMode::Hard => Loss::Ce,
    };
    let student = cfg.student.init(task.vocab_size, task.classes, &mut init_rng);
    let mut train = *cfg.student.train();
    if loss == Loss::Ce {
        train.tol = train.tol.max(cfg.hard_label_tol);
    }
    let (student, report) = distill_student(student, &queries, &answers, loss, &train)?;

    let probes = probe_tokens(task, cfg.probe_set, cfg.target_class);
    let records: Vec<ProbeRecord> = probes.iter().map(|&x| ProbeRecord::soft(x, student.predict(x))).collect();
    let detect_cfg = cfg.watermark_config(OutputMode::Soft)?;
    let detection = detect_watermark(key, &detect_cfg, &records, params)?;

    let clean: Vec<ProbabilityVector> = probes.iter().map(|&x| task.pi[x].clone()).collect();
    let outputs: Vec<ProbabilityVector> = records
        .iter()
        .map(|r| match &r.output {
            crate::detect::ProbeOutput::Soft(p) => p.clone(),
            crate::detect::ProbeOutput::Hard(c) => ProbabilityVector::one_hot(task.classes, *c),
        })
        .collect();
    let jsd = jsd_score(&clean, &outputs)?;
    let accuracy = task.accuracy_of(|x| argmax_label(&student.predict(x)));

    Ok(ProbedModel {
        analog: job.analog,
        role: job.role,
        mode: job.mode,
        index: job.index,
        records,
        report: detection,
        jsd,
        accuracy,
        epochs: report.epochs,
    })
}

pub fn probe_tokens(task: &SyntheticTask, set: ProbeSet, target_class: usize) -> Vec<usize> {
    match set {
        ProbeSet::All => (0..task.vocab_size).collect(),
        ProbeSet::VictimLabel => (0..task.vocab_size)
            .filter(|&x| argmax_label(&task.pi[x]) == target_class)
            .collect(),
    }
}

/// Exact frequency-weighted accuracies of the clean victim, the watermarked
/// argmax and the sampled hard label.
fn output_accuracies(task: &SyntheticTask, key: &WatermarkKey, cfg: &WatermarkConfig) -> Result<(f64, f64, f64), SimError> {
    let mut wm = Vec::with_capacity(task.vocab_size);
    for x in 0..task.vocab_size {
        wm.push(apply_watermark(key, cfg, x, &task.pi[x])?);
    }
    let victim = task.victim_accuracy();
    let soft = task.accuracy_of(|x| argmax_label(&wm[x].0));
    let hard = task.sampled_accuracy_of(|x| {
        let (y, selected) = &wm[x];
        if *selected {
            y.to_vec()
        } else {
            ProbabilityVector::one_hot(task.classes, argmax_label(&task.pi[x])).into_inner()
        }
    });
    Ok((victim, soft, hard))
}

fn summarize(cfg: &ExperimentConfig, models: &[ProbedModel], mode: OutputMode) -> Result<ModeResult, SimError> {
    let mut snr_positives = Vec::new();
    let mut snr_negatives = Vec::new();
    let mut trials = Vec::new();
    let mut jsd_trials = Vec::new();
    let mut accuracy = 0.0;
    for analog in 0..cfg.analogs {
        let pick = |role: ModelRole, m: OutputMode| {
            models
                .iter()
                .filter(move |p| p.analog == analog && p.role == role && p.mode == m)
        };
        let pos: Vec<&ProbedModel> = pick(ModelRole::Positive, mode).collect();
        let neg: Vec<&ProbedModel> = pick(ModelRole::UnwatermarkedNegative, mode)
            .chain(pick(ModelRole::TrueLabelNegative, OutputMode::Hard))
            .collect();
        accuracy += pos.iter().map(|p| p.accuracy).sum::<f64>();
        let ps: Vec<f64> = pos.iter().map(|p| p.report.snr.p_snr).collect();
        let ns: Vec<f64> = neg.iter().map(|p| p.report.snr.p_snr).collect();
        trials.push(RankingTrial {
            positive_scores: ps.clone(),
            negative_scores: ns.clone(),
            higher_is_positive: true,
        });
        jsd_trials.push(RankingTrial {
            positive_scores: pos.iter().map(|p| p.jsd).collect(),
            negative_scores: neg.iter().map(|p| p.jsd).collect(),
            higher_is_positive: false,
        });
        snr_positives.extend(ps);
        snr_negatives.extend(ns);
    }
    Ok(ModeResult {
        map: mean_average_precision(&trials)?,
        jsd_map: mean_average_precision(&jsd_trials)?,
        mean_positive_snr: snr_positives.iter().sum::<f64>() / snr_positives.len() as f64,
        student_acc: accuracy / snr_positives.len() as f64,
        snr_positives,
        snr_negatives,
    })
}

/// Sampled hard-label accuracy measured by simulation, next to lower bounds
/// evaluated on the token set's actual selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FidelityReport {
    pub samples: usize,
    pub victim_acc: f64,
    pub argmax_soft_acc: f64,
    /// Argmax-soft lower bound; binary tasks only.
    pub soft_bound: Option<f64>,
    pub hard_acc_expected: f64,
    pub hard_acc_empirical: f64,
    pub hard_se: f64,
    pub hard_bound: f64,
}

impl FidelityReport {
    pub fn hard_within_bound(&self) -> bool {
        self.hard_acc_empirical >= self.hard_bound - 3.0 * self.hard_se
    }
}

/// Serves `samples` hard-label queries with tokens drawn from the task's
/// query distribution and scores them against labels drawn from the truth.
pub fn fidelity_monte_carlo(
    task: &SyntheticTask,
    key: &WatermarkKey,
    cfg: &WatermarkConfig,
    samples: usize,
    seed: u64,
) -> Result<FidelityReport, SimError> {
    if samples == 0 {
        return Err(SimError::InvalidParameter("need at least one sample".into()));
    }
    let hard_cfg = cfg.with_mode(OutputMode::Hard);
    let (victim_acc, argmax_soft_acc, hard_acc_expected) = output_accuracies(task, key, cfg)?;

    let eps = cfg.epsilon();
    let mut hard_bound = 0.0;
    let mut flip_mass = 0.0;
    for x in 0..task.vocab_size {
        let p = &task.pi[x];
        let clean = p[argmax_label(p)];
        if key.is_selected(cfg, x)? {
            hard_bound += task.token_freq[x] * p.iter().map(|v| v * v).sum::<f64>() / (1.0 + 2.0 * eps);
            if task.classes == 2 && (p[0] - 0.5).abs() <= eps {
                flip_mass += task.token_freq[x];
            }
        } else {
            hard_bound += task.token_freq[x] * clean;
        }
    }
    let soft_bound = (task.classes == 2).then(|| victim_acc - (0.5 + eps) * flip_mass);

    let tokens = WeightedIndex::new(&task.token_freq)
        .map_err(|e| SimError::InvalidParameter(format!("token frequencies: {e}")))?;
    let chunk = 1 << 14;
    let chunks = samples.div_ceil(chunk);
    let hits = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream(seed, TAG_FIDELITY, c as u64);
            let n = chunk.min(samples - c * chunk);
            let mut hits = 0usize;
            for _ in 0..n {
                let x = tokens.sample(&mut rng);
                let truth = sample_hard(&task.pi[x], &mut rng);
                let out = respond(key, &hard_cfg, x, &task.pi[x], &mut rng)?;
                if out.answer == Answer::Hard(truth) {
                    hits += 1;
                }
            }
            Ok(hits)
        })
        .collect::<Result<Vec<_>, SimError>>()?
        .into_iter()
        .sum::<usize>();
    let acc = hits as f64 / samples as f64;
    Ok(FidelityReport {
        samples,
        victim_acc,
        argmax_soft_acc,
        soft_bound,
        hard_acc_expected,
        hard_acc_empirical: acc,
        hard_se: (acc * (1.0 - acc) / samples as f64).sqrt(),
        hard_bound,
    })
}
