use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::watermark::{Answer, ProbabilityVector};

const LOSS_SLACK: f64 = 1e-8;
const MAX_RISES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    /// KL divergence to the answered distribution.
    Kl,
    /// Cross-entropy against the answered label (or distribution).
    Ce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub max_epochs: usize,
    pub lr: f64,
    /// Stop once every queried token's prediction is within this total
    /// variation of its mean target.
    pub tol: f64,
}

/// Student architecture plus its training schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum StudentSpec {
    Table {
        #[serde(default = "table_defaults")]
        train: TrainOptions,
    },
    Featurized {
        #[serde(default = "feature_dim")]
        dim: usize,
        #[serde(default = "featurized_defaults")]
        train: TrainOptions,
    },
}

fn table_defaults() -> TrainOptions {
    TrainOptions {
        max_epochs: 20_000,
        lr: 3.0,
        tol: 5e-5,
    }
}

fn featurized_defaults() -> TrainOptions {
    TrainOptions {
        max_epochs: 1000,
        lr: 1.0,
        tol: 5e-5,
    }
}

fn feature_dim() -> usize {
    32
}

impl Default for StudentSpec {
    fn default() -> Self {
        StudentSpec::Table { train: table_defaults() }
    }
}

impl StudentSpec {
    pub fn featurized() -> Self {
        StudentSpec::Featurized {
            dim: feature_dim(),
            train: featurized_defaults(),
        }
    }

    pub fn train(&self) -> &TrainOptions {
        match self {
            StudentSpec::Table { train } | StudentSpec::Featurized { train, .. } => train,
        }
    }

    /// Freshly initialised student.
    pub fn init<R: Rng + ?Sized>(&self, vocab_size: usize, classes: usize, rng: &mut R) -> StudentModel {
        match *self {
            StudentSpec::Table { .. } => StudentModel::Table(TableStudent::init(vocab_size, classes, rng)),
            StudentSpec::Featurized { dim, .. } => {
                StudentModel::Featurized(FeaturizedStudent::init(vocab_size, classes, dim, rng))
            }
        }
    }
}

/// One free logit row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct TableStudent {
    classes: usize,
    logits: Vec<f64>,
}

impl TableStudent {
    pub fn init<R: Rng + ?Sized>(vocab_size: usize, classes: usize, rng: &mut R) -> Self {
        let logits = (0..vocab_size * classes)
            .map(|_| 0.01 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { classes, logits }
    }
}

/// Learned token embeddings followed by a shared linear softmax head.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturizedStudent {
    classes: usize,
    dim: usize,
    embedding: Vec<f64>,
    head: Vec<f64>,
    bias: Vec<f64>,
}

impl FeaturizedStudent {
    pub fn init<R: Rng + ?Sized>(vocab_size: usize, classes: usize, dim: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect() };
        let embedding = normal(vocab_size * dim);
        let head = normal(dim * classes);
        Self {
            classes,
            dim,
            embedding,
            head,
            bias: vec![0.0; classes],
        }
    }

    fn logits_into(&self, x: usize, out: &mut [f64]) {
        let e = &self.embedding[x * self.dim..(x + 1) * self.dim];
        out.copy_from_slice(&self.bias);
        for (k, &ek) in e.iter().enumerate() {
            let row = &self.head[k * self.classes..(k + 1) * self.classes];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += ek * w;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StudentModel {
    Table(TableStudent),
    Featurized(FeaturizedStudent),
}

impl StudentModel {
    pub fn classes(&self) -> usize {
        match self {
            StudentModel::Table(s) => s.classes,
            StudentModel::Featurized(s) => s.classes,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            StudentModel::Table(s) => s.logits.len() / s.classes,
            StudentModel::Featurized(s) => s.embedding.len() / s.dim,
        }
    }

    fn logits_into(&self, x: usize, out: &mut [f64]) {
        match self {
            StudentModel::Table(s) => out.copy_from_slice(&s.logits[x * s.classes..(x + 1) * s.classes]),
            StudentModel::Featurized(s) => s.logits_into(x, out),
        }
    }

    fn probs_into(&self, x: usize, out: &mut [f64]) {
        self.logits_into(x, out);
        softmax_in_place(out);
    }

    pub fn predict(&self, x: usize) -> ProbabilityVector {
        let mut out = vec![0.0; self.classes()];
        self.probs_into(x, &mut out);
        ProbabilityVector::new(out).expect("softmax output is a distribution")
    }
}

/// Softmax in place; returns the log-sum-exp of the input logits.
fn softmax_in_place(v: &mut [f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for a in v.iter_mut() {
        *a = (*a - max).exp();
        sum += *a;
    }
    v.iter_mut().for_each(|a| *a /= sum);
    max + sum.ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: usize,
    /// Loss before each update, then the loss of the returned model.
    pub losses: Vec<f64>,
    pub max_tv: f64,
    pub converged: bool,
}

/// Per-token mean targets and query counts.
struct Targets {
    classes: usize,
    tokens: Vec<usize>,
    counts: Vec<f64>,
    mean: Vec<f64>,
    total: f64,
    /// Σ over queries of Σ_c a log a, zero for cross-entropy.
    neg_entropy: f64,
}

fn aggregate(
    vocab_size: usize,
    classes: usize,
    queries: &[usize],
    answers: &[Answer],
    loss: Loss,
) -> Result<Targets, SimError> {
    if queries.len() != answers.len() {
        return Err(SimError::InvalidParameter(format!(
            "{} queries but {} answers",
            queries.len(),
            answers.len()
        )));
    }
    if queries.is_empty() {
        return Err(SimError::InvalidParameter("no queries".into()));
    }
    let mut counts = vec![0.0; vocab_size];
    let mut sums = vec![0.0; vocab_size * classes];
    let mut neg_entropy = 0.0;
    for (&x, answer) in queries.iter().zip(answers) {
        if x >= vocab_size {
            return Err(SimError::InvalidParameter(format!("query token {x} outside vocabulary")));
        }
        counts[x] += 1.0;
        let row = &mut sums[x * classes..(x + 1) * classes];
        match answer {
            Answer::Soft(p) => {
                if p.classes() != classes {
                    return Err(SimError::InvalidParameter(format!(
                        "answer has {} classes, student {classes}",
                        p.classes()
                    )));
                }
                row.iter_mut().zip(p.iter()).for_each(|(s, &a)| *s += a);
                if loss == Loss::Kl {
                    neg_entropy += p.iter().filter(|&&a| a > 0.0).map(|&a| a * a.ln()).sum::<f64>();
                }
            }
            Answer::Hard(c) => {
                if *c >= classes {
                    return Err(SimError::InvalidParameter(format!("answer label {c} outside {classes} classes")));
                }
                row[*c] += 1.0;
            }
        }
    }
    let tokens: Vec<usize> = (0..vocab_size).filter(|&x| counts[x] > 0.0).collect();
    let mut mean = Vec::with_capacity(tokens.len() * classes);
    let mut token_counts = Vec::with_capacity(tokens.len());
    for &x in &tokens {
        let n = counts[x];
        mean.extend(sums[x * classes..(x + 1) * classes].iter().map(|s| s / n));
        token_counts.push(n);
    }
    Ok(Targets {
        classes,
        tokens,
        counts: token_counts,
        mean,
        total: queries.len() as f64,
        neg_entropy,
    })
}

/// Full-batch gradient descent on the mean distillation loss over the queries.
///
/// Each token's logits move along the gradient of that token's own mean loss,
/// so rarely queried tokens train as fast as frequent ones. Shared
/// parameters of the featurized student use the usual query-weighted gradient.
pub fn distill_student(
    mut student: StudentModel,
    queries: &[usize],
    answers: &[Answer],
    loss: Loss,
    opts: &TrainOptions,
) -> Result<(StudentModel, TrainReport), SimError> {
    if opts.max_epochs == 0 || !(opts.lr > 0.0) {
        return Err(SimError::InvalidParameter("need max_epochs >= 1 and lr > 0".into()));
    }
    let m = student.classes();
    let targets = aggregate(student.vocab_size(), m, queries, answers, loss)?;
    let k = targets.tokens.len();
    let mut q = vec![0.0; k * m];
    let mut losses = Vec::new();
    let mut rises = 0;
    let mut epoch = 0;
    loop {
        let (value, max_tv) = evaluate(&student, &targets, &mut q);
        if !value.is_finite() {
            return Err(SimError::Diverged { epoch, loss: value });
        }
        if let Some(&prev) = losses.last() {
            if value > prev + LOSS_SLACK {
                rises += 1;
                if rises >= MAX_RISES {
                    return Err(SimError::Diverged { epoch, loss: value });
                }
            } else {
                rises = 0;
            }
        }
        losses.push(value);
        let converged = max_tv <= opts.tol;
        if converged || epoch == opts.max_epochs {
            return Ok((
                student,
                TrainReport {
                    epochs: epoch,
                    losses,
                    max_tv,
                    converged,
                },
            ));
        }
        step(&mut student, &targets, &q, opts.lr);
        epoch += 1;
    }
}

/// Mean loss over queries and the largest TV distance to a mean target.
fn evaluate(student: &StudentModel, t: &Targets, q: &mut [f64]) -> (f64, f64) {
    let m = t.classes;
    let mut cross = 0.0;
    let mut max_tv: f64 = 0.0;
    for (i, &x) in t.tokens.iter().enumerate() {
        let qi = &mut q[i * m..(i + 1) * m];
        student.logits_into(x, qi);
        let ai = &t.mean[i * m..(i + 1) * m];
        // cross-entropy against the mean target is lse − Σ a·logit
        let dot: f64 = ai.iter().zip(qi.iter()).map(|(a, l)| a * l).sum();
        let lse = softmax_in_place(qi);
        let tv: f64 = ai.iter().zip(qi.iter()).map(|(a, p)| (a - p).abs()).sum();
        cross += t.counts[i] * (lse - dot);
        max_tv = max_tv.max(0.5 * tv);
    }
    ((cross + t.neg_entropy) / t.total, max_tv)
}

fn step(student: &mut StudentModel, t: &Targets, q: &[f64], lr: f64) {
    let m = t.classes;
    match student {
        StudentModel::Table(s) => {
            for (i, &x) in t.tokens.iter().enumerate() {
                let row = &mut s.logits[x * m..(x + 1) * m];
                for c in 0..m {
                    row[c] -= lr * (q[i * m + c] - t.mean[i * m + c]);
                }
            }
        }
        StudentModel::Featurized(s) => {
            let d = s.dim;
            let mut grad_head = vec![0.0; d * m];
            let mut grad_bias = vec![0.0; m];
            let mut grad_e = vec![0.0; d];
            for (i, &x) in t.tokens.iter().enumerate() {
                let weight = t.counts[i] / t.total;
                let g: Vec<f64> = (0..m).map(|c| q[i * m + c] - t.mean[i * m + c]).collect();
                let e = &s.embedding[x * d..(x + 1) * d];
                for k in 0..d {
                    let hk = &s.head[k * m..(k + 1) * m];
                    grad_e[k] = g.iter().zip(hk).map(|(a, b)| a * b).sum();
                    for c in 0..m {
                        grad_head[k * m + c] += weight * e[k] * g[c];
                    }
                }
                for c in 0..m {
                    grad_bias[c] += weight * g[c];
                }
                let e = &mut s.embedding[x * d..(x + 1) * d];
                for k in 0..d {
                    e[k] -= lr * grad_e[k];
                }
            }
            s.head.iter_mut().zip(&grad_head).for_each(|(w, g)| *w -= lr * g);
            s.bias.iter_mut().zip(&grad_bias).for_each(|(b, g)| *b -= lr * g);
        }
    }
}
