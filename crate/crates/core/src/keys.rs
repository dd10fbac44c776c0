//! Watermark keys and the token hash.
//!
//! A key holds a target class, a signal frequency, two random vectors (phase
//! and selection) and a `|D| x n` random token matrix. Every token id maps to
//! a matrix row; projecting that row onto one of the vectors and pushing the
//! result through the standard normal CDF gives a hash that is uniform on
//! `[0, 1)`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use thiserror::Error;

use crate::io::{self, AtomicWriteError};
use crate::normal::standard_normal_cdf;

/// Current key file format version.
pub const KEY_FILE_VERSION: u64 = 1;

/// Default projection dimension.
pub const DEFAULT_DIM: usize = 128;

/// Largest `f64` strictly below one. Hash values are clamped here so that the
/// `[0, 1)` contract survives CDF saturation for extreme projections.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

#[derive(Debug, Error)]
pub enum KeyError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("token {token} is outside the vocabulary of size {vocab_size}")]
    OutOfVocabulary { token: usize, vocab_size: usize },
    #[error("class {class} is out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("corrupt key file: field `{field}`: {reason}")]
    Corrupt { field: String, reason: String },
    #[error("dimension mismatch in field `{field}`: expected {expected}, found {found}")]
    DimensionMismatch {
        field: String,
        expected: usize,
        found: usize,
    },
    #[error("invalid watermark config: {0}")]
    InvalidConfig(String),
    #[error("key file i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl From<AtomicWriteError> for KeyError {
    fn from(err: AtomicWriteError) -> Self {
        KeyError::Io(err.into())
    }
}

/// Row-major `rows x cols` matrix of token vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TokenMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>, cols: usize) -> Result<Self, KeyError> {
        let n_rows = rows.len();
        let mut data = Vec::with_capacity(n_rows * cols);
        for row in rows {
            if row.len() != cols {
                return Err(KeyError::DimensionMismatch {
                    field: "M".into(),
                    expected: cols,
                    found: row.len(),
                });
            }
            data.extend(row);
        }
        Ok(Self {
            rows: n_rows,
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Which key vector a hash is computed against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HashRole {
    /// Phase vector: positions the token on the sinusoid.
    Phase,
    /// Selection vector: decides whether the token is watermarked at all.
    Selection,
}

/// Parameters for generating a key.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct KeyParams {
    pub classes: usize,
    pub vocab_size: usize,
    pub dim: usize,
    /// Signal frequency in cycles per unit hash value.
    pub frequency: f64,
    pub target_class: usize,
}

impl Default for KeyParams {
    fn default() -> Self {
        Self {
            classes: 2,
            vocab_size: 2000,
            dim: DEFAULT_DIM,
            frequency: 16.0,
            target_class: 0,
        }
    }
}

impl KeyParams {
    fn validate(&self) -> Result<(), KeyError> {
        if self.classes < 2 {
            return Err(KeyError::InvalidDimension(format!(
                "class count must be at least 2, got {}",
                self.classes
            )));
        }
        if self.vocab_size == 0 {
            return Err(KeyError::InvalidDimension("vocabulary size must be at least 1".into()));
        }
        if self.dim == 0 {
            return Err(KeyError::InvalidDimension("projection dimension must be at least 1".into()));
        }
        if self.target_class >= self.classes {
            return Err(KeyError::InvalidDimension(format!(
                "target class {} must be below class count {}",
                self.target_class, self.classes
            )));
        }
        if !(self.frequency > 0.0 && self.frequency.is_finite()) {
            return Err(KeyError::InvalidDimension(format!(
                "frequency must be positive and finite, got {}",
                self.frequency
            )));
        }
        Ok(())
    }
}

/// The secret watermark key.
#[derive(Debug, Clone, PartialEq)]
pub struct WatermarkKey {
    classes: usize,
    target_class: usize,
    frequency: f64,
    phase: Vec<f64>,
    selection: Vec<f64>,
    matrix: TokenMatrix,
}

impl WatermarkKey {
    /// Draws a fresh key. Vectors are uniform on `[0, 1)`, matrix entries are
    /// standard normal; the result is a pure function of `params` and `seed`.
    pub fn generate(params: &KeyParams, seed: u64) -> Result<Self, KeyError> {
        params.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let phase: Vec<f64> = (0..params.dim).map(|_| rng.random::<f64>()).collect();
        let selection: Vec<f64> = (0..params.dim).map(|_| rng.random::<f64>()).collect();
        let data: Vec<f64> = (0..params.vocab_size * params.dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        Ok(Self {
            classes: params.classes,
            target_class: params.target_class,
            frequency: params.frequency,
            phase,
            selection,
            matrix: TokenMatrix {
                rows: params.vocab_size,
                cols: params.dim,
                data,
            },
        })
    }

    /// Assembles a key from explicit parts, checking every invariant.
    pub fn from_parts(
        classes: usize,
        target_class: usize,
        frequency: f64,
        phase: Vec<f64>,
        selection: Vec<f64>,
        matrix: TokenMatrix,
    ) -> Result<Self, KeyError> {
        KeyParams {
            classes,
            vocab_size: matrix.rows,
            dim: matrix.cols,
            frequency,
            target_class,
        }
        .validate()?;
        for (field, v) in [("v_k", &phase), ("v_s", &selection)] {
            if v.len() != matrix.cols {
                return Err(KeyError::DimensionMismatch {
                    field: field.into(),
                    expected: matrix.cols,
                    found: v.len(),
                });
            }
            if let Some(bad) = v.iter().find(|e| !(0.0..1.0).contains(*e)) {
                return Err(KeyError::Corrupt {
                    field: field.into(),
                    reason: format!("entry {bad} outside [0, 1)"),
                });
            }
        }
        if matrix.data.iter().any(|e| !e.is_finite()) {
            return Err(KeyError::Corrupt {
                field: "M".into(),
                reason: "non-finite entry".into(),
            });
        }
        Ok(Self {
            classes,
            target_class,
            frequency,
            phase,
            selection,
            matrix,
        })
    }

    /// Same key with a freshly drawn phase vector. Useful for wrong-key probing.
    pub fn with_random_phase(&self, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let phase = (0..self.dim()).map(|_| rng.random::<f64>()).collect();
        Self {
            phase,
            ..self.clone()
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn target_class(&self) -> usize {
        self.target_class
    }

    pub fn frequency(&self) -> f64 {
        self.frequency
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.rows
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols
    }

    pub fn phase_vector(&self) -> &[f64] {
        &self.phase
    }

    pub fn selection_vector(&self) -> &[f64] {
        &self.selection
    }

    pub fn matrix(&self) -> &TokenMatrix {
        &self.matrix
    }

    pub fn hash(&self, role: HashRole, token: usize) -> Result<f64, KeyError> {
        let v = match role {
            HashRole::Phase => &self.phase,
            HashRole::Selection => &self.selection,
        };
        hash_value(v, token, &self.matrix)
    }

    /// Hash of every vocabulary token, indexed by token id.
    pub fn hash_table(&self, role: HashRole) -> Vec<f64> {
        (0..self.vocab_size())
            .map(|x| self.hash(role, x).expect("token within vocabulary"))
            .collect()
    }

    pub fn is_selected(&self, cfg: &WatermarkConfig, token: usize) -> Result<bool, KeyError> {
        Ok(self.hash(HashRole::Selection, token)? <= cfg.tau())
    }

    pub fn check_class(&self, class: usize) -> Result<(), KeyError> {
        if class >= self.classes {
            return Err(KeyError::ClassOutOfRange {
                class,
                classes: self.classes,
            });
        }
        Ok(())
    }
}

/// `Φ((v · M_x) / sqrt(n/3))`, clamped into `[0, 1)`.
pub fn hash_value(v: &[f64], token: usize, matrix: &TokenMatrix) -> Result<f64, KeyError> {
    if token >= matrix.rows {
        return Err(KeyError::OutOfVocabulary {
            token,
            vocab_size: matrix.rows,
        });
    }
    if v.len() != matrix.cols {
        return Err(KeyError::DimensionMismatch {
            field: "vector".into(),
            expected: matrix.cols,
            found: v.len(),
        });
    }
    let dot: f64 = v.iter().zip(matrix.row(token)).map(|(a, b)| a * b).sum();
    let scale = (matrix.cols as f64 / 3.0).sqrt();
    Ok(standard_normal_cdf(dot / scale).min(BELOW_ONE))
}

/// Output mode of the protected API.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutputMode {
    #[default]
    Soft,
    Hard,
}

impl std::str::FromStr for OutputMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "soft" => Ok(OutputMode::Soft),
            "hard" => Ok(OutputMode::Hard),
            other => Err(format!("unknown mode `{other}` (expected soft or hard)")),
        }
    }
}

/// Serving-time parameters: watermark level, selection ratio and output mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawConfig")]
pub struct WatermarkConfig {
    epsilon: f64,
    tau: f64,
    #[serde(default)]
    mode: OutputMode,
}

#[derive(Deserialize)]
struct RawConfig {
    epsilon: f64,
    tau: f64,
    #[serde(default)]
    mode: OutputMode,
}

impl TryFrom<RawConfig> for WatermarkConfig {
    type Error = KeyError;

    fn try_from(raw: RawConfig) -> Result<Self, Self::Error> {
        WatermarkConfig::new(raw.epsilon, raw.tau, raw.mode)
    }
}

impl Default for WatermarkConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.2,
            tau: 0.5,
            mode: OutputMode::Soft,
        }
    }
}

impl WatermarkConfig {
    /// Largest admissible watermark level.
    pub const MAX_EPSILON: f64 = 0.5;

    pub fn new(epsilon: f64, tau: f64, mode: OutputMode) -> Result<Self, KeyError> {
        if !(0.0..=Self::MAX_EPSILON).contains(&epsilon) {
            return Err(KeyError::InvalidConfig(format!(
                "epsilon must lie in [0, {}], got {epsilon}",
                Self::MAX_EPSILON
            )));
        }
        if !(0.0..=1.0).contains(&tau) {
            return Err(KeyError::InvalidConfig(format!(
                "tau must lie in [0, 1], got {tau}"
            )));
        }
        Ok(Self { epsilon, tau, mode })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn mode(&self) -> OutputMode {
        self.mode
    }

    pub fn with_mode(self, mode: OutputMode) -> Self {
        Self { mode, ..self }
    }

    pub fn with_epsilon(self, epsilon: f64) -> Result<Self, KeyError> {
        Self::new(epsilon, self.tau, self.mode)
    }

    pub fn with_tau(self, tau: f64) -> Result<Self, KeyError> {
        Self::new(self.epsilon, tau, self.mode)
    }
}

/// Contents of a key file: the key plus the serving parameters it was issued
/// with, when known.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyFile {
    pub key: WatermarkKey,
    pub epsilon: Option<f64>,
    pub tau: Option<f64>,
}

impl KeyFile {
    pub fn new(key: WatermarkKey) -> Self {
        Self {
            key,
            epsilon: None,
            tau: None,
        }
    }

    pub fn with_config(key: WatermarkKey, cfg: &WatermarkConfig) -> Self {
        Self {
            key,
            epsilon: Some(cfg.epsilon()),
            tau: Some(cfg.tau()),
        }
    }

    /// Serving config stored with the key, if both parameters are present.
    pub fn config(&self, mode: OutputMode) -> Option<Result<WatermarkConfig, KeyError>> {
        match (self.epsilon, self.tau) {
            (Some(e), Some(t)) => Some(WatermarkConfig::new(e, t, mode)),
            _ => None,
        }
    }

    /// Canonical text form: one JSON document, numbers with 17 significant digits.
    pub fn to_text(&self) -> String {
        #[derive(Serialize)]
        struct Out<'a> {
            version: u64,
            m: usize,
            vocab_size: usize,
            dim: usize,
            f_w: f64,
            target_class: usize,
            #[serde(skip_serializing_if = "Option::is_none")]
            epsilon: Option<f64>,
            #[serde(skip_serializing_if = "Option::is_none")]
            tau: Option<f64>,
            v_k: &'a [f64],
            v_s: &'a [f64],
            #[serde(rename = "M")]
            matrix: Vec<&'a [f64]>,
        }
        let key = &self.key;
        let out = Out {
            version: KEY_FILE_VERSION,
            m: key.classes,
            vocab_size: key.vocab_size(),
            dim: key.dim(),
            f_w: key.frequency,
            target_class: key.target_class,
            epsilon: self.epsilon,
            tau: self.tau,
            v_k: &key.phase,
            v_s: &key.selection,
            matrix: (0..key.vocab_size()).map(|i| key.matrix.row(i)).collect(),
        };
        let mut text = io::to_json_string(&out);
        text.push('\n');
        text
    }

    pub fn from_text(text: &str) -> Result<Self, KeyError> {
        #[derive(Deserialize)]
        struct Raw<'a> {
            #[serde(borrow)]
            version: Option<&'a RawValue>,
            #[serde(borrow)]
            m: Option<&'a RawValue>,
            #[serde(borrow)]
            vocab_size: Option<&'a RawValue>,
            #[serde(borrow)]
            dim: Option<&'a RawValue>,
            #[serde(borrow)]
            f_w: Option<&'a RawValue>,
            #[serde(borrow)]
            target_class: Option<&'a RawValue>,
            #[serde(borrow)]
            epsilon: Option<&'a RawValue>,
            #[serde(borrow)]
            tau: Option<&'a RawValue>,
            #[serde(borrow)]
            v_k: Option<&'a RawValue>,
            #[serde(borrow)]
            v_s: Option<&'a RawValue>,
            #[serde(borrow, rename = "M")]
            matrix: Option<&'a RawValue>,
        }

        fn field<T: for<'de> Deserialize<'de>>(
            name: &str,
            raw: Option<&RawValue>,
        ) -> Result<T, KeyError> {
            let raw = raw.ok_or_else(|| KeyError::Corrupt {
                field: name.into(),
                reason: "missing".into(),
            })?;
            serde_json::from_str(raw.get()).map_err(|e| KeyError::Corrupt {
                field: name.into(),
                reason: e.to_string(),
            })
        }

        fn optional(name: &str, raw: Option<&RawValue>) -> Result<Option<f64>, KeyError> {
            match raw {
                None => Ok(None),
                Some(r) if r.get() == "null" => Ok(None),
                Some(_) => field::<f64>(name, raw).map(Some),
            }
        }

        let raw: Raw = serde_json::from_str(text).map_err(|e| KeyError::Corrupt {
            field: "<document>".into(),
            reason: e.to_string(),
        })?;

        let version: u64 = field("version", raw.version)?;
        if version != KEY_FILE_VERSION {
            return Err(KeyError::Corrupt {
                field: "version".into(),
                reason: format!("unsupported version {version}"),
            });
        }
        let classes: usize = field("m", raw.m)?;
        let vocab_size: usize = field("vocab_size", raw.vocab_size)?;
        let dim: usize = field("dim", raw.dim)?;
        let frequency: f64 = field("f_w", raw.f_w)?;
        let target_class: usize = field("target_class", raw.target_class)?;
        let epsilon = optional("epsilon", raw.epsilon)?;
        let tau = optional("tau", raw.tau)?;
        let phase: Vec<f64> = field("v_k", raw.v_k)?;
        let selection: Vec<f64> = field("v_s", raw.v_s)?;
        let rows: Vec<Vec<f64>> = field("M", raw.matrix)?;

        for (name, v) in [("v_k", &phase), ("v_s", &selection)] {
            if v.len() != dim {
                return Err(KeyError::DimensionMismatch {
                    field: name.into(),
                    expected: dim,
                    found: v.len(),
                });
            }
        }
        if rows.len() != vocab_size {
            return Err(KeyError::DimensionMismatch {
                field: "M".into(),
                expected: vocab_size,
                found: rows.len(),
            });
        }
        let matrix = TokenMatrix::from_rows(rows, dim)?;
        let key = WatermarkKey::from_parts(classes, target_class, frequency, phase, selection, matrix)?;
        if let (Some(e), Some(t)) = (epsilon, tau) {
            WatermarkConfig::new(e, t, OutputMode::Soft)?;
        }
        Ok(Self { key, epsilon, tau })
    }

    pub fn save(&self, path: &Path) -> Result<(), KeyError> {
        io::write_atomic(path, self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, KeyError> {
        let text = fs::read_to_string(path)
            .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }
}

pub fn save_key(key: &WatermarkKey, path: &Path) -> Result<(), KeyError> {
    KeyFile::new(key.clone()).save(path)
}

pub fn load_key(path: &Path) -> Result<WatermarkKey, KeyError> {
    Ok(KeyFile::load(path)?.key)
}
