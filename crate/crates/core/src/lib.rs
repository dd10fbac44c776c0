//! Keyed sinusoidal watermarking of classifier output probabilities and
//! spectral detection of the watermark in models distilled from them.

pub mod detect;
pub mod io;
pub mod keys;
pub mod normal;
pub mod sim;
pub mod spectral;
pub mod watermark;

pub use keys::{HashRole, KeyError, KeyFile, KeyParams, OutputMode, TokenMatrix, WatermarkConfig, WatermarkKey};
pub use spectral::{FrequencyGrid, GridSpec, PowerSpectrum, ProbeSeries, SnrResult, SpectralError};
pub use watermark::{Answer, ProbabilityVector, WatermarkError, WatermarkedOutput};
pub use detect::{
    DetectError, Decision, DetectionParams, DetectionReport, DetectionWarning, ProbeOutput, ProbeRecord, RankingTrial,
};
