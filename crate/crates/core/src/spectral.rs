//! Lomb-Scargle power spectrum of an unevenly sampled series and the
//! windowed signal-to-noise ratio used as the detection score.
//!
//! Frequencies are ordinary frequencies, in cycles per unit of the sample
//! coordinate `t`; the periodogram is evaluated at angular frequency
//! `ω = 2πf`.

use std::f64::consts::TAU;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum number of samples in a probe series.
pub const MIN_SERIES_LEN: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum SpectralError {
    #[error("invalid probe series: {0}")]
    InvalidSeries(String),
    #[error("invalid frequency grid: {0}")]
    InvalidGrid(String),
    #[error("invalid window: {0}")]
    WindowOutsideGrid(String),
}

/// Sample coordinates (hash values) paired with observed scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSeries {
    t: Vec<f64>,
    y: Vec<f64>,
}

impl ProbeSeries {
    pub fn new(t: Vec<f64>, y: Vec<f64>) -> Result<Self, SpectralError> {
        if t.len() != y.len() {
            return Err(SpectralError::InvalidSeries(format!(
                "{} sample coordinates but {} scores",
                t.len(),
                y.len()
            )));
        }
        if t.len() < MIN_SERIES_LEN {
            return Err(SpectralError::InvalidSeries(format!(
                "{} samples, need at least {MIN_SERIES_LEN}",
                t.len()
            )));
        }
        if let Some(bad) = t.iter().find(|v| !(0.0..1.0).contains(*v)) {
            return Err(SpectralError::InvalidSeries(format!("coordinate {bad} outside [0, 1)")));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(SpectralError::InvalidSeries("non-finite score".into()));
        }
        Ok(Self { t, y })
    }

    pub fn t(&self) -> &[f64] {
        &self.t
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Strictly increasing grid of positive frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpec", into = "GridSpec")]
pub struct FrequencyGrid {
    spec: GridSpec,
    freqs: Vec<f64>,
}

/// Evenly spaced grid description: `start, start + step, ...` up to `stop`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            start: 0.5,
            stop: 50.0,
            step: 0.05,
        }
    }
}

impl TryFrom<GridSpec> for FrequencyGrid {
    type Error = SpectralError;

    fn try_from(spec: GridSpec) -> Result<Self, SpectralError> {
        FrequencyGrid::linear(spec.start, spec.stop, spec.step)
    }
}

impl From<FrequencyGrid> for GridSpec {
    fn from(grid: FrequencyGrid) -> Self {
        grid.spec
    }
}

impl Default for FrequencyGrid {
    fn default() -> Self {
        GridSpec::default().try_into().expect("default grid is valid")
    }
}

impl FrequencyGrid {
    pub fn linear(start: f64, stop: f64, step: f64) -> Result<Self, SpectralError> {
        if !(start > 0.0 && start.is_finite() && stop.is_finite()) {
            return Err(SpectralError::InvalidGrid(format!(
                "start {start} must be positive and stop {stop} finite"
            )));
        }
        if !(step > 0.0) || stop <= start {
            return Err(SpectralError::InvalidGrid(format!(
                "need start < stop and step > 0, got {start}..{stop} step {step}"
            )));
        }
        // tolerate stop landing a rounding error short of the last point
        let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
        let freqs = (0..count).map(|i| start + i as f64 * step).collect();
        Ok(Self {
            spec: GridSpec { start, stop, step },
            freqs,
        })
    }

    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn step(&self) -> f64 {
        self.spec.step
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrum {
    freqs: Vec<f64>,
    power: Vec<f64>,
    /// Set when the input scores were constant and the power is all zero.
    pub degenerate: bool,
}

impl PowerSpectrum {
    /// Spectrum from explicit values; used for synthetic spectra in tests and
    /// for re-scoring exported spectra.
    pub fn from_values(freqs: Vec<f64>, power: Vec<f64>) -> Result<Self, SpectralError> {
        if freqs.len() != power.len() || freqs.len() < 2 {
            return Err(SpectralError::InvalidGrid("need at least two matching points".into()));
        }
        if freqs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SpectralError::InvalidGrid("frequencies not strictly increasing".into()));
        }
        if power.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(SpectralError::InvalidGrid("power must be finite and nonnegative".into()));
        }
        Ok(Self {
            freqs,
            power,
            degenerate: false,
        })
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn power(&self) -> &[f64] {
        &self.power
    }

    /// Frequency with the highest power (first one on ties).
    pub fn peak_frequency(&self) -> f64 {
        let mut best = 0;
        for (i, &p) in self.power.iter().enumerate() {
            if p > self.power[best] {
                best = i;
            }
        }
        self.freqs[best]
    }

    /// Two whitespace-separated columns, frequency then power.
    pub fn to_columns(&self) -> String {
        let mut out = String::from("# frequency power\n");
        for (f, p) in self.freqs.iter().zip(&self.power) {
            let _ = writeln!(out, "{f:.16e} {p:.16e}");
        }
        out
    }

    /// Integral of the piecewise-linear interpolant of the power over `[a, b]`.
    /// This is the trapezoidal rule with the end points interpolated.
    fn integrate(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        let f = &self.freqs;
        let p = &self.power;
        let mut total = 0.0;
        for i in 0..f.len() - 1 {
            let (lo, hi) = (f[i].max(a), f[i + 1].min(b));
            if hi <= lo {
                continue;
            }
            let slope = (p[i + 1] - p[i]) / (f[i + 1] - f[i]);
            let at = |x: f64| p[i] + slope * (x - f[i]);
            total += 0.5 * (at(lo) + at(hi)) * (hi - lo);
        }
        total
    }
}

/// Classical Lomb-Scargle periodogram, normalised by the sample variance so
/// that white noise has unit mean power.
///
/// Pairs are put in a canonical order before summation, which makes the
/// result bit-for-bit independent of the input order.
pub fn lomb_scargle(series: &ProbeSeries, grid: &FrequencyGrid) -> PowerSpectrum {
    let mut pairs: Vec<(f64, f64)> = series.t.iter().copied().zip(series.y.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let n = pairs.len() as f64;
    let mean = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let resid: Vec<f64> = pairs.iter().map(|p| p.1 - mean).collect();
    let variance = resid.iter().map(|r| r * r).sum::<f64>() / (n - 1.0);
    let freqs = grid.freqs().to_vec();

    // compare raw values: the mean of a constant series need not reproduce it exactly
    if pairs.iter().all(|p| p.1 == pairs[0].1) || variance == 0.0 {
        let power = vec![0.0; freqs.len()];
        return PowerSpectrum {
            freqs,
            power,
            degenerate: true,
        };
    }

    let t: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let power = freqs
        .par_iter()
        .map(|&f| scargle_power(&t, &resid, TAU * f, variance))
        .collect();
    PowerSpectrum {
        freqs,
        power,
        degenerate: false,
    }
}

fn scargle_power(t: &[f64], resid: &[f64], omega: f64, variance: f64) -> f64 {
    let mut trig = Vec::with_capacity(t.len());
    let (mut s2, mut c2) = (0.0, 0.0);
    for &tj in t {
        let (s, c) = (omega * tj).sin_cos();
        s2 += 2.0 * s * c;
        c2 += c * c - s * s;
        trig.push((s, c));
    }
    // ωθ from tan(2ωθ) = Σ sin 2ωt / Σ cos 2ωt
    let phase = 0.5 * s2.atan2(c2);
    let (sp, cp) = phase.sin_cos();
    let (mut yc, mut ys, mut cc, mut ss) = (0.0, 0.0, 0.0, 0.0);
    for (&(s, c), &r) in trig.iter().zip(resid) {
        // cos ω(t − θ) and sin ω(t − θ)
        let cs = c * cp + s * sp;
        let sn = s * cp - c * sp;
        yc += r * cs;
        ys += r * sn;
        cc += cs * cs;
        ss += sn * sn;
    }
    let tiny = 1e-12 * t.len() as f64;
    let cos_term = if cc > tiny { yc * yc / cc } else { 0.0 };
    let sin_term = if ss > tiny { ys * ys / ss } else { 0.0 };
    (cos_term + sin_term) / (2.0 * variance)
}

/// Windowed signal-to-noise ratio of a spectrum around `f_w`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrResult {
    pub p_signal: f64,
    pub p_noise: f64,
    /// `p_signal / p_noise`; `+∞` when the noise band is empty of power but the
    /// window is not, and `0` when both are empty.
    pub p_snr: f64,
    pub f_w: f64,
    pub delta: f64,
    pub f_max: f64,
    /// Set when `p_noise` is zero.
    pub zero_noise: bool,
}

impl SnrResult {
    /// Score for a series that could not be analysed.
    pub fn empty(f_w: f64, delta: f64, f_max: f64) -> Self {
        Self {
            p_signal: 0.0,
            p_noise: 0.0,
            p_snr: 0.0,
            f_w,
            delta,
            f_max,
            zero_noise: true,
        }
    }
}

/// Average power in `[f_w − δ/2, f_w + δ/2]` over average power in the rest of
/// `[f_min, F]`, where `f_min` is the first grid frequency. Both averages
/// divide by the length of the band they integrate over.
pub fn snr_score(
    spectrum: &PowerSpectrum,
    f_w: f64,
    delta: f64,
    f_max: f64,
) -> Result<SnrResult, SpectralError> {
    let f_min = spectrum.freqs[0];
    let f_top = *spectrum.freqs.last().expect("spectrum is nonempty");
    if !(delta > 0.0 && delta < f_max) {
        return Err(SpectralError::WindowOutsideGrid(format!(
            "need 0 < delta < F, got delta {delta}, F {f_max}"
        )));
    }
    let (lo, hi) = (f_w - delta / 2.0, f_w + delta / 2.0);
    if lo < f_min || hi > f_max || f_max > f_top * (1.0 + 1e-12) {
        return Err(SpectralError::WindowOutsideGrid(format!(
            "window [{lo}, {hi}] with F {f_max} must fit in the grid [{f_min}, {f_top}]"
        )));
    }
    let f_max = f_max.min(f_top);
    let noise_band = (f_max - f_min) - delta;
    if noise_band <= 0.0 {
        return Err(SpectralError::WindowOutsideGrid(
            "window covers the whole band, nothing left for noise".into(),
        ));
    }
    let p_signal = spectrum.integrate(lo, hi) / delta;
    let p_noise = (spectrum.integrate(f_min, lo) + spectrum.integrate(hi, f_max)) / noise_band;
    let zero_noise = p_noise == 0.0;
    let p_snr = if !zero_noise {
        p_signal / p_noise
    } else if p_signal > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    Ok(SnrResult {
        p_signal,
        p_noise,
        p_snr,
        f_w,
        delta,
        f_max,
        zero_noise,
    })
}
