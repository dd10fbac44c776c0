use std::f64::consts::TAU;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use drw_core::spectral::{lomb_scargle, snr_score};
use drw_core::{FrequencyGrid, PowerSpectrum, ProbeSeries};

fn uniform_times(n: usize, rng: &mut ChaCha20Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

fn cosine(f: f64, n: usize, seed: u64) -> ProbeSeries {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let t = uniform_times(n, &mut rng);
    let y = t.iter().map(|&t| (TAU * f * t).cos()).collect();
    ProbeSeries::new(t, y).unwrap()
}

#[test]
fn cosine_peaks_at_its_frequency() {
    let grid = FrequencyGrid::default();
    let spectrum = lomb_scargle(&cosine(16.0, 512, 1), &grid);
    assert!((spectrum.peak_frequency() - 16.0).abs() <= grid.step() + 1e-9);
    let snr = snr_score(&spectrum, 16.0, 2.0, 50.0).unwrap();
    assert!(snr.p_snr > 50.0, "{snr:?}");
}

#[test]
fn flat_spectrum_scores_one() {
    let grid = FrequencyGrid::default();
    let spectrum = PowerSpectrum::from_values(grid.freqs().to_vec(), vec![3.7; grid.freqs().len()]).unwrap();
    let snr = snr_score(&spectrum, 16.0, 2.0, 50.0).unwrap();
    assert!((snr.p_snr - 1.0).abs() < 1e-9, "{}", snr.p_snr);
}

#[test]
fn white_noise_has_unit_mean_power() {
    let grid = FrequencyGrid::default();
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    for _ in 0..5 {
        let t = uniform_times(1024, &mut rng);
        let y = (0..1024).map(|_| rng.sample(StandardNormal)).collect();
        let spectrum = lomb_scargle(&ProbeSeries::new(t, y).unwrap(), &grid);
        let mean = spectrum.power().iter().sum::<f64>() / spectrum.power().len() as f64;
        assert!((0.5..=2.0).contains(&mean), "mean power {mean}");
        let snr = snr_score(&spectrum, 16.0, 2.0, 50.0).unwrap();
        assert!(snr.p_snr < 5.0, "noise scored {}", snr.p_snr);
    }
}

#[test]
fn even_sampling_matches_the_periodogram() {
    // at integer frequencies on t_j = j/N the time offset vanishes and the
    // normalised power is |DFT_k|^2 / (N σ^2)
    let n = 64;
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let t: Vec<f64> = (0..n).map(|j| j as f64 / n as f64).collect();
    let y: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let grid = FrequencyGrid::linear(1.0, 31.0, 1.0).unwrap();
    let spectrum = lomb_scargle(&ProbeSeries::new(t, y.clone()).unwrap(), &grid);

    let mean = y.iter().sum::<f64>() / n as f64;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    for (k, &p) in (1..=31).zip(spectrum.power()) {
        let (mut re, mut im) = (0.0, 0.0);
        for (j, v) in y.iter().enumerate() {
            let angle = TAU * (k * j) as f64 / n as f64;
            re += (v - mean) * angle.cos();
            im -= (v - mean) * angle.sin();
        }
        let expected = (re * re + im * im) / (n as f64 * var);
        assert!((p - expected).abs() < 1e-9 * expected.max(1.0), "k {k}: {p} vs {expected}");
    }
}

// frequency-estimate spread at this noise level is ~0.012, a quarter of a grid step
#[test]
fn peaks_are_localised_in_noise() {
    let grid = FrequencyGrid::default();
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let mut hits = 0;
    for _ in 0..100 {
        let f = rng.random_range(5.0..45.0);
        let phase = rng.random_range(0.0..TAU);
        let t = uniform_times(512, &mut rng);
        let y = t
            .iter()
            .map(|&t| (TAU * f * t + phase).cos() + 0.5 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let spectrum = lomb_scargle(&ProbeSeries::new(t, y).unwrap(), &grid);
        hits += usize::from((spectrum.peak_frequency() - f).abs() <= grid.step());
    }
    assert!(hits >= 95, "{hits}/100 peaks localised");
}

#[test]
fn constant_series_is_degenerate() {
    let t = (0..16).map(|i| i as f64 / 16.0).collect();
    let spectrum = lomb_scargle(&ProbeSeries::new(t, vec![0.3; 16]).unwrap(), &FrequencyGrid::default());
    assert!(spectrum.degenerate);
    assert!(spectrum.power().iter().all(|&p| p == 0.0));
}

fn series() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (8usize..80).prop_flat_map(|n| {
        (
            prop::collection::vec(0.0f64..1.0, n),
            prop::collection::vec(-1.0f64..1.0, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn permutation_gives_identical_power((t, y) in series(), seed in any::<u64>()) {
        let grid = FrequencyGrid::linear(0.5, 20.0, 0.5).unwrap();
        let mut idx: Vec<usize> = (0..t.len()).collect();
        idx.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
        let a = lomb_scargle(&ProbeSeries::new(t.clone(), y.clone()).unwrap(), &grid);
        let b = lomb_scargle(
            &ProbeSeries::new(idx.iter().map(|&i| t[i]).collect(), idx.iter().map(|&i| y[i]).collect()).unwrap(),
            &grid,
        );
        prop_assert_eq!(a.power(), b.power());
    }

    #[test]
    fn power_ignores_offset_and_scale((t, y) in series(), shift in -10.0f64..10.0, scale in 0.1f64..10.0) {
        prop_assume!(y.iter().any(|&v| v != y[0]));
        let grid = FrequencyGrid::linear(0.5, 20.0, 0.5).unwrap();
        let a = lomb_scargle(&ProbeSeries::new(t.clone(), y.clone()).unwrap(), &grid);
        let moved = y.iter().map(|v| scale * v + shift).collect();
        let b = lomb_scargle(&ProbeSeries::new(t, moved).unwrap(), &grid);
        for (p, q) in a.power().iter().zip(b.power()) {
            prop_assert!(p.is_finite() && *p >= 0.0);
            prop_assert!((p - q).abs() <= 1e-9 * p.abs().max(1.0), "{} vs {}", p, q);
        }
    }
}
