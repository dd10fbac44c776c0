use proptest::prelude::*;

use drw_core::detect::{
    average_precision, build_probe_series, detect_series, detect_watermark, jsd_pair, jsd_score,
    mean_average_precision, required_probes,
};
use drw_core::watermark::apply_watermark;
use drw_core::{
    DetectError, DetectionParams, KeyParams, OutputMode, ProbabilityVector, ProbeRecord, ProbeSeries, RankingTrial,
    WatermarkConfig, WatermarkKey,
};

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// H(midpoint) − mean entropy: algebraically the same divergence, computed another way.
fn jsd_entropy_form(a: &[f64], b: &[f64]) -> f64 {
    let mid: Vec<f64> = a.iter().zip(b).map(|(p, q)| 0.5 * (p + q)).collect();
    entropy(&mid) - 0.5 * (entropy(a) + entropy(b))
}

fn pv(v: &[f64]) -> ProbabilityVector {
    ProbabilityVector::new(v.to_vec()).unwrap()
}

fn simplex(m: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, m)
        .prop_filter("nonzero", |w| w.iter().sum::<f64>() > 1e-6)
        .prop_map(|w| {
            let s: f64 = w.iter().sum();
            w.into_iter().map(|v| v / s).collect()
        })
}

#[test]
fn jsd_reference_values() {
    let v = jsd_pair(&[0.8, 0.2], &[0.6, 0.4]);
    assert!((v - jsd_entropy_form(&[0.8, 0.2], &[0.6, 0.4])).abs() < 1e-15);
    assert!((v - 0.0241573).abs() < 1e-7, "{v}");
    assert!((jsd_pair(&[1.0, 0.0], &[0.0, 1.0]) - std::f64::consts::LN_2).abs() < 1e-15);
    let a = vec![pv(&[0.2, 0.8]), pv(&[0.5, 0.5])];
    assert_eq!(jsd_score(&a, &a).unwrap(), 0.0);
}

proptest! {
    #[test]
    fn jsd_matches_entropy_form_and_is_bounded(a in simplex(4), b in simplex(4)) {
        let v = jsd_pair(&a, &b);
        prop_assert!((v - jsd_entropy_form(&a, &b)).abs() < 1e-12);
        prop_assert!(v >= -1e-15 && v <= std::f64::consts::LN_2 + 1e-12);
        let (pa, pb) = (vec![pv(&a)], vec![pv(&b)]);
        prop_assert_eq!(jsd_score(&pa, &pb).unwrap(), jsd_score(&pb, &pa).unwrap());
    }

    #[test]
    fn raising_a_positive_never_lowers_ap(
        pos in prop::collection::vec(-10.0f64..10.0, 1..12),
        neg in prop::collection::vec(-10.0f64..10.0, 1..12),
        which in any::<prop::sample::Index>(),
        bump in 0.0f64..5.0,
    ) {
        let trial = RankingTrial { positive_scores: pos.clone(), negative_scores: neg.clone(), higher_is_positive: true };
        let before = average_precision(&trial).unwrap();
        let mut raised = pos.clone();
        raised[which.index(pos.len())] += bump;
        let after = average_precision(&RankingTrial { positive_scores: raised, ..trial.clone() }).unwrap();
        prop_assert!(after >= before - 1e-12);
        prop_assert!((0.0..=1.0).contains(&before));

        // flipping the direction and negating every score ranks identically
        let flipped = RankingTrial {
            positive_scores: pos.iter().map(|s| -s).collect(),
            negative_scores: neg.iter().map(|s| -s).collect(),
            higher_is_positive: false,
        };
        prop_assert_eq!(average_precision(&flipped).unwrap(), before);
    }
}

#[test]
fn average_precision_reference_values() {
    let trial = |p: Vec<f64>, n: Vec<f64>| RankingTrial {
        positive_scores: p,
        negative_scores: n,
        higher_is_positive: true,
    };
    assert_eq!(average_precision(&trial(vec![5.0, 6.0], vec![1.0, 2.0])).unwrap(), 1.0);
    assert!((average_precision(&trial(vec![3.0, 1.0], vec![2.0])).unwrap() - 5.0 / 6.0).abs() < 1e-15);
    let map = mean_average_precision(&[trial(vec![3.0, 1.0], vec![2.0]), trial(vec![9.0], vec![1.0])]).unwrap();
    assert!((map - (5.0 / 6.0 + 1.0) / 2.0).abs() < 1e-15);
    assert!(matches!(mean_average_precision(&[]), Err(DetectError::EmptyTrial(_))));
}

fn key() -> WatermarkKey {
    WatermarkKey::generate(&KeyParams::default(), 21).unwrap()
}

#[test]
fn selection_keeps_about_half_of_mixed_records() {
    let key = key();
    let cfg = WatermarkConfig::new(0.2, 0.5, OutputMode::Soft).unwrap();
    let records: Vec<ProbeRecord> = (0..1000)
        .map(|x| {
            if x % 2 == 0 {
                ProbeRecord::soft(x, pv(&[0.4, 0.6]))
            } else {
                ProbeRecord::hard(x, x % 3 % 2)
            }
        })
        .collect();
    assert_eq!(required_probes(&records), 64);
    let series = build_probe_series(&key, &cfg, &records).unwrap();
    let frac = series.len() as f64 / 1000.0;
    assert!((frac - 0.5).abs() < 0.05, "{frac}");
    let all = WatermarkConfig::new(0.2, 1.0, OutputMode::Soft).unwrap();
    let soft: Vec<ProbeRecord> = (0..100).map(|x| ProbeRecord::soft(x, pv(&[0.4, 0.6]))).collect();
    assert_eq!(build_probe_series(&key, &all, &soft).unwrap().len(), 100);
}

#[test]
fn watermarked_probes_are_detected_and_clean_ones_are_not() {
    let key = key();
    let cfg = WatermarkConfig::new(0.2, 0.5, OutputMode::Soft).unwrap();
    let params = DetectionParams::default();
    let clean: Vec<ProbeRecord> = (0..2000)
        .map(|x| {
            let p = 0.3 + 0.4 * ((x * 37 % 101) as f64 / 101.0);
            ProbeRecord::soft(x, pv(&[p, 1.0 - p]))
        })
        .collect();
    let marked: Vec<ProbeRecord> = clean
        .iter()
        .map(|r| match &r.output {
            drw_core::ProbeOutput::Soft(p) => ProbeRecord::soft(r.x, apply_watermark(&key, &cfg, r.x, p).unwrap().0),
            drw_core::ProbeOutput::Hard(_) => unreachable!(),
        })
        .collect();
    let positive = detect_watermark(&key, &cfg, &marked, &params).unwrap();
    assert!(positive.is_positive() && positive.snr.p_snr > 15.0, "{positive:?}");
    let negative = detect_watermark(&key, &cfg, &clean, &params).unwrap();
    assert!(!negative.is_positive() && negative.snr.p_snr < 5.0, "{:?}", negative.snr);
    let wrong = detect_watermark(&key.with_random_phase(99), &cfg, &marked, &params).unwrap();
    assert!(wrong.snr.p_snr < 5.0, "{:?}", wrong.snr);
}

#[test]
fn constant_hard_labels_are_a_negative_with_a_warning() {
    let key = key();
    let cfg = WatermarkConfig::new(0.2, 0.5, OutputMode::Hard).unwrap();
    let records: Vec<ProbeRecord> = (0..2000).map(|x| ProbeRecord::hard(x, key.target_class())).collect();
    let series = build_probe_series(&key, &cfg, &records).unwrap();
    assert!(series.y().iter().all(|&y| y == 1.0));
    let report = detect_watermark(&key, &cfg, &records, &DetectionParams::default()).unwrap();
    assert!(!report.is_positive());
    assert!(report.to_json().contains("degenerate_series"));
}

#[test]
fn too_few_probes_is_reported() {
    let key = key();
    let cfg = WatermarkConfig::new(0.2, 0.5, OutputMode::Soft).unwrap();
    let records: Vec<ProbeRecord> = (0..6).map(|x| ProbeRecord::soft(x, pv(&[0.5, 0.5]))).collect();
    assert!(matches!(
        build_probe_series(&key, &cfg, &records),
        Err(DetectError::TooFewProbes { .. })
    ));
    let report = detect_watermark(&key, &cfg, &records, &DetectionParams::default()).unwrap();
    assert!(report.too_few_probes() && !report.is_positive());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn decision_follows_threshold(
        ys in prop::collection::vec(-1.0f64..1.0, 8..64),
        threshold in 0.0f64..20.0,
    ) {
        let n = ys.len();
        let t = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let params = DetectionParams { threshold, ..DetectionParams::default() };
        let report = detect_series(&ProbeSeries::new(t, ys).unwrap(), 16.0, &params).unwrap();
        prop_assert_eq!(report.is_positive(), report.snr.p_snr >= threshold);
    }
}
