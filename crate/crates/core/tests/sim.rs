use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use drw_core::detect::build_probe_series;
use drw_core::sim::{
    distill_student, make_task, run_detection_experiment, run_experiment_detailed, theorem_bound_check, victim_answer,
    ExperimentConfig, Loss, ModelRole, PDist, StudentSpec, TaskParams,
};
use drw_core::spectral::lomb_scargle;
use drw_core::watermark::apply_watermark;
use drw_core::{Answer, KeyParams, OutputMode, WatermarkConfig, WatermarkKey};

fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

fn ks_uniform(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n).max((i + 1) as f64 / n - x))
        .fold(0.0, f64::max)
}

/// Composite Simpson rule.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let inner: f64 = (1..n).map(|i| f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 }).sum();
    h / 3.0 * (f(a) + inner + f(b))
}

#[test]
fn task_rows_follow_the_dirichlet_prior() {
    let confident = make_task(
        1,
        &TaskParams {
            concentration: 0.1,
            classes: 3,
            ..TaskParams::default()
        },
    )
    .unwrap();
    let mean_max = confident.pi.iter().map(|p| p.iter().cloned().fold(0.0, f64::max)).sum::<f64>() / 2000.0;
    assert!(mean_max > 0.8, "{mean_max}");

    let flat = make_task(2, &TaskParams::default()).unwrap();
    let d = ks_uniform(flat.pi.iter().map(|p| p[0]).collect());
    assert!(d < 0.04, "KS {d}");
    assert!((flat.token_freq.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(flat, make_task(2, &TaskParams::default()).unwrap());
}

#[test]
fn victim_watermarks_about_half_of_the_tokens() {
    let task = make_task(3, &TaskParams::default()).unwrap();
    let key = WatermarkKey::generate(&KeyParams::default(), 3).unwrap();
    let cfg = WatermarkConfig::new(0.2, 0.5, OutputMode::Soft).unwrap();
    let clear = WatermarkConfig::new(0.0, 0.5, OutputMode::Soft).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let mut changed = 0;
    for x in 0..2000 {
        let Answer::Soft(y) = victim_answer(&task, &key, &cfg, x, &mut rng).unwrap().answer else {
            panic!("soft mode");
        };
        changed += usize::from(y != task.pi[x]);
        let Answer::Soft(y) = victim_answer(&task, &key, &clear, x, &mut rng).unwrap().answer else {
            panic!("soft mode");
        };
        assert_eq!(y, task.pi[x]);
    }
    let frac = changed as f64 / 2000.0;
    assert!((frac - 0.5).abs() < 0.05, "{frac}");
}

#[test]
fn repeated_hard_answers_match_the_soft_vector() {
    let task = make_task(4, &TaskParams::default()).unwrap();
    let key = WatermarkKey::generate(&KeyParams::default(), 4).unwrap();
    let cfg = WatermarkConfig::new(0.2, 0.5, OutputMode::Hard).unwrap();
    let x = (0..2000).find(|&x| key.is_selected(&cfg, x).unwrap()).unwrap();
    let (y, _) = apply_watermark(&key, &cfg, x, &task.pi[x]).unwrap();
    let n = 100_000;
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let zeros = (0..n)
        .filter(|_| victim_answer(&task, &key, &cfg, x, &mut rng).unwrap().answer == Answer::Hard(0))
        .count();
    let freq = zeros as f64 / n as f64;
    let se = (y[0] * y[1] / n as f64).sqrt();
    assert!((freq - y[0]).abs() < 4.0 * se, "{freq} vs {}", y[0]);
}

#[test]
fn table_student_fits_soft_targets() {
    let task = make_task(5, &TaskParams::default()).unwrap();
    let key = WatermarkKey::generate(&KeyParams::default(), 5).unwrap();
    let cfg = WatermarkConfig::new(0.2, 0.5, OutputMode::Soft).unwrap();
    let queries: Vec<usize> = (0..2000).collect();
    let targets: Vec<_> = queries.iter().map(|&x| apply_watermark(&key, &cfg, x, &task.pi[x]).unwrap().0).collect();
    let answers: Vec<Answer> = targets.iter().cloned().map(Answer::Soft).collect();
    let spec = StudentSpec::default();
    let student = spec.init(2000, 2, &mut ChaCha20Rng::seed_from_u64(1));
    let (student, report) = distill_student(student, &queries, &answers, Loss::Kl, spec.train()).unwrap();
    assert!(report.converged, "{} epochs, max tv {}", report.epochs, report.max_tv);
    for x in queries {
        assert!(tv(&student.predict(x), &targets[x]) <= 1e-4, "token {x}");
    }
}

#[test]
fn table_student_fits_hard_label_frequencies() {
    let vocab = 300;
    let task = make_task(6, &TaskParams { vocab_size: vocab, ..TaskParams::default() }).unwrap();
    let key = WatermarkKey::generate(&KeyParams { vocab_size: vocab, ..KeyParams::default() }, 6).unwrap();
    let cfg = WatermarkConfig::new(0.2, 1.0, OutputMode::Hard).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let mut queries = Vec::new();
    let mut answers = Vec::new();
    for x in 0..vocab {
        for _ in 0..50 {
            queries.push(x);
            answers.push(victim_answer(&task, &key, &cfg, x, &mut rng).unwrap().answer);
        }
    }
    let spec = StudentSpec::default();
    let student = spec.init(vocab, 2, &mut ChaCha20Rng::seed_from_u64(2));
    let (student, _) = distill_student(student, &queries, &answers, Loss::Ce, spec.train()).unwrap();
    for x in 0..vocab {
        let y = apply_watermark(&key, &cfg, x, &task.pi[x]).unwrap().0;
        let se = (y[0] * y[1] / 50.0).sqrt();
        let q = student.predict(x);
        assert!((q[0] - y[0]).abs() <= 4.0 * se + 1e-3, "token {x}: {} vs {} (se {se})", q[0], y[0]);
    }
}

#[test]
fn beta_bounds_match_quadrature() {
    let density = |p: f64| 30.0 * p.powi(4) * (1.0 - p);
    let (eps, tau) = (0.2, 0.5);
    let n = 4000;
    let acc = simpson(|p| density(p) * (1.0 - p), 0.0, 0.5, n) + simpson(|p| density(p) * p, 0.5, 1.0, n);
    let band = simpson(density, 0.5 - eps, 0.5 + eps, n);
    let agreement = simpson(|p| density(p) * (2.0 * p * p - 2.0 * p + 1.0), 0.0, 1.0, n);
    let bound_soft = acc - tau * (0.5 + eps) * band;
    let bound_hard = (1.0 - tau) * acc + tau / (1.0 + 2.0 * eps) * agreement;

    let check = theorem_bound_check(PDist::Beta { a: 5.0, b: 2.0 }, eps, tau, 100_000, 8).unwrap();
    assert!(check.holds());
    assert!((check.acc_victim_expected - acc).abs() < 0.005, "{check}");
    assert!((check.bound_soft_expected - bound_soft).abs() < 0.005, "{} vs {bound_soft}", check.bound_soft_expected);
    assert!((check.bound_hard_expected - bound_hard).abs() < 0.005, "{} vs {bound_hard}", check.bound_hard_expected);
    // the label-based victim accuracy estimates the same quantity
    assert!((check.acc_victim - acc).abs() < 4.0 * check.se_soft, "{check}");
}

#[test]
fn default_experiment_ranks_every_positive_first() {
    // equal query budgets in both modes
    let cfg = ExperimentConfig {
        soft_queries_per_token: 50,
        ..ExperimentConfig::default()
    };
    let run = run_experiment_detailed(&cfg).unwrap();
    let soft = run.result.soft.as_ref().unwrap();
    let hard = run.result.hard.as_ref().unwrap();
    assert_eq!(soft.map, 1.0);
    assert_eq!(hard.map, 1.0);
    assert!(soft.snr_negatives.iter().chain(&hard.snr_negatives).all(|&s| s < cfg.threshold));

    // soft distillation carries at least as much signal as hard
    assert!(soft.mean_positive_snr >= hard.mean_positive_snr, "{} vs {}", soft.mean_positive_snr, hard.mean_positive_snr);
    let wins = soft.snr_positives.iter().zip(&hard.snr_positives).filter(|(s, h)| s >= h).count();
    assert!(wins >= 8, "soft won {wins}/10 pairs");

    // every positive's periodogram peaks at the key frequency
    let key = &run.analogs[0].key;
    let grid = cfg.detection_params().unwrap().grid;
    for model in run.models.iter().filter(|m| m.role == ModelRole::Positive) {
        let wcfg = cfg.watermark_config(model.mode).unwrap();
        let series = build_probe_series(key, &wcfg, &model.records).unwrap();
        let peak = lomb_scargle(&series, &grid).peak_frequency();
        assert!((peak - cfg.frequency).abs() <= grid.step() + 1e-9, "{:?} {}: peak {peak}", model.mode, model.index);
    }
}

#[test]
fn featurized_students_carry_the_watermark() {
    let cfg = ExperimentConfig {
        student: StudentSpec::featurized(),
        modes: vec![OutputMode::Soft],
        positives: 2,
        unwatermarked_negatives: 2,
        true_label_negatives: 2,
        ..ExperimentConfig::default()
    };
    let result = run_detection_experiment(&cfg).unwrap();
    let soft = result.soft.unwrap();
    assert!(soft.snr_positives.iter().all(|&s| s > cfg.threshold), "{:?}", soft.snr_positives);
    assert!(soft.snr_negatives.iter().all(|&s| s < cfg.threshold), "{:?}", soft.snr_negatives);
    assert_eq!(soft.map, 1.0);
}
