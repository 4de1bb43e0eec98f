use spkembed::config::RunConfig;
use spkembed::pipeline::{generate_data, SystemSpec};
use spkembed::trainer::train;

/// Least-squares slope of `ys` against their index.
fn slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mx;
        num += dx * (y - my);
        den += dx * dx;
    }
    num / den
}

fn small(seed: u64) -> RunConfig {
    RunConfig {
        n_speakers: 40,
        n_eval_speakers: 8,
        utts_per_speaker: 12,
        epochs: 15,
        n_target: 100,
        n_nontarget: 100,
        seed,
        ..RunConfig::default()
    }
}

fn sep_curve(seed: u64, system: &str) -> Vec<f64> {
    let cfg = SystemSpec::parse(system).unwrap().apply(&small(seed)).unwrap();
    let data = generate_data(&cfg).unwrap();
    let out = train(&data.train, &cfg.training_config()).unwrap();
    out.log.iter().map(|e| e.sep_energy).collect()
}

#[test]
fn separability_energy_trend_does_not_rise_when_regularizer_dominates() {
    for lambda in [0.5, 1.0] {
        let slopes: Vec<f64> = (0..5)
            .map(|seed| slope(&sep_curve(seed, &format!("m3=0,lambda_inter={lambda}"))))
            .collect();
        let mean = slopes.iter().sum::<f64>() / slopes.len() as f64;
        assert!(
            mean <= 1e-3,
            "lambda {lambda}: mean per-epoch sep slope {mean} ({slopes:?})"
        );
    }
}

#[test]
fn small_regularizer_keeps_energy_below_unregularized_run() {
    for seed in 0..5 {
        let with = sep_curve(seed, "m3=0,lambda_inter=0.01");
        let without = sep_curve(seed, "m3=0,lambda_inter=0");
        assert!(
            with.last() < without.last(),
            "seed {seed}: {:?} vs {:?}",
            with.last(),
            without.last()
        );
    }
}

#[test]
fn identical_config_gives_identical_logs() {
    let cfg = RunConfig {
        n_speakers: 12,
        n_eval_speakers: 4,
        utts_per_speaker: 6,
        epochs: 3,
        classes_per_batch: 4,
        n_target: 10,
        n_nontarget: 10,
        seed: 3,
        ..RunConfig::default()
    };
    let data = generate_data(&cfg).unwrap();
    let a = train(&data.train, &cfg.training_config()).unwrap();
    let b = train(&data.train, &cfg.training_config()).unwrap();
    assert_eq!(a, b);
}
