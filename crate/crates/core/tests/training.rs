//! End-to-end properties of the training loop on a reduced benchmark.

use vcdet::harness::{train, ExperimentConfig, PcMode, RunResult, Strategy};
use vcdet::synthbench::{gen_dataset, BenchConfig, Dataset};

fn small() -> (ExperimentConfig, Dataset) {
    let cfg = ExperimentConfig {
        label_ratio: 0.05,
        iterations: 600,
        warmup_iters: 200,
        eval_interval: 200,
        score_thr: 0.4,
        benchmark: BenchConfig { num_scenes: 200, num_test_scenes: 60, ..BenchConfig::default() },
        ..ExperimentConfig::default()
    };
    let data = gen_dataset(&cfg.benchmark).unwrap();
    (cfg, data)
}

fn same_model(a: &RunResult, b: &RunResult) -> bool {
    a.trajectory == b.trajectory && a.teacher == b.teacher && a.student == b.student
}

#[test]
fn zero_lambda_equals_supervised_only() {
    let (cfg, data) = small();
    let supervised = train(&ExperimentConfig { unlabelled_per_step: 0, ..cfg.clone() }, &data).unwrap();
    for strategy in Strategy::ALL {
        let run = train(&ExperimentConfig { lambda_u: 0.0, strategy, ..cfg.clone() }, &data).unwrap();
        assert!(same_model(&run, &supervised), "{strategy:?}");
        assert_eq!(run.counters.unlabelled_visits, 0);
    }
}

#[test]
fn same_seed_gives_identical_record() {
    let (cfg, data) = small();
    let a = serde_json::to_string(&train(&cfg, &data).unwrap()).unwrap();
    let b = serde_json::to_string(&train(&cfg, &data).unwrap()).unwrap();
    assert_eq!(a, b);
    let other = serde_json::to_string(&train(&ExperimentConfig { seed: 1, ..cfg }, &data).unwrap()).unwrap();
    assert_ne!(a, other);
}

#[test]
fn unlabelled_scenes_untouched_during_warmup() {
    let (cfg, data) = small();
    let run = train(&cfg, &data).unwrap();
    let c = &run.counters;
    assert_eq!(c.unlabelled_visits_in_warmup, 0);
    let after = (cfg.iterations - cfg.warmup_iters) * cfg.unlabelled_per_step;
    assert_eq!(c.unlabelled_visits as usize, after);
    assert_eq!(c.labelled_visits as usize, cfg.iterations);
    assert_eq!(run.trajectory.len(), cfg.iterations / cfg.eval_interval);
}

#[test]
fn strategy_counters_track_confusing_samples() {
    let (cfg, data) = small();
    let run = |strategy| train(&ExperimentConfig { strategy, ..cfg.clone() }, &data).unwrap();

    let discard = run(Strategy::Discard);
    assert!(discard.counters.confusing_samples > 0);
    assert_eq!(discard.counters.discarded_samples, discard.counters.confusing_samples);
    assert_eq!(discard.counters.keep_terms, 0);

    let keep = run(Strategy::Keep);
    assert_eq!(keep.counters.keep_terms, 2 * keep.counters.confusing_samples);
    assert!(keep.counters.keep_terms > 0);

    let vc = run(Strategy::Vc);
    assert_eq!(vc.counters.vc_samples, vc.counters.confusing_samples);
    assert_eq!(vc.counters.discarded_samples + vc.counters.keep_terms, 0);

    let baseline = run(Strategy::Baseline);
    assert_eq!(baseline.counters.discarded_samples + baseline.counters.keep_terms + baseline.counters.vc_samples, 0);
}

#[test]
fn cross_mode_runs_and_reports() {
    let (cfg, data) = small();
    let run = train(&ExperimentConfig { pc_mode: PcMode::Cross, ..cfg.clone() }, &data).unwrap();
    assert!((0.0..=100.0).contains(&run.final_ap));
    assert!(run.counters.confusing_samples > 0);
    assert_eq!(run.trajectory.len(), cfg.iterations / cfg.eval_interval);
}
