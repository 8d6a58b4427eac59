//! End-to-end properties of full runs and of the experiment writer.

use std::fs;
use std::path::Path;

use art_core::driver::{run_art, ArtConfig, RunResult};
use art_core::experiments::{run_experiment, ExperimentConfig, Mode};
use art_core::models::{ProblemSpec, TrueModel};
use proptest::prelude::*;

fn small(n: usize, k: usize, seed: u64) -> ArtConfig {
    ArtConfig {
        n,
        k_budget: k,
        m: 10,
        seed,
        ..ArtConfig::default()
    }
}

fn rare_run(config: &ArtConfig) -> RunResult {
    let truth = TrueModel::new(ProblemSpec::model_s_rare_event(90.0, 50.0).unwrap());
    let out = run_art(&truth, config).unwrap();
    assert_eq!(out.true_evals, truth.true_evals());
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn true_evals_are_budget_plus_initial(seed in 0u64..1000, k in 3usize..15, init in 2usize..7) {
        let config = ArtConfig { initial_snapshots: init, ..small(60, k, seed) };
        let out = rare_run(&config);
        prop_assert_eq!(out.true_evals, (k + init) as u64);
        prop_assert_eq!(out.iterations, k);
    }

    #[test]
    fn temperatures_never_decrease_within_an_iteration(seed in 0u64..1000) {
        let out = rare_run(&small(80, 10, seed));
        for path in &out.beta_paths {
            prop_assert!(path.windows(2).all(|w| w[1] > w[0]));
            prop_assert!(*path.last().unwrap() <= 50.0);
        }
        for row in &out.trace {
            prop_assert!(row.beta_bridge <= 50.0 && row.beta_k <= 50.0);
        }
    }
}

#[test]
fn same_seed_same_trace() {
    let a = rare_run(&small(100, 12, 5));
    let b = rare_run(&small(100, 12, 5));
    assert_eq!(a.trace_tsv(), b.trace_tsv());
    assert_eq!(
        a.estimators.log_is_estimate(),
        b.estimators.log_is_estimate()
    );
    let c = rare_run(&small(100, 12, 6));
    assert_ne!(a.trace_tsv(), c.trace_tsv());
}

#[test]
fn bayesian_run_reaches_the_posterior_temperature() {
    let spec = ExperimentConfig::parse("problem = bayesian")
        .unwrap()
        .problem_spec()
        .unwrap();
    let truth = TrueModel::new(spec);
    let config = ArtConfig {
        c1: 1e-2,
        m: 30,
        ..small(200, 40, 1)
    };
    let out = run_art(&truth, &config).unwrap();
    assert!(out.target_reached);
    let (_, rsmc) = out.estimators.normalized_estimates().unwrap();
    let w = rsmc.normalized_weights().unwrap();
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let name = p.strip_prefix(dir).unwrap().display().to_string();
                files.push((name, fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn experiment(out: &Path, mode: Mode) -> ExperimentConfig {
    let mut c = ExperimentConfig::parse(
        "beta_infinity = 2\nn = 60, 90\nk = 40\nj0 = 2\nm = 5\nr = 3\nseed = 17",
    )
    .unwrap();
    c.out = out.to_path_buf();
    c.mode = mode;
    c
}

#[test]
fn experiment_outputs_are_byte_identical_across_thread_counts() {
    let dirs: Vec<_> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for (threads, dir) in [1, 4].into_iter().zip(&dirs) {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        let summary = pool
            .install(|| run_experiment(&experiment(dir.path(), Mode::Art)))
            .unwrap();
        assert_eq!(summary.failed, 0);
    }
    let a = read_tree(dirs[0].path());
    let b = read_tree(dirs[1].path());
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    assert!(names.contains(&"metrics.csv"));
    assert!(names.contains(&"N60/trace_r2.tsv"));
    assert_eq!(a, b);
}

#[test]
fn metrics_csv_schema_and_ledger() {
    let dir = tempfile::tempdir().unwrap();
    let summary = run_experiment(&experiment(dir.path(), Mode::Art)).unwrap();
    let text = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = text.split('\n');
    assert_eq!(
        lines.next().unwrap(),
        "estimator,N,expected_cost,metric_name,metric_value,replicates,mean_estimate,std_error"
    );
    assert!(!text.contains('\r'));
    assert_eq!(text.lines().count(), 1 + 4);
    for row in &summary.replicates {
        assert_eq!(row.status, "ok");
        assert_eq!(row.true_evals, 40 + 5);
    }
    for row in &summary.metrics {
        assert!(row.expected_cost >= 40.0);
        assert_eq!(row.metric_name, "relative_sq_error");
    }
    let info = fs::read_to_string(dir.path().join("run_info.txt")).unwrap();
    assert!(info.contains("gain\t1.0000000000000000e-2"));
}

#[test]
fn baseline_mode_writes_no_traces() {
    let dir = tempfile::tempdir().unwrap();
    let summary = run_experiment(&experiment(dir.path(), Mode::Baseline)).unwrap();
    assert!(summary.metrics.iter().all(|r| r.estimator == "baseline"));
    let names: Vec<String> = read_tree(dir.path()).into_iter().map(|(n, _)| n).collect();
    assert!(names.iter().all(|n| !n.contains("trace")), "{names:?}");
}

#[test]
fn bayesian_reference_sample_is_cached_with_its_seed() {
    let dir = tempfile::tempdir().unwrap();
    let text = "problem = bayesian\nn = 40\nk = 30\nj0 = 2\nc1 = 1e-2\nm = 5\nr = 2\nreference_n = 200\nreference_runs = 2\nreference_seed = 99";
    let mut c = ExperimentConfig::parse(text).unwrap();
    c.out = dir.path().to_path_buf();
    let first = run_experiment(&c).unwrap();
    let cache = dir.path().join("reference_sample.txt");
    let cached = fs::read_to_string(&cache).unwrap();
    assert!(cached.starts_with("# reference seed=99 runs=2 n=200"));
    assert_eq!(cached.lines().count(), 1 + 400);
    let second = run_experiment(&c).unwrap();
    assert_eq!(first.failed, 0);
    assert_eq!(first.metrics, second.metrics);
    assert!(first.metrics.iter().all(|r| r.metric_name == "ks_distance"));
    assert!(first
        .metrics
        .iter()
        .all(|r| (0.0..=1.0).contains(&r.metric_value)));
}
