use odlqr_core::harness::{
    export, load_config, monte_carlo, run_trial, topology_comparison, ExperimentConfig, MatrixSpec, NetworkSpec, RunOptions,
    AVG_REGRET,
};

fn small(agents: usize, horizon: usize, trials: usize) -> ExperimentConfig {
    ExperimentConfig {
        agents,
        horizon,
        trials,
        seed: 17,
        network: NetworkSpec::Cycle { neighbors_per_side: 1, self_weight: 0.5 },
        ..Default::default()
    }
}

#[test]
fn identical_topologies_give_identical_aggregates() {
    let cfg = small(4, 1_500, 2);
    let r = topology_comparison(
        &cfg,
        &[("x".into(), cfg.network.clone()), ("y".into(), cfg.network.clone())],
        RunOptions::default(),
    )
    .unwrap();
    assert_eq!(r[0].1.aggregate, r[1].1.aggregate);
}

#[test]
fn complete_graph_is_label_symmetric() {
    let cfg = ExperimentConfig { network: NetworkSpec::Complete {}, ..small(4, 1_500, 2) };
    let m = 4;
    let perm = [2usize, 0, 3, 1];
    let base = odlqr_core::MixingMatrix::build_complete(m).unwrap();
    let permuted = base.permuted(&perm).unwrap();
    let rows = (0..m).map(|i| (0..m).map(|j| permuted.matrix()[(i, j)]).collect()).collect();
    let custom = ExperimentConfig { network: NetworkSpec::Custom { matrix: rows }, ..cfg.clone() };
    let a = monte_carlo(&cfg, RunOptions::default()).unwrap();
    let b = monte_carlo(&custom, RunOptions::default()).unwrap();
    assert_eq!(a.aggregate, b.aggregate);
}

#[test]
fn topology_comparison_needs_two_networks() {
    let cfg = small(4, 1_000, 1);
    assert!(topology_comparison(&cfg, &[("a".into(), cfg.network.clone())], RunOptions::default()).is_err());
}

#[test]
fn known_single_agent_reduces_to_centralized_online_lqr() {
    let cfg = ExperimentConfig {
        known_system: true,
        network: NetworkSpec::Complete {},
        series_stride: Some(500),
        ..small(1, 6_000, 1)
    };
    let r = run_trial(&cfg, 0, 5, RunOptions::default()).unwrap();
    assert_eq!((r.t0, r.t1, r.t_s), (0, 0, 2));
    assert_eq!(r.estimation_error, 0.0);
    let s = &r.series;
    let avg: Vec<f64> = (0..s.rounds.len()).map(|k| s.regret(0, k) / s.rounds[k] as f64).collect();
    let q = avg.len() / 4;
    assert!(avg[q] > avg[2 * q] && avg[2 * q] > avg[avg.len() - 1], "{avg:?}");
}

#[test]
fn excluding_exploration_charges_only_online_rounds() {
    let cfg = ExperimentConfig { t0: Some(200), t1: Some(20), charge_exploration: false, ..small(3, 1_000, 1) };
    let r = run_trial(&cfg, 0, 8, RunOptions::default()).unwrap();
    for (k, &round) in r.series.rounds.iter().enumerate() {
        if round < r.t_s {
            assert_eq!(r.series.cum_alg[0][k], 0.0);
            assert_eq!(r.series.cum_bench[0][k], 0.0);
        }
    }
    assert!(r.series.cum_alg[0].last().unwrap() > &0.0);
}

#[test]
fn export_writes_the_three_artifacts() {
    let cfg = ExperimentConfig { t0: Some(100), t1: Some(10), ..small(3, 800, 1) };
    let r = monte_carlo(&cfg, RunOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export(&r, dir.path()).unwrap();
    let series = std::fs::read_to_string(dir.path().join("regret_series.csv")).unwrap();
    assert!(series.starts_with("trial,round,agent,cum_cost_alg,cum_cost_bench,regret,avg_regret\n"));
    assert_eq!(series.lines().count(), 1 + 3 * r.trials[0].series.rounds.len());
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(lines.next(), Some("metric,mean,stderr,trials"));
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first[0], AVG_REGRET);
    assert_eq!(first[2], "", "a single trial has no standard error");
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run_meta.json")).unwrap()).unwrap();
    for key in ["t0", "t1", "t_s", "nu", "eta", "beta", "minimum_horizon", "trial_seeds"] {
        assert!(meta["derived"].get(key).is_some(), "missing {key}");
    }
    assert_eq!(load_config(&dir.path().join("run_meta.json")).unwrap(), cfg);
}

#[test]
fn debug_dumps_are_written_per_trial() {
    let cfg = ExperimentConfig { t0: Some(100), t1: Some(10), ..small(3, 400, 2) };
    let r = monte_carlo(&cfg, RunOptions { debug_dumps: true, threads: 1 }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export(&r, dir.path()).unwrap();
    for trial in 0..2 {
        let d = dir.path().join("debug").join(format!("trial_{trial}"));
        for f in ["cost_schedule.csv", "exploration.csv", "extra_errors.csv", "dykstra_iterations.csv", "controller_trace.csv"] {
            assert!(d.join(f).exists(), "missing {f}");
        }
        let errors = std::fs::read_to_string(d.join("extra_errors.csv")).unwrap();
        assert_eq!(errors.lines().count(), 1 + 3 * 11);
    }
}

#[test]
fn config_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"horizon": 100, "typo_key": true}"#).unwrap();
    let err = load_config(&path).unwrap_err().to_string();
    assert!(err.contains("typo_key"), "{err}");
    let bad_dense = ExperimentConfig { a: MatrixSpec::Dense { rows: vec![vec![0.1; 2]; 3] }, ..small(3, 800, 1) };
    assert!(monte_carlo(&bad_dense, RunOptions::default()).is_err());
}

#[test]
fn doubling_trials_shrinks_standard_error() {
    let base = ExperimentConfig { t0: Some(100), t1: Some(10), ..small(3, 600, 8) };
    let se = |seed: u64, trials: usize| {
        let r = monte_carlo(&ExperimentConfig { seed, trials, ..base.clone() }, RunOptions::default()).unwrap();
        r.aggregate.get(AVG_REGRET).unwrap().stderr.unwrap()
    };
    let ratios: Vec<f64> = (0..6).map(|seed| se(seed, 8) / se(seed, 16)).collect();
    let mean_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;
    assert!((mean_ratio / 2f64.sqrt() - 1.0).abs() <= 0.3, "ratio {mean_ratio}");
}
