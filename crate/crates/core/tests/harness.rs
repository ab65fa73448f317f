use std::collections::BTreeMap;
use std::fs;

use otafl::harness::config::{ExperimentConfig, Scheme};
use otafl::harness::report::write_report;
use otafl::harness::run::{design_prescalers, read_metrics, run_cell, run_experiment, Setup};

fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_toml(
        r#"
n_devices = 5
t_rounds = 8
seeds = [0, 1]
eta = 0.1
[model]
hidden = [8]
[dataset.source]
kind = "synthetic"
per_class = 30
dim = 6
[sca]
stationarity_dirs = 50
"#,
    )
    .unwrap()
}

#[test]
fn reruns_are_byte_identical() {
    let cfg = tiny();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&cfg, a.path()).unwrap();
    run_experiment(&cfg, b.path()).unwrap();
    for name in ["metrics.jsonl", "manifest.json", "summary/rounds_to_target.csv"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
    let records = read_metrics(&a.path().join("metrics.jsonl")).unwrap();
    assert_eq!(records.len(), 7 * 2 * 9);
    // append-only: a second run into the same directory refuses to overwrite
    assert!(run_experiment(&cfg, a.path()).is_err());
}

#[test]
fn channel_draws_shared_across_schemes() {
    let cfg = tiny();
    let setup = Setup::build(&cfg).unwrap();
    let mut by_cell: BTreeMap<(u64, usize), Vec<String>> = BTreeMap::new();
    for &s in &Scheme::ALL {
        for seed in [0, 1] {
            for r in run_cell(&setup, s, seed).unwrap() {
                if let Some(c) = r.channel_checksum {
                    by_cell.entry((seed, r.round)).or_default().push(c);
                }
            }
        }
    }
    assert_eq!(by_cell.len(), 2 * 8);
    for v in by_cell.values() {
        assert_eq!(v.len(), 7);
        assert!(v.iter().all(|c| c == &v[0]));
    }
    assert_ne!(by_cell[&(0, 0)][0], by_cell[&(1, 0)][0]);
}

#[test]
fn ideal_fedavg_loss_trends_down() {
    let mut cfg = tiny();
    cfg.t_rounds = 30;
    cfg.eta = 0.05;
    let setup = Setup::build(&cfg).unwrap();
    let mut mean = vec![0.0; 31];
    for seed in [0, 1] {
        for r in run_cell(&setup, Scheme::IdealFedavg, seed).unwrap() {
            mean[r.round] += r.global_loss / 2.0;
        }
    }
    for w in mean.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "{mean:?}");
    }
}

#[test]
fn unknown_scheme_rejected_before_running() {
    let err = ExperimentConfig::from_toml("schemes = [\"sca\", \"nope\"]").unwrap_err();
    assert!(err.is_config());
}

#[test]
fn homogeneous_override_gives_uniform_design() {
    let mut cfg = tiny();
    cfg.lambda_override = Some(vec![3e-11; 5]);
    let f = design_prescalers(&cfg, None).unwrap();
    for p in &f.design.p {
        assert!((p - 0.2).abs() < 1e-5, "{:?}", f.design.p);
    }
    for w in f.objective_trace.windows(2) {
        assert!(w[1] <= w[0] + 1e-8 * w[0].abs().max(1.0));
    }
    let again = design_prescalers(&cfg, None).unwrap();
    assert_eq!(serde_json::to_string(&f).unwrap(), serde_json::to_string(&again).unwrap());
}

#[test]
fn report_rejects_mixed_configurations() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.schemes = vec![Scheme::IdealFedavg];
    cfg.t_rounds = 2;
    run_experiment(&cfg, a.path()).unwrap();
    cfg.eta = 0.2;
    run_experiment(&cfg, b.path()).unwrap();
    let out = tempfile::tempdir().unwrap();
    let files = vec![a.path().join("metrics.jsonl"), b.path().join("metrics.jsonl")];
    assert!(write_report(&files, 0.5, out.path()).is_err());
    let one = write_report(&files[..1], 0.5, out.path()).unwrap();
    assert_eq!(one.table.len(), 1);
    assert!(out.path().join("ideal_fedavg_test_accuracy.csv").exists());
}
