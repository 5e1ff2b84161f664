// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 Edgetrust Authors

use std::time::Duration;

use edgetrust::cluster::{ClusterEventKind, NodePhase};
use edgetrust::scenario::{
    emit_report, metric_stats, run_scenario, ReportFormat, ScenarioConfig, ScenarioKind, ScenarioReport, TransportMode,
};

fn config(scenario: ScenarioKind) -> ScenarioConfig {
    ScenarioConfig {
        scenario,
        devices: 2,
        poll_interval: Duration::from_millis(200),
        repetitions: 2,
        seed: 7,
        run_timeout: Duration::from_secs(20),
        ..ScenarioConfig::default()
    }
}

fn outcome_shape(r: &ScenarioReport) -> Vec<(String, NodePhase, bool, bool)> {
    r.runs
        .iter()
        .flat_map(|run| &run.devices)
        .map(|d| (d.device_id.clone(), d.final_phase, d.executed, d.worker_enrolled))
        .collect()
}

#[test]
fn happy_path_orders_the_timeline() {
    let report = run_scenario(&config(ScenarioKind::HappyPath)).unwrap();
    assert!(report.passed, "{:?}", report.runs.iter().map(|r| &r.failures).collect::<Vec<_>>());
    for run in &report.runs {
        for d in &run.devices {
            let at = |k: ClusterEventKind| {
                run.timeline.iter().find(|e| e.kind == k && e.subject == d.device_id).map(|e| e.timestamp).unwrap()
            };
            assert!(at(ClusterEventKind::Registered) <= at(ClusterEventKind::CredentialsIssued));
            assert!(at(ClusterEventKind::CredentialsIssued) <= at(ClusterEventKind::PayloadDelivered));
            assert!(at(ClusterEventKind::PayloadDelivered) <= at(ClusterEventKind::Attested));
            assert!(at(ClusterEventKind::Attested) <= at(ClusterEventKind::WorkerEnrolled));
            assert!(d.metrics.time_to_revoked_s.is_none());
            assert_eq!(d.shares_received, 1);
        }
    }
    assert!(!report.aggregate.contains_key("time_to_revoked_s"));
}

#[test]
fn bad_initial_boot_never_executes() {
    let report = run_scenario(&config(ScenarioKind::BadInitialBoot)).unwrap();
    assert!(report.passed, "{:?}", report.runs.iter().map(|r| &r.failures).collect::<Vec<_>>());
    for d in report.runs.iter().flat_map(|r| &r.devices) {
        assert_eq!(d.final_phase, NodePhase::Unattested);
        assert_eq!(d.status_message, "digest-not-allowed:kernel");
        assert!(!d.executed && !d.worker_enrolled);
        assert_eq!(d.shares_received, 0);
    }
}

#[test]
fn compromise_is_revoked_within_two_intervals() {
    let cfg = config(ScenarioKind::CompromiseAfterAttest);
    let report = run_scenario(&cfg).unwrap();
    assert!(report.passed, "{:?}", report.runs.iter().map(|r| &r.failures).collect::<Vec<_>>());
    for d in report.runs.iter().flat_map(|r| &r.devices) {
        assert!(d.metrics.time_to_revoked_s.unwrap() <= 2.0 * cfg.poll_interval.as_secs_f64());
        assert!(d.metrics.revocation_lag_s.unwrap() <= 1.0);
    }
}

#[test]
fn same_seed_same_outcomes() {
    let mut cfg = config(ScenarioKind::BadInitialBoot);
    cfg.transport = TransportMode::InProcess;
    let a = run_scenario(&cfg).unwrap();
    let b = run_scenario(&cfg).unwrap();
    assert_eq!(outcome_shape(&a), outcome_shape(&b));
    assert_eq!(a.config, b.config);
}

#[test]
fn report_round_trips_and_aggregates_agree() {
    let mut cfg = config(ScenarioKind::HappyPath);
    cfg.repetitions = 3;
    cfg.concurrency = 3;
    let report = run_scenario(&cfg).unwrap();
    let json = emit_report(&report, ReportFormat::Json);
    let back: ScenarioReport = serde_json::from_slice(&json).unwrap();
    assert_eq!(back, report);

    let attested: Vec<f64> =
        report.runs.iter().flat_map(|r| &r.devices).filter_map(|d| d.metrics.time_to_attested_s).collect();
    let agg = report.aggregate["time_to_attested_s"];
    assert_eq!(agg.n, attested.len());
    let mean = attested.iter().sum::<f64>() / attested.len() as f64;
    let var = attested.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (attested.len() - 1) as f64;
    assert!((agg.mean - mean).abs() < 1e-9);
    assert!((agg.std - var.sqrt()).abs() < 1e-9);
    assert_eq!(report.runs.iter().map(|r| r.run).collect::<Vec<_>>(), vec![0, 1, 2]);

    let table = String::from_utf8(emit_report(&report, ReportFormat::Table)).unwrap();
    assert!(table.contains("time_to_attested_s"));
}

#[test]
fn sample_std_conventions() {
    assert_eq!(metric_stats(&[]).n, 0);
    assert_eq!(metric_stats(&[3.0]).std, 0.0);
    let s = metric_stats(&[1.0, 2.0, 3.0, 4.0]);
    assert!((s.mean - 2.5).abs() < 1e-12);
    assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = config(ScenarioKind::HappyPath);
    cfg.devices = 0;
    assert!(run_scenario(&cfg).is_err());
    let mut cfg = config(ScenarioKind::HappyPath);
    cfg.role_rules = vec![edgetrust::cluster::PolicyRule::new("get", "pod")];
    assert!(run_scenario(&cfg).is_err());
}
