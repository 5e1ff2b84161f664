// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 Edgetrust Authors

mod support;

use std::collections::HashSet;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use edgetrust::api::VerifierApi;
use edgetrust::boot::{BootStage, FailureReason};
use edgetrust::cluster::{ClusterApi, NodePhase};
use edgetrust::error::VerifierError;
use edgetrust::scenario::{golden_components, tampered_components};
use edgetrust::tenant::split_key;
use edgetrust::verifier::{post_webhook, MonitorMode, MonitorRequest, Schedule, VerifierConfig, WebhookPayload};
use support::Harness;

fn enrolled(h: &Harness, id: &str) -> edgetrust::agent::EdgeAgent {
    let agent = h.device(id);
    h.enroll(&agent, &golden_components(0));
    assert!(agent.wait_executed(Duration::from_secs(5)), "{:?}", agent.execution_error());
    agent
}

#[test]
fn share_is_released_once_and_forgotten() {
    let h = Harness::new();
    let agent = h.device("edge-01");
    agent.boot_and_register(&golden_components(0), h.registrar.as_ref()).unwrap();
    h.reconcile("edge-01").unwrap();

    let before = h.verifier.inspect("edge-01").unwrap();
    assert_eq!(before.mode, MonitorMode::Initial);
    assert!(before.share_held);
    assert!(agent.holds_payload());
    assert!(!agent.is_executed());

    assert!(h.verifier.attest_once("edge-01").unwrap().passed);
    let after = h.verifier.inspect("edge-01").unwrap();
    assert_eq!(after.mode, MonitorMode::Continuous);
    assert!(!after.share_held);
    assert!(agent.wait_executed(Duration::from_secs(5)));
    assert_eq!(h.phase("edge-01"), NodePhase::Attested);

    // Further polls never resend the share.
    for _ in 0..3 {
        assert!(h.verifier.attest_once("edge-01").unwrap().passed);
    }
    assert_eq!(agent.shares_received(), 1);
    let json = serde_json::to_value(h.verifier.inspect("edge-01").unwrap()).unwrap();
    assert!(json.get("share").is_none());
}

#[test]
fn duplicate_and_invalid_monitors_are_rejected() {
    let h = Harness::new();
    let agent = enrolled(&h, "edge-01");
    let req = MonitorRequest {
        device_id: "edge-01".into(),
        reference_state: support::golden_reference(),
        share: split_key().verifier_share,
        ak: agent.ak().public(),
        ek_cert: agent.identity().ek_cert().clone(),
        agent_address: agent.address().into(),
    };
    assert!(matches!(h.verifier.add_monitor(&req), Err(VerifierError::DuplicateMonitor(_))));

    let mut empty = req.clone();
    empty.device_id = "edge-02".into();
    empty.reference_state.pcr_selection.clear();
    assert!(matches!(h.verifier.add_monitor(&empty), Err(VerifierError::InvalidReference(_))));

    let mut missing = req;
    missing.device_id = "edge-03".into();
    missing.reference_state.allowed.remove(&BootStage::Keys);
    assert!(matches!(h.verifier.add_monitor(&missing), Err(VerifierError::InvalidReference(_))));
    assert!(h.verifier.inspect("edge-03").is_none());
}

#[test]
fn every_poll_uses_a_fresh_nonce() {
    let h = Harness::new();
    enrolled(&h, "edge-01");
    for _ in 0..1000 {
        assert!(h.verifier.attest_once("edge-01").unwrap().passed);
    }
    let nonces = h.verifier.issued_nonces("edge-01");
    assert_eq!(nonces.len(), 1001);
    assert_eq!(nonces.iter().collect::<HashSet<_>>().len(), 1001);
}

#[test]
fn tampered_kernel_revokes_with_stage_in_message() {
    let h = Harness::new();
    let agent = enrolled(&h, "edge-01");
    agent.boot(&tampered_components(0)).unwrap();

    let verdict = h.verifier.attest_once("edge-01").unwrap();
    assert!(!verdict.passed);
    assert_eq!(verdict.reason, Some(FailureReason::DigestNotAllowed));
    assert_eq!(verdict.failing_stage, Some(BootStage::Kernel));

    let node = h.cluster.edge_node("edge-01").unwrap();
    assert_eq!(node.status.phase, NodePhase::Unattested);
    assert_eq!(node.status.message, "digest-not-allowed:kernel");
    let snap = h.verifier.inspect("edge-01").unwrap();
    assert_eq!(snap.mode, MonitorMode::Revoked);
    assert!(!snap.share_held);
    assert!(matches!(h.verifier.attest_once("edge-01"), Err(VerifierError::Revoked(_))));
}

#[test]
fn bad_initial_boot_never_releases_the_share() {
    let h = Harness::new();
    let agent = h.device("edge-01");
    agent.boot_and_register(&tampered_components(0), h.registrar.as_ref()).unwrap();
    h.reconcile("edge-01").unwrap();
    assert!(!h.verifier.attest_once("edge-01").unwrap().passed);
    assert_eq!(agent.shares_received(), 0);
    assert!(!agent.is_executed());
    assert!(!h.verifier.inspect("edge-01").unwrap().share_held);
    assert_eq!(h.phase("edge-01"), NodePhase::Unattested);
}

#[test]
fn unreachable_agent_is_a_failure_after_the_allowance() {
    let h = Harness::with_verifier(VerifierConfig {
        schedule: Schedule::Manual,
        consecutive_failures_allowed: 1,
        ..VerifierConfig::default()
    });
    let agent = enrolled(&h, "edge-01");
    h.agents.set_reachable(agent.address(), false);

    let first = h.verifier.attest_once("edge-01").unwrap();
    assert_eq!(first.reason, Some(FailureReason::AgentUnreachable));
    assert_eq!(h.phase("edge-01"), NodePhase::Attested);
    assert_eq!(h.verifier.inspect("edge-01").unwrap().mode, MonitorMode::Continuous);

    h.verifier.attest_once("edge-01").unwrap();
    assert_eq!(h.phase("edge-01"), NodePhase::Unattested);
    assert_eq!(h.cluster.edge_node("edge-01").unwrap().status.message, "agent-unreachable");
}

#[test]
fn background_polling_detects_compromise_within_two_intervals() {
    let h = Harness::with_verifier(VerifierConfig {
        poll_interval: Duration::from_millis(100),
        ..VerifierConfig::default()
    });
    let agent = h.device("edge-01");
    agent.boot_and_register(&golden_components(0), h.registrar.as_ref()).unwrap();
    h.reconcile("edge-01").unwrap();
    assert!(agent.wait_executed(Duration::from_secs(5)));
    agent.boot(&tampered_components(0)).unwrap();
    let start = Instant::now();
    while h.phase("edge-01") != NodePhase::Unattested {
        assert!(start.elapsed() < Duration::from_millis(1000), "not revoked in time");
        thread::sleep(Duration::from_millis(5));
    }
}

fn webhook_server(status: u16) -> (String, mpsc::Receiver<serde_json::Value>, thread::JoinHandle<()>) {
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}/revoke", server.server_addr().to_ip().unwrap());
    let (tx, rx) = mpsc::channel();
    let handle = thread::spawn(move || {
        while let Ok(Some(mut req)) = server.recv_timeout(Duration::from_secs(3)) {
            let mut body = String::new();
            req.as_reader().read_to_string(&mut body).unwrap();
            let _ = tx.send(serde_json::from_str(&body).unwrap_or(serde_json::Value::Null));
            req.respond(tiny_http::Response::empty(status)).unwrap();
        }
    });
    (url, rx, handle)
}

#[test]
fn webhook_receives_revocation_without_native_patch() {
    let (url, rx, _server) = webhook_server(200);
    let h = Harness::with_verifier(VerifierConfig {
        schedule: Schedule::Manual,
        native: false,
        webhook_url: Some(url),
        ..VerifierConfig::default()
    });
    let agent = enrolled(&h, "edge-01");
    agent.boot(&tampered_components(0)).unwrap();
    h.verifier.attest_once("edge-01").unwrap();

    let body = rx.recv_timeout(Duration::from_secs(5)).unwrap();
    assert_eq!(body["device_id"], "edge-01");
    assert_eq!(body["reason"], "digest-not-allowed");
    assert_eq!(body["failing_stage"], "kernel");
    assert!(chrono::DateTime::parse_from_rfc3339(body["timestamp"].as_str().unwrap()).is_ok());
    assert_eq!(h.phase("edge-01"), NodePhase::Attested);
}

#[test]
fn webhook_is_retried_then_reported_failed() {
    let (url, rx, _server) = webhook_server(503);
    let payload = WebhookPayload {
        device_id: "edge-01".into(),
        reason: "pcr-mismatch".into(),
        failing_stage: None,
        timestamp: chrono::Utc::now(),
    };
    let err = post_webhook(&url, &payload, 3, Duration::from_millis(10)).unwrap_err();
    assert!(matches!(err, VerifierError::Webhook(_)));
    let seen: Vec<_> = rx.try_iter().collect();
    assert_eq!(seen.len(), 3);
    assert!(seen.iter().all(|b| b["reason"] == "pcr-mismatch"));
}

#[test]
fn notify_revocation_reports_each_channel() {
    let h = Harness::with_verifier(VerifierConfig {
        schedule: Schedule::Manual,
        webhook_url: Some("http://127.0.0.1:9/unreachable".into()),
        webhook_attempts: 2,
        webhook_backoff: Duration::from_millis(1),
        ..VerifierConfig::default()
    });
    enrolled(&h, "edge-01");
    let verdict = edgetrust::boot::AttestationVerdict::fail(FailureReason::PcrMismatch, None);
    let outcome = h.verifier.notify_revocation("edge-01", &verdict).unwrap();
    assert!(outcome.native_patched);
    assert_eq!(outcome.webhook_delivered, Some(false));
    assert_eq!(h.cluster.edge_node("edge-01").unwrap().status.message, "pcr-mismatch");
}
