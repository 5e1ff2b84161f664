// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 Edgetrust Authors

mod support;

use std::sync::Arc;
use std::time::Duration;

use edgetrust::cluster::{ClusterApi, ClusterEventKind, NodePhase, NodeStatus, Resource, ResourceKind};
use edgetrust::controller::{build_payload, ActionKind, Controller, ControllerConfig};
use edgetrust::error::ControllerError;
use edgetrust::payload::{unpack_zip, zip_entries, CREDENTIALS_ENTRY, ENROLL_ENTRY};
use edgetrust::scenario::golden_components;
use support::{role_rules, Harness};

fn count(h: &Harness, kind: ClusterEventKind, subject: &str) -> usize {
    h.cluster.events().iter().filter(|e| e.kind == kind && e.subject == subject).count()
}

#[test]
fn role_carries_exactly_the_requested_rules() {
    let h = Harness::new();
    let agent = h.device("edge-01");
    h.enroll(&agent, &golden_components(0));
    let role = match h.cluster.get(ResourceKind::Role, &h.controller.role_name("edge-01")).unwrap() {
        Resource::Role(r) => r,
        other => panic!("expected a role, got {other:?}"),
    };
    assert_eq!(role.rules, role_rules());
    let user = h.controller.user_name("edge-01");
    assert!(h.cluster.check_access(&user, "create", "node").is_allowed());
    assert!(h.cluster.check_access(&user, "get", "pod").is_allowed());
    assert!(!h.cluster.check_access(&user, "delete", "node").is_allowed());
    assert!(!h.cluster.check_access(&user, "list", "configmap").is_allowed());
    assert_eq!(count(&h, ClusterEventKind::CredentialsIssued, "edge-01"), 1);
}

#[test]
fn redelivered_registration_is_a_no_op() {
    let h = Harness::new();
    let agent = h.device("edge-01");
    agent.boot_and_register(&golden_components(0), h.registrar.as_ref()).unwrap();
    let node = h.cluster.edge_node("edge-01").unwrap();
    assert_eq!(h.controller.reconcile(&node).unwrap().kind, ActionKind::VerifyAndEnroll);
    assert_eq!(h.controller.reconcile(&node).unwrap().kind, ActionKind::None);

    // A restarted controller sees the same event with existing credentials.
    let fresh = Controller::new(
        h.cluster.clone(),
        h.registrar.clone(),
        h.tenant.clone(),
        ControllerConfig { backoff: Duration::from_millis(1), ..ControllerConfig::default() },
    );
    fresh.reconcile(&node).unwrap();
    assert_eq!(count(&h, ClusterEventKind::CredentialsIssued, "edge-01"), 1);
    assert_eq!(count(&h, ClusterEventKind::PayloadDelivered, "edge-01"), 1);
    assert_eq!(h.cluster.dump().users.len(), 1);
}

#[test]
fn stale_generations_are_skipped() {
    let h = Harness::new();
    let agent = h.device("edge-01");
    agent.boot_and_register(&golden_components(0), h.registrar.as_ref()).unwrap();
    let stale = h.cluster.edge_node("edge-01").unwrap();
    h.cluster.patch_status("edge-01", NodeStatus::new(NodePhase::Unattested, "test")).unwrap();
    assert_eq!(h.controller.reconcile(&stale).unwrap().kind, ActionKind::None);
    assert!(h.cluster.get(ResourceKind::User, &h.controller.user_name("edge-01")).is_err());
}

#[test]
fn revocation_is_idempotent_and_regrant_follows_attestation() {
    let h = Harness::new();
    let agent = h.device("edge-01");
    h.enroll(&agent, &golden_components(0));
    assert!(h.user_allowed("edge-01").iter().all(|a| *a));

    h.cluster.patch_status("edge-01", NodeStatus::new(NodePhase::Unattested, "pcr-mismatch")).unwrap();
    h.reconcile("edge-01").unwrap();
    assert!(!h.controller.revoke_permissions("edge-01").unwrap());
    assert_eq!(count(&h, ClusterEventKind::PermissionsRevoked, "edge-01"), 1);
    assert!(h.user_allowed("edge-01").iter().all(|a| !*a));

    h.cluster.patch_status("edge-01", NodeStatus::new(NodePhase::Attested, "re-attested")).unwrap();
    h.reconcile("edge-01").unwrap();
    assert!(h.user_allowed("edge-01").iter().all(|a| *a));
    assert_eq!(count(&h, ClusterEventKind::CredentialsIssued, "edge-01"), 1);
}

#[test]
fn revoking_a_never_enrolled_node_is_harmless() {
    let h = Harness::new();
    let agent = h.device("edge-01");
    agent.boot_and_register(&golden_components(0), h.registrar.as_ref()).unwrap();
    h.cluster.patch_status("edge-01", NodeStatus::new(NodePhase::Unattested, "pcr-mismatch")).unwrap();
    let action = h.reconcile("edge-01").unwrap();
    assert_eq!(action.kind, ActionKind::Revoke);
    assert_eq!(count(&h, ClusterEventKind::PermissionsRevoked, "edge-01"), 0);
}

#[test]
fn pre_existing_role_is_a_collision() {
    let h = Harness::new();
    let agent = h.device("edge-01");
    h.cluster.create_role(&h.controller.role_name("edge-01"), &role_rules()).unwrap();
    agent.boot_and_register(&golden_components(0), h.registrar.as_ref()).unwrap();
    assert!(matches!(h.reconcile("edge-01"), Err(ControllerError::CredentialCollision(_))));
    assert!(!agent.holds_payload());
    let node = h.cluster.edge_node("edge-01").unwrap();
    assert!(node.conditions.iter().any(|c| c.contains("already exist")), "{:?}", node.conditions);
}

#[test]
fn payload_zip_is_deterministic_and_complete() {
    let h = Harness::new();
    let agent = h.device("edge-01");
    h.enroll(&agent, &golden_components(0));
    let bundle = h.controller.bundle("edge-01").unwrap();
    let a = build_payload(&bundle, "edge-01").unwrap();
    let b = build_payload(&bundle, "edge-01").unwrap();
    assert_eq!(a, b);
    assert_eq!(zip_entries(&a).unwrap(), vec![CREDENTIALS_ENTRY.to_owned(), ENROLL_ENTRY.to_owned()]);
    let (creds, enroll) = unpack_zip(&a).unwrap();
    assert_eq!(creds.user_name, bundle.user_name);
    assert_eq!(creds.role_name, bundle.role_name);
    assert_eq!(enroll.node_name, "edge-01");
}

#[test]
fn watch_driven_controller_enrolls_and_revokes() {
    let h = Harness::with_verifier(edgetrust::verifier::VerifierConfig {
        poll_interval: Duration::from_millis(50),
        ..Default::default()
    });
    let _tasks = Arc::clone(&h.controller).spawn();
    let agent = h.device("edge-01");
    agent.boot_and_register(&golden_components(0), h.registrar.as_ref()).unwrap();
    assert!(agent.wait_executed(Duration::from_secs(5)), "{:?}", agent.execution_error());
    let deadline = std::time::Instant::now() + Duration::from_secs(5);
    while agent.worker().is_none() || h.cluster.edge_node("edge-01").unwrap().status.phase != NodePhase::Attested {
        assert!(std::time::Instant::now() < deadline);
        std::thread::sleep(Duration::from_millis(5));
    }
    agent.boot(&edgetrust::scenario::tampered_components(0)).unwrap();
    while count(&h, ClusterEventKind::PermissionsRevoked, "edge-01") == 0 {
        assert!(std::time::Instant::now() < deadline, "permissions never revoked");
        std::thread::sleep(Duration::from_millis(5));
    }
    assert!(h.user_allowed("edge-01").iter().all(|a| !*a));
}
