// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 Edgetrust Authors

//! EdgeNode reconciliation.
//!
//! The controller reacts to status changes: Registered starts enrollment,
//! Unattested removes the device's rolebinding, Attested makes sure it is
//! present. Events whose generation is older than the stored resource are
//! skipped because a newer event for the same resource is already queued,
//! and each `(name, phase, generation)` is acted on at most once.

use std::collections::hash_map::DefaultHasher;
use std::collections::{HashMap, HashSet};
use std::hash::{Hash, Hasher};
use std::sync::mpsc::{channel, Sender};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::api::{RegistrarApi, TenantApi};
use crate::cluster::{ChangeType, ClusterApi, ClusterEventKind, EdgeNodeResource, NodePhase, Resource, ResourceKind};
use crate::crypto::{Certificate, KeyPair};
use crate::error::{ClusterError, ControllerError, RegistrarError, TenantError};
use crate::payload::{build_zip, CredentialsFile, EnrollConfig};
use crate::registrar::DeviceRecord;
use crate::task::BackgroundTask;
use crate::tenant::EnrollmentRequest;

#[derive(Debug, Clone)]
pub struct ControllerConfig {
    pub user_prefix: String,
    pub role_prefix: String,
    pub binding_prefix: String,
    pub retries: u32,
    pub backoff: Duration,
    /// Reconcile worker threads; events for one resource always go to the same worker.
    pub workers: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            user_prefix: "edge-user-".into(),
            role_prefix: "edge-role-".into(),
            binding_prefix: "edge-binding-".into(),
            retries: 3,
            backoff: Duration::from_secs(2),
            workers: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionKind {
    VerifyAndEnroll,
    Revoke,
    RecordAttested,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IdempotencyKey {
    pub name: String,
    pub phase: NodePhase,
    pub generation: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconcileAction {
    pub kind: ActionKind,
    pub name: String,
    pub key: IdempotencyKey,
}

#[derive(Debug, Clone)]
pub struct CredentialBundle {
    pub user_name: String,
    pub keypair: KeyPair,
    pub cert: Certificate,
    pub role_name: String,
    pub binding_name: String,
}

pub struct Controller {
    cluster: Arc<dyn ClusterApi>,
    registrar: Arc<dyn RegistrarApi>,
    tenant: Arc<dyn TenantApi>,
    config: ControllerConfig,
    claimed: Mutex<HashSet<IdempotencyKey>>,
    bundles: Mutex<HashMap<String, CredentialBundle>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// Exact byte comparison of the canonical certificate encodings.
pub fn verify_identity(node: &EdgeNodeResource, record: &DeviceRecord) -> Result<(), ControllerError> {
    if node.spec.ek_cert.to_bytes() == record.ek_cert.to_bytes() {
        Ok(())
    } else {
        Err(ControllerError::IdentityMismatch(node.name.clone()))
    }
}

pub fn build_payload(bundle: &CredentialBundle, node_name: &str) -> Result<Vec<u8>, ControllerError> {
    let creds = CredentialsFile {
        user_name: bundle.user_name.clone(),
        cert: bundle.cert.clone(),
        private_key: hex::encode(bundle.keypair.secret_bytes()),
        role_name: bundle.role_name.clone(),
    };
    build_zip(&creds, &EnrollConfig { node_name: node_name.to_owned() }).map_err(ControllerError::Payload)
}

impl Controller {
    pub fn new(
        cluster: Arc<dyn ClusterApi>,
        registrar: Arc<dyn RegistrarApi>,
        tenant: Arc<dyn TenantApi>,
        config: ControllerConfig,
    ) -> Self {
        Self {
            cluster,
            registrar,
            tenant,
            config,
            claimed: Mutex::new(HashSet::new()),
            bundles: Mutex::new(HashMap::new()),
        }
    }

    pub fn user_name(&self, node: &str) -> String {
        format!("{}{node}", self.config.user_prefix)
    }

    pub fn role_name(&self, node: &str) -> String {
        format!("{}{node}", self.config.role_prefix)
    }

    pub fn binding_name(&self, node: &str) -> String {
        format!("{}{node}", self.config.binding_prefix)
    }

    pub fn bundle(&self, node: &str) -> Option<CredentialBundle> {
        lock(&self.bundles).get(node).cloned()
    }

    /// Act on one observed EdgeNode state.
    pub fn reconcile(&self, observed: &EdgeNodeResource) -> Result<ReconcileAction, ControllerError> {
        let name = observed.name.clone();
        let key = IdempotencyKey { name: name.clone(), phase: observed.status.phase, generation: observed.generation };
        let skip = |key| ReconcileAction { kind: ActionKind::None, name: name.clone(), key };

        match self.cluster.edge_node(&name) {
            Ok(current) if current.generation != observed.generation => {
                debug!("controller: skipping stale {name} gen {} (now {})", observed.generation, current.generation);
                return Ok(skip(key));
            }
            Ok(_) => {}
            Err(ClusterError::NotFound { .. }) => return Ok(skip(key)),
            Err(e) => return Err(e.into()),
        }
        let kind = match observed.status.phase {
            NodePhase::Registered => ActionKind::VerifyAndEnroll,
            NodePhase::Unattested => ActionKind::Revoke,
            NodePhase::Attested => ActionKind::RecordAttested,
            NodePhase::Unregistered => ActionKind::None,
        };
        if kind == ActionKind::None || !lock(&self.claimed).insert(key.clone()) {
            return Ok(skip(key));
        }
        let result = match kind {
            ActionKind::VerifyAndEnroll => self.verify_and_enroll(observed),
            ActionKind::Revoke => self.revoke_permissions(&name).map(|_| ()),
            ActionKind::RecordAttested => self.record_attested(&name),
            ActionKind::None => Ok(()),
        };
        if let Err(e) = &result {
            warn!("controller: {kind:?} for {name} failed: {e}");
            let _ = self.cluster.add_condition(&name, &format!("{kind:?}: {e}"));
        }
        result.map(|()| ReconcileAction { kind, name, key })
    }

    fn retry<T, E: std::fmt::Display>(
        &self,
        what: &str,
        mut op: impl FnMut() -> Result<T, E>,
        transient: impl Fn(&E) -> bool,
    ) -> Result<T, E> {
        let attempts = self.config.retries.max(1);
        let mut attempt = 1;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if attempt < attempts && transient(&e) => {
                    debug!("controller: {what} attempt {attempt}/{attempts} failed: {e}");
                    attempt += 1;
                    std::thread::sleep(self.config.backoff);
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn verify_and_enroll(&self, node: &EdgeNodeResource) -> Result<(), ControllerError> {
        if self.cluster.get(ResourceKind::User, &self.user_name(&node.name)).is_ok() {
            debug!("controller: {} already has credentials", node.name);
            return Ok(());
        }
        let record = self
            .retry(
                "lookup",
                || self.registrar.lookup_device(&node.name),
                |e| matches!(e, RegistrarError::Transport(_) | RegistrarError::UnknownDevice(_)),
            )
            .map_err(|e| ControllerError::Lookup(e.to_string()))?;
        verify_identity(node, &record)?;
        let bundle = self.issue_credentials(node)?;
        let payload = build_payload(&bundle, &node.name)?;
        let req = EnrollmentRequest {
            device_id: node.name.clone(),
            payload,
            reference_state: node.spec.reference_state.clone(),
        };
        let receipt = self
            .retry(
                "enroll",
                || self.tenant.enroll(&req),
                |e| {
                    matches!(e, TenantError::AgentUnreachable(_) | TenantError::Transport(_) | TenantError::InFlight(_))
                },
            )
            .map_err(|e| ControllerError::Tenant(e.to_string()))?;
        info!("controller: {} handed to tenant ({})", node.name, receipt.enrollment_id);
        Ok(())
    }

    /// Mint a keypair, certificate, role and binding for `node`.
    pub fn issue_credentials(&self, node: &EdgeNodeResource) -> Result<CredentialBundle, ControllerError> {
        let name = &node.name;
        let user = self.user_name(name);
        let role = self.role_name(name);
        let binding = self.binding_name(name);

        if self.cluster.get(ResourceKind::User, &user).is_ok() {
            // Re-issue only restores a binding this controller revoked earlier.
            let held = self.bundle(name);
            let binding_absent = self.cluster.get(ResourceKind::RoleBinding, &binding).is_err();
            return match held {
                Some(b) if binding_absent => {
                    self.cluster.create_rolebinding(&b.binding_name, &b.role_name, &b.user_name)?;
                    Ok(b)
                }
                _ => Err(ControllerError::CredentialCollision(user)),
            };
        }
        if self.cluster.get(ResourceKind::Role, &role).is_ok() {
            return Err(ControllerError::CredentialCollision(role));
        }
        let keypair = KeyPair::generate();
        let cert = self.cluster.sign_csr(&keypair.public(), &user)?;
        self.cluster.create_role(&role, &node.spec.role_rules)?;
        self.cluster.create_rolebinding(&binding, &role, &user)?;
        self.cluster.record_event(ClusterEventKind::CredentialsIssued, name, &format!("user {user}, role {role}"));
        let bundle = CredentialBundle { user_name: user, keypair, cert, role_name: role, binding_name: binding };
        lock(&self.bundles).insert(name.clone(), bundle.clone());
        Ok(bundle)
    }

    /// Delete the device's rolebinding. Returns whether one was removed.
    pub fn revoke_permissions(&self, node: &str) -> Result<bool, ControllerError> {
        let binding = self.binding_name(node);
        let removed = self.cluster.delete_rolebinding(&binding)?;
        if removed {
            self.cluster.record_event(ClusterEventKind::PermissionsRevoked, node, &format!("deleted {binding}"));
            info!("controller: revoked permissions of {node}");
        }
        Ok(removed)
    }

    /// Make sure an attested device with issued credentials is bound to its role.
    pub fn record_attested(&self, node: &str) -> Result<(), ControllerError> {
        let user = self.user_name(node);
        let role = self.role_name(node);
        let binding = self.binding_name(node);
        let issued =
            self.cluster.get(ResourceKind::User, &user).is_ok() && self.cluster.get(ResourceKind::Role, &role).is_ok();
        if issued && self.cluster.get(ResourceKind::RoleBinding, &binding).is_err() {
            self.cluster.create_rolebinding(&binding, &role, &user)?;
            info!("controller: re-granted {node} after attestation");
        }
        Ok(())
    }

    /// Watch EdgeNodes and reconcile on a pool of workers. Events for the
    /// same resource are handled in order by one worker.
    pub fn spawn(self: &Arc<Self>) -> Vec<BackgroundTask> {
        let workers = self.config.workers.max(1);
        let mut tasks = Vec::with_capacity(workers + 1);
        let mut senders: Vec<Sender<EdgeNodeResource>> = Vec::with_capacity(workers);
        for i in 0..workers {
            let (tx, rx) = channel::<EdgeNodeResource>();
            senders.push(tx);
            let me = Arc::clone(self);
            tasks.push(BackgroundTask::spawn(&format!("controller-{i}"), move |stop| {
                while !stop.is_stopped() {
                    match rx.recv_timeout(Duration::from_millis(50)) {
                        Ok(node) => {
                            let _ = me.reconcile(&node);
                        }
                        Err(std::sync::mpsc::RecvTimeoutError::Timeout) => {}
                        Err(_) => break,
                    }
                }
            }));
        }
        let rx = self.cluster.watch(ResourceKind::EdgeNode);
        tasks.push(BackgroundTask::spawn("controller-watch", move |stop| {
            while !stop.is_stopped() {
                match rx.recv_timeout(Duration::from_millis(50)) {
                    Ok(ev) => {
                        if ev.change == ChangeType::Deleted {
                            continue;
                        }
                        if let Resource::EdgeNode(node) = ev.object {
                            let mut h = DefaultHasher::new();
                            node.name.hash(&mut h);
                            let slot = (h.finish() % senders.len() as u64) as usize;
                            let _ = senders[slot].send(node);
                        }
                    }
                    Err(std::sync::mpsc::RecvTimeoutError::Timeout) => {}
                    Err(_) => break,
                }
            }
        }));
        tasks
    }
}
