// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 Edgetrust Authors

//! Initial and continuous attestation.
//!
//! Each monitored device gets its own entry and, with the background
//! schedule, its own polling thread. The initial attestation gates the
//! release of the verifier's key share: on a pass the EdgeNode is patched
//! Attested and the share is sent to the agent, then erased. Any failed
//! verdict, in any mode, goes down the revocation path once and stops
//! polling.

use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use chrono::{DateTime, Utc};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::api::{AgentConnector, VerifierApi};
use crate::boot::{check_reference, AttestationVerdict, BootStage, FailureReason, ReferenceState};
use crate::cluster::{ClusterApi, NodePhase, NodeStatus};
use crate::crypto::{Certificate, Nonce};
use crate::error::VerifierError;
use crate::task::BackgroundTask;
use crate::tenant::KeyShare;
use crate::tpm::AkPublic;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// One polling thread per device, started by `add_monitor`.
    Background,
    /// Nothing runs until the caller invokes `attest_once`.
    Manual,
}

#[derive(Debug, Clone)]
pub struct VerifierConfig {
    pub poll_interval: Duration,
    pub consecutive_failures_allowed: u32,
    /// Patch the EdgeNode to Unattested on failure.
    pub native: bool,
    pub webhook_url: Option<String>,
    pub webhook_attempts: u32,
    pub webhook_backoff: Duration,
    pub schedule: Schedule,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self {
            poll_interval: Duration::from_secs(2),
            consecutive_failures_allowed: 0,
            native: true,
            webhook_url: None,
            webhook_attempts: 3,
            webhook_backoff: Duration::from_millis(200),
            schedule: Schedule::Background,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorRequest {
    pub device_id: String,
    pub reference_state: ReferenceState,
    pub share: KeyShare,
    pub ak: AkPublic,
    pub ek_cert: Certificate,
    pub agent_address: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitorHandle {
    pub device_id: String,
    pub monitor_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MonitorMode {
    Initial,
    Continuous,
    Revoked,
}

/// Read-only view of a monitor entry. Never includes the share itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitorSnapshot {
    pub device_id: String,
    pub mode: MonitorMode,
    pub share_held: bool,
    pub last_verdict: Option<AttestationVerdict>,
    pub polls: u64,
    pub consecutive_failures: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WebhookPayload {
    pub device_id: String,
    pub reason: String,
    pub failing_stage: Option<BootStage>,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RevocationOutcome {
    pub native_patched: bool,
    /// `None` when no webhook is configured.
    pub webhook_delivered: Option<bool>,
}

struct Entry {
    request: MonitorRequest,
    share: Option<KeyShare>,
    mode: MonitorMode,
    last_verdict: Option<AttestationVerdict>,
    polls: u64,
    consecutive_failures: u32,
    nonces: HashSet<Nonce>,
}

impl Entry {
    fn snapshot(&self) -> MonitorSnapshot {
        MonitorSnapshot {
            device_id: self.request.device_id.clone(),
            mode: self.mode,
            share_held: self.share.is_some(),
            last_verdict: self.last_verdict,
            polls: self.polls,
            consecutive_failures: self.consecutive_failures,
        }
    }

    fn fresh_nonce(&mut self) -> Nonce {
        loop {
            let n = Nonce::random();
            if self.nonces.insert(n) {
                return n;
            }
        }
    }
}

struct Inner {
    cluster: Arc<dyn ClusterApi>,
    agents: Arc<dyn AgentConnector>,
    config: VerifierConfig,
    entries: Mutex<HashMap<String, Arc<Mutex<Entry>>>>,
}

pub struct Verifier {
    inner: Arc<Inner>,
    tasks: Mutex<HashMap<String, BackgroundTask>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl Verifier {
    pub fn new(cluster: Arc<dyn ClusterApi>, agents: Arc<dyn AgentConnector>, config: VerifierConfig) -> Self {
        Self {
            inner: Arc::new(Inner { cluster, agents, config, entries: Mutex::new(HashMap::new()) }),
            tasks: Mutex::new(HashMap::new()),
        }
    }

    pub fn config(&self) -> &VerifierConfig {
        &self.inner.config
    }

    pub fn inspect(&self, device_id: &str) -> Option<MonitorSnapshot> {
        let entry = lock(&self.inner.entries).get(device_id).cloned()?;
        let snap = lock(&entry).snapshot();
        Some(snap)
    }

    /// Every nonce issued to `device_id` so far.
    pub fn issued_nonces(&self, device_id: &str) -> Vec<Nonce> {
        lock(&self.inner.entries).get(device_id).map(|e| lock(e).nonces.iter().copied().collect()).unwrap_or_default()
    }

    pub fn attest_once(&self, device_id: &str) -> Result<AttestationVerdict, VerifierError> {
        self.inner.attest_once(device_id)
    }

    /// Run the configured notification channels for a failed verdict and
    /// mark the monitor revoked.
    pub fn notify_revocation(
        &self,
        device_id: &str,
        verdict: &AttestationVerdict,
    ) -> Result<RevocationOutcome, VerifierError> {
        let entry = self.inner.entry(device_id)?;
        let mut e = lock(&entry);
        Ok(self.inner.revoke(&mut e, verdict))
    }

    /// Stop all polling threads.
    pub fn shutdown(&self) {
        let tasks: Vec<BackgroundTask> = lock(&self.tasks).drain().map(|(_, t)| t).collect();
        drop(tasks);
    }
}

impl Drop for Verifier {
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl Inner {
    fn entry(&self, device_id: &str) -> Result<Arc<Mutex<Entry>>, VerifierError> {
        lock(&self.entries).get(device_id).cloned().ok_or_else(|| VerifierError::UnknownMonitor(device_id.to_owned()))
    }

    fn attest_once(&self, device_id: &str) -> Result<AttestationVerdict, VerifierError> {
        let entry = self.entry(device_id)?;
        let mut e = lock(&entry);
        if e.mode == MonitorMode::Revoked {
            return Err(VerifierError::Revoked(device_id.to_owned()));
        }
        e.polls += 1;
        let nonce = e.fresh_nonce();
        let req = e.request.clone();
        let response = self
            .agents
            .connect(&req.agent_address)
            .and_then(|agent| agent.quote(&nonce, &req.reference_state.pcr_selection));
        let verdict = match response {
            Ok(r) => {
                check_reference(&r.event_log, &r.quote, &req.reference_state, &req.ak, &req.ek_cert.public_key, &nonce)
            }
            Err(err) => {
                e.consecutive_failures += 1;
                warn!(
                    "verifier: {device_id} unreachable ({}/{}): {err}",
                    e.consecutive_failures,
                    self.config.consecutive_failures_allowed + 1
                );
                let v = AttestationVerdict::fail(FailureReason::AgentUnreachable, None);
                e.last_verdict = Some(v);
                if e.consecutive_failures <= self.config.consecutive_failures_allowed {
                    return Ok(v);
                }
                self.revoke(&mut e, &v);
                return Ok(v);
            }
        };
        e.last_verdict = Some(verdict);
        if !verdict.passed {
            self.revoke(&mut e, &verdict);
            return Ok(verdict);
        }
        e.consecutive_failures = 0;
        if e.mode == MonitorMode::Initial {
            self.release_share(&mut e)?;
        }
        Ok(verdict)
    }

    /// Patch Attested, then hand the share to the agent and forget it.
    fn release_share(&self, e: &mut Entry) -> Result<(), VerifierError> {
        let id = e.request.device_id.clone();
        let phase = self.cluster.edge_node(&id)?.status.phase;
        if phase != NodePhase::Attested {
            self.cluster.patch_status(&id, NodeStatus::new(NodePhase::Attested, "initial attestation passed"))?;
        }
        let Some(share) = e.share.take() else {
            e.mode = MonitorMode::Continuous;
            return Ok(());
        };
        let sent = self.agents.connect(&e.request.agent_address).and_then(|agent| agent.deliver_share(&share));
        match sent {
            Ok(_) => {
                e.mode = MonitorMode::Continuous;
                info!("verifier: {id} attested, share released");
                Ok(())
            }
            Err(err) => {
                warn!("verifier: share delivery to {id} failed: {err}");
                let v = AttestationVerdict::fail(FailureReason::AgentUnreachable, None);
                e.last_verdict = Some(v);
                self.revoke(e, &v);
                Ok(())
            }
        }
    }

    fn revoke(&self, e: &mut Entry, verdict: &AttestationVerdict) -> RevocationOutcome {
        let id = e.request.device_id.clone();
        e.share = None;
        e.mode = MonitorMode::Revoked;
        let reason = verdict.summary();
        warn!("verifier: {id} failed attestation: {reason}");

        let mut native_patched = false;
        if self.config.native {
            match self.cluster.patch_status(&id, NodeStatus::new(NodePhase::Unattested, reason.clone())) {
                Ok(_) => native_patched = true,
                Err(err) => warn!("verifier: could not patch {id} Unattested: {err}"),
            }
        }
        let webhook_delivered = self.config.webhook_url.as_deref().map(|url| {
            let payload = WebhookPayload {
                device_id: id.clone(),
                reason: verdict.reason.map(|r| r.to_string()).unwrap_or_default(),
                failing_stage: verdict.failing_stage,
                timestamp: Utc::now(),
            };
            match post_webhook(url, &payload, self.config.webhook_attempts, self.config.webhook_backoff) {
                Ok(()) => true,
                Err(err) => {
                    warn!("verifier: {err}");
                    false
                }
            }
        });
        RevocationOutcome { native_patched, webhook_delivered }
    }
}

/// POST `payload` as JSON, retrying up to `attempts` times.
pub fn post_webhook(
    url: &str,
    payload: &WebhookPayload,
    attempts: u32,
    backoff: Duration,
) -> Result<(), VerifierError> {
    let attempts = attempts.max(1);
    let mut last = String::new();
    for attempt in 1..=attempts {
        match ureq::post(url).timeout(Duration::from_secs(5)).send_json(payload) {
            Ok(_) => return Ok(()),
            Err(e) => {
                last = e.to_string();
                if attempt < attempts {
                    std::thread::sleep(backoff);
                }
            }
        }
    }
    Err(VerifierError::Webhook(format!("{url}: {last} after {attempts} attempts")))
}

impl VerifierApi for Verifier {
    fn add_monitor(&self, req: &MonitorRequest) -> Result<MonitorHandle, VerifierError> {
        req.reference_state.validate()?;
        let id = req.device_id.clone();
        {
            let mut entries = lock(&self.inner.entries);
            if let Some(existing) = entries.get(&id) {
                if lock(existing).mode != MonitorMode::Revoked {
                    return Err(VerifierError::DuplicateMonitor(id));
                }
            }
            entries.insert(
                id.clone(),
                Arc::new(Mutex::new(Entry {
                    request: req.clone(),
                    share: Some(req.share),
                    mode: MonitorMode::Initial,
                    last_verdict: None,
                    polls: 0,
                    consecutive_failures: 0,
                    nonces: HashSet::new(),
                })),
            );
        }
        if self.inner.config.schedule == Schedule::Background {
            let inner = Arc::clone(&self.inner);
            let device = id.clone();
            let interval = self.inner.config.poll_interval;
            let task = BackgroundTask::spawn(&format!("verifier-{id}"), move |stop| loop {
                match inner.attest_once(&device) {
                    Ok(_) => {}
                    Err(VerifierError::Revoked(_) | VerifierError::UnknownMonitor(_)) => break,
                    Err(e) => warn!("verifier: poll of {device} failed: {e}"),
                }
                let revoked = inner.entry(&device).map(|e| lock(&e).mode == MonitorMode::Revoked).unwrap_or(true);
                if revoked || stop.wait(interval) {
                    break;
                }
            });
            // Replacing a revoked monitor's task joins the old, finished thread.
            lock(&self.tasks).insert(id.clone(), task);
        }
        Ok(MonitorHandle { device_id: id, monitor_id: uuid::Uuid::new_v4().to_string() })
    }
}
