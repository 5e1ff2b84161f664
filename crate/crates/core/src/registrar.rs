// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 Edgetrust Authors

//! First point of contact for devices: EK challenge, device records, and the
//! Unregistered -> Registered status patch on the matching EdgeNode.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::api::RegistrarApi;
use crate::cluster::{ChangeType, ClusterApi, NodePhase, NodeStatus, Resource, ResourceKind};
use crate::crypto::{Certificate, Nonce, TrustAnchor};
use crate::error::{ClusterError, RegistrarError};
use crate::task::BackgroundTask;
use crate::tpm::{verify_possession, AkPublic, PossessionProof};

#[derive(Debug, Clone)]
pub struct RegistrarConfig {
    pub challenge_ttl: Duration,
}

impl Default for RegistrarConfig {
    fn default() -> Self {
        Self { challenge_ttl: Duration::from_secs(30) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeginRegistration {
    pub device_id: String,
    pub ek_cert: Certificate,
    pub ak: AkPublic,
    pub agent_address: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceRecord {
    pub device_id: String,
    pub ek_cert: Certificate,
    pub ak: AkPublic,
    pub agent_address: String,
    pub registered_at: DateTime<Utc>,
}

struct Pending {
    nonce: Nonce,
    issued: Instant,
    request: BeginRegistration,
}

#[derive(Default)]
struct State {
    pending: HashMap<String, Pending>,
    records: HashMap<String, DeviceRecord>,
    /// Registered devices whose EdgeNode did not exist yet.
    held: BTreeSet<String>,
    /// Devices whose Registered patch has been issued.
    patched: HashSet<String>,
}

pub struct Registrar {
    manufacturer: TrustAnchor,
    cluster: Arc<dyn ClusterApi>,
    config: RegistrarConfig,
    state: Mutex<State>,
}

impl Registrar {
    pub fn new(manufacturer: TrustAnchor, cluster: Arc<dyn ClusterApi>, config: RegistrarConfig) -> Self {
        Self { manufacturer, cluster, config, state: Mutex::new(State::default()) }
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn is_held(&self, device_id: &str) -> bool {
        self.lock().held.contains(device_id)
    }

    /// Patch any held device whose EdgeNode now exists.
    pub fn resume_held(&self) {
        let held: Vec<String> = self.lock().held.iter().cloned().collect();
        for id in held {
            if let Err(e) = self.try_mark_registered(&id) {
                warn!("registrar: could not resume {id}: {e}");
            }
        }
    }

    /// Watch EdgeNode additions and release held registrations.
    pub fn spawn_watch(self: &Arc<Self>) -> BackgroundTask {
        let rx = self.cluster.watch(ResourceKind::EdgeNode);
        let me = Arc::clone(self);
        BackgroundTask::spawn("registrar-watch", move |stop| {
            while !stop.is_stopped() {
                match rx.recv_timeout(Duration::from_millis(50)) {
                    Ok(ev) if ev.change == ChangeType::Added => {
                        if me.is_held(ev.object.name()) {
                            let _ = me.try_mark_registered(ev.object.name());
                        }
                    }
                    Ok(_) => {}
                    Err(std::sync::mpsc::RecvTimeoutError::Timeout) => {}
                    Err(_) => break,
                }
            }
        })
    }

    /// Returns `Ok(true)` if the Registered patch was issued now.
    fn try_mark_registered(&self, device_id: &str) -> Result<bool, RegistrarError> {
        {
            let mut st = self.lock();
            if st.patched.contains(device_id) {
                st.held.remove(device_id);
                return Ok(false);
            }
            match self.cluster.get(ResourceKind::EdgeNode, device_id) {
                Ok(Resource::EdgeNode(node)) if node.status.phase == NodePhase::Unregistered => {
                    st.patched.insert(device_id.to_owned());
                    st.held.remove(device_id);
                }
                Ok(_) => {
                    // Already past Unregistered; nothing to announce.
                    st.patched.insert(device_id.to_owned());
                    st.held.remove(device_id);
                    return Ok(false);
                }
                Err(ClusterError::NotFound { .. }) => {
                    debug!("registrar: holding {device_id} until its EdgeNode exists");
                    st.held.insert(device_id.to_owned());
                    return Ok(false);
                }
                Err(e) => return Err(e.into()),
            }
        }
        self.cluster
            .patch_status(device_id, NodeStatus::new(NodePhase::Registered, "ek possession verified by registrar"))?;
        info!("registrar: {device_id} registered");
        Ok(true)
    }
}

impl RegistrarApi for Registrar {
    fn begin_registration(&self, req: &BeginRegistration) -> Result<Nonce, RegistrarError> {
        req.ek_cert.verify(&self.manufacturer).map_err(|e| RegistrarError::BadCertChain(e.to_string()))?;
        if req.ek_cert.subject != req.device_id {
            return Err(RegistrarError::BadCertChain(format!(
                "certificate subject {:?} does not name device {:?}",
                req.ek_cert.subject, req.device_id
            )));
        }
        req.ak.verify_binding(&req.ek_cert.public_key).map_err(|_| RegistrarError::BadAkBinding)?;

        let mut st = self.lock();
        if let Some(existing) = st.records.get(&req.device_id) {
            if existing.ek_cert != req.ek_cert {
                return Err(RegistrarError::IdentityConflict(req.device_id.clone()));
            }
        }
        let nonce = Nonce::random();
        st.pending.insert(req.device_id.clone(), Pending { nonce, issued: Instant::now(), request: req.clone() });
        Ok(nonce)
    }

    fn complete_registration(&self, device_id: &str, proof: &PossessionProof) -> Result<DeviceRecord, RegistrarError> {
        let record = {
            let mut st = self.lock();
            // Any attempt consumes the challenge.
            let pending =
                st.pending.remove(device_id).ok_or_else(|| RegistrarError::NoOutstandingNonce(device_id.to_owned()))?;
            if pending.issued.elapsed() > self.config.challenge_ttl {
                return Err(RegistrarError::ExpiredNonce(device_id.to_owned()));
            }
            verify_possession(&pending.request.ek_cert, &pending.nonce, proof)
                .map_err(|_| RegistrarError::InvalidProof(device_id.to_owned()))?;
            let req = pending.request;
            let record = DeviceRecord {
                device_id: req.device_id,
                ek_cert: req.ek_cert,
                ak: req.ak,
                agent_address: req.agent_address,
                registered_at: Utc::now(),
            };
            st.records.insert(device_id.to_owned(), record.clone());
            record
        };
        self.try_mark_registered(device_id)?;
        Ok(record)
    }

    fn lookup_device(&self, device_id: &str) -> Result<DeviceRecord, RegistrarError> {
        self.lock().records.get(device_id).cloned().ok_or_else(|| RegistrarError::UnknownDevice(device_id.to_owned()))
    }
}
