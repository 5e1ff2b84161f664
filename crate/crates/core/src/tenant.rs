// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 Edgetrust Authors

//! Enrollment endpoint called by the controller.
//!
//! The payload is sealed under a fresh key that exists only as two XOR
//! shares once the call returns: the agent holds one next to the ciphertext,
//! the verifier holds the other until the device passes attestation.
//! Everything happens in memory; the only thing written to [`Storage`] is
//! a receipt that carries neither payload bytes nor key material.

use std::collections::HashSet;
use std::sync::{Arc, Mutex};

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce as AeadNonce};
use log::{info, warn};
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::PayloadDelivery;
use crate::api::{AgentConnector, RegistrarApi, TenantApi, VerifierApi};
use crate::boot::ReferenceState;
use crate::cluster::{ClusterApi, ClusterEventKind};
use crate::crypto::{base64_bytes, Nonce, SymmetricKey};
use crate::error::{AgentError, RegistrarError, TenantError};
use crate::tpm::verify_possession;
use crate::verifier::MonitorRequest;

pub type KeyShare = SymmetricKey;

/// Payload key and its two shares: `payload_key = agent_share ^ verifier_share`.
#[derive(Clone)]
pub struct KeySplit {
    pub payload_key: SymmetricKey,
    pub agent_share: KeyShare,
    pub verifier_share: KeyShare,
}

pub fn split_key() -> KeySplit {
    let payload_key = SymmetricKey::random();
    let agent_share = SymmetricKey::random();
    KeySplit { payload_key, agent_share, verifier_share: payload_key ^ agent_share }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("payload authentication failed")]
pub struct PayloadAuthError;

const AEAD_NONCE_LEN: usize = 12;

/// ChaCha20-Poly1305 with the device id as associated data.
/// Output layout: 12-byte nonce, then ciphertext with tag.
pub fn seal_payload(key: &SymmetricKey, device_id: &str, plaintext: &[u8]) -> Vec<u8> {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(key.as_bytes()));
    let mut nonce = [0u8; AEAD_NONCE_LEN];
    OsRng.fill_bytes(&mut nonce);
    let ct = cipher
        .encrypt(AeadNonce::from_slice(&nonce), Payload { msg: plaintext, aad: device_id.as_bytes() })
        .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
    let mut out = nonce.to_vec();
    out.extend_from_slice(&ct);
    out
}

pub fn open_payload(key: &SymmetricKey, device_id: &str, sealed: &[u8]) -> Result<Vec<u8>, PayloadAuthError> {
    if sealed.len() < AEAD_NONCE_LEN {
        return Err(PayloadAuthError);
    }
    let (nonce, ct) = sealed.split_at(AEAD_NONCE_LEN);
    ChaCha20Poly1305::new(Key::from_slice(key.as_bytes()))
        .decrypt(AeadNonce::from_slice(nonce), Payload { msg: ct, aad: device_id.as_bytes() })
        .map_err(|_| PayloadAuthError)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnrollmentRequest {
    pub device_id: String,
    #[serde(with = "base64_bytes")]
    pub payload: Vec<u8>,
    pub reference_state: ReferenceState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnrollmentStep {
    DeviceLookedUp,
    PayloadSealed,
    IdentityVerified,
    PayloadDelivered,
    VerifierHandoff,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrollmentReceipt {
    pub enrollment_id: String,
    pub device_id: String,
    pub steps_completed: Vec<EnrollmentStep>,
}

/// Where the tenant may persist anything at all.
pub trait Storage: Send + Sync {
    fn write(&self, path: &str, contents: &[u8]) -> std::io::Result<()>;
}

pub struct NullStorage;

impl Storage for NullStorage {
    fn write(&self, _path: &str, _contents: &[u8]) -> std::io::Result<()> {
        Ok(())
    }
}

/// Keeps every write in memory for inspection.
#[derive(Default)]
pub struct RecordingStorage {
    writes: Mutex<Vec<(String, Vec<u8>)>>,
}

impl RecordingStorage {
    pub fn writes(&self) -> Vec<(String, Vec<u8>)> {
        self.writes.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl Storage for RecordingStorage {
    fn write(&self, path: &str, contents: &[u8]) -> std::io::Result<()> {
        self.writes.lock().unwrap_or_else(|e| e.into_inner()).push((path.to_owned(), contents.to_vec()));
        Ok(())
    }
}

pub struct Tenant {
    registrar: Arc<dyn RegistrarApi>,
    agents: Arc<dyn AgentConnector>,
    verifier: Arc<dyn VerifierApi>,
    cluster: Arc<dyn ClusterApi>,
    storage: Arc<dyn Storage>,
    in_flight: Mutex<HashSet<String>>,
}

struct InFlightGuard<'a> {
    set: &'a Mutex<HashSet<String>>,
    id: String,
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        self.set.lock().unwrap_or_else(|e| e.into_inner()).remove(&self.id);
    }
}

impl Tenant {
    pub fn new(
        registrar: Arc<dyn RegistrarApi>,
        agents: Arc<dyn AgentConnector>,
        verifier: Arc<dyn VerifierApi>,
        cluster: Arc<dyn ClusterApi>,
    ) -> Self {
        Self {
            registrar,
            agents,
            verifier,
            cluster,
            storage: Arc::new(NullStorage),
            in_flight: Mutex::new(HashSet::new()),
        }
    }

    pub fn with_storage(mut self, storage: Arc<dyn Storage>) -> Self {
        self.storage = storage;
        self
    }

    fn claim(&self, device_id: &str) -> Result<InFlightGuard<'_>, TenantError> {
        let mut set = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        if !set.insert(device_id.to_owned()) {
            return Err(TenantError::InFlight(device_id.to_owned()));
        }
        Ok(InFlightGuard { set: &self.in_flight, id: device_id.to_owned() })
    }
}

fn agent_err(e: AgentError) -> TenantError {
    match e {
        AgentError::Transport(m) => TenantError::AgentUnreachable(m),
        other => TenantError::IdentityCheckFailed(other.to_string()),
    }
}

impl TenantApi for Tenant {
    fn enroll(&self, req: &EnrollmentRequest) -> Result<EnrollmentReceipt, TenantError> {
        if req.payload.is_empty() {
            return Err(TenantError::InvalidRequest("payload is empty".into()));
        }
        req.reference_state.validate().map_err(|e| TenantError::InvalidRequest(e.to_string()))?;
        let _guard = self.claim(&req.device_id)?;
        let id = &req.device_id;
        let enrollment_id = uuid::Uuid::new_v4().to_string();
        let mut steps = Vec::new();

        let record = self.registrar.lookup_device(id).map_err(|e| match e {
            RegistrarError::UnknownDevice(d) => TenantError::UnknownDevice(d),
            other => TenantError::Registrar(other.to_string()),
        })?;
        steps.push(EnrollmentStep::DeviceLookedUp);

        let split = split_key();
        let sealed = seal_payload(&split.payload_key, id, &req.payload);
        steps.push(EnrollmentStep::PayloadSealed);

        let agent = self.agents.connect(&record.agent_address).map_err(agent_err)?;
        let challenge = Nonce::random();
        let proof = agent.identity_challenge(&challenge).map_err(agent_err)?;
        if let Err(e) = verify_possession(&record.ek_cert, &challenge, &proof) {
            warn!("tenant: {id} failed ek possession re-check: {e}");
            return Err(TenantError::IdentityCheckFailed(e.to_string()));
        }
        steps.push(EnrollmentStep::IdentityVerified);

        agent
            .deliver_payload(&PayloadDelivery { challenge, ciphertext: sealed, share: split.agent_share })
            .map_err(|e| TenantError::Delivery(e.to_string()))?;
        steps.push(EnrollmentStep::PayloadDelivered);
        self.cluster.record_event(ClusterEventKind::PayloadDelivered, id, &format!("enrollment {enrollment_id}"));

        self.verifier
            .add_monitor(&MonitorRequest {
                device_id: id.clone(),
                reference_state: req.reference_state.clone(),
                share: split.verifier_share,
                ak: record.ak,
                ek_cert: record.ek_cert.clone(),
                agent_address: record.agent_address.clone(),
            })
            .map_err(|e| TenantError::VerifierHandoff(e.to_string()))?;
        steps.push(EnrollmentStep::VerifierHandoff);

        let receipt = EnrollmentReceipt { enrollment_id, device_id: id.clone(), steps_completed: steps };
        let json = serde_json::to_vec(&receipt).expect("receipt serializes");
        if let Err(e) = self.storage.write(&format!("receipts/{}.json", receipt.enrollment_id), &json) {
            warn!("tenant: could not persist receipt: {e}");
        }
        info!("tenant: enrolled {id} ({})", receipt.enrollment_id);
        Ok(receipt)
    }
}
