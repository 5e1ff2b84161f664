// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 Edgetrust Authors

//! The on-device agent.

use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::api::{AgentApi, RegistrarApi};
use crate::boot::{simulate_boot, BootComponent, BootEventLog, PcrAllocation};
use crate::cluster::{ClusterApi, WorkerNode};
use crate::crypto::{base64_bytes, CertificateAuthority, Nonce};
use crate::error::AgentError;
use crate::payload::unpack_zip;
use crate::registrar::{BeginRegistration, DeviceRecord};
use crate::tenant::{open_payload, KeyShare};
use crate::tpm::{
    generate_endorsement, quote, AttestationKey, EndorsementIdentity, PcrBank, PcrIndex, PossessionProof, Quote,
};

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub allocation: PcrAllocation,
    pub registration_attempts: u32,
    pub registration_backoff: Duration,
    /// Artificial delay before the decrypted payload starts the worker.
    pub worker_startup_delay: Duration,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            allocation: PcrAllocation::default(),
            registration_attempts: 3,
            registration_backoff: Duration::from_secs(2),
            worker_startup_delay: Duration::ZERO,
        }
    }
}

/// Ciphertext and the agent's key share, delivered by the tenant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PayloadDelivery {
    /// The identity challenge answered on this connection just before delivery.
    pub challenge: Nonce,
    #[serde(with = "base64_bytes")]
    pub ciphertext: Vec<u8>,
    pub share: KeyShare,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuoteResponse {
    pub quote: Quote,
    pub event_log: BootEventLog,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShareAck {
    /// False when the same payload had already been recovered.
    pub first_delivery: bool,
}

#[derive(Clone)]
struct Held {
    ciphertext: Vec<u8>,
    share: KeyShare,
}

#[derive(Default)]
struct State {
    bank: PcrBank,
    log: Option<BootEventLog>,
    answered: Option<Nonce>,
    held: Option<Held>,
    recovered: Option<Vec<u8>>,
    executing: bool,
    executed: bool,
    executed_at: Option<DateTime<Utc>>,
    worker: Option<WorkerNode>,
    execution_error: Option<String>,
    shares_received: u32,
}

struct Inner {
    identity: EndorsementIdentity,
    ak: AttestationKey,
    address: String,
    config: AgentConfig,
    cluster: Arc<dyn ClusterApi>,
    state: Mutex<State>,
    changed: Condvar,
}

/// One simulated edge device. Cheap to clone; clones share the device.
#[derive(Clone)]
pub struct EdgeAgent {
    inner: Arc<Inner>,
}

impl EdgeAgent {
    /// Create a device with a fresh EK certified by `manufacturer`.
    ///
    /// `cluster` is where the decrypted payload enrolls the worker.
    pub fn new(
        device_id: &str,
        address: &str,
        manufacturer: &CertificateAuthority,
        cluster: Arc<dyn ClusterApi>,
        config: AgentConfig,
    ) -> Result<Self, AgentError> {
        let identity = generate_endorsement(device_id, manufacturer)?;
        let ak = AttestationKey::generate(&identity);
        Ok(Self {
            inner: Arc::new(Inner {
                identity,
                ak,
                address: address.to_owned(),
                config,
                cluster,
                state: Mutex::new(State::default()),
                changed: Condvar::new(),
            }),
        })
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.inner.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn device_id(&self) -> &str {
        self.inner.identity.device_id()
    }

    pub fn address(&self) -> &str {
        &self.inner.address
    }

    pub fn identity(&self) -> &EndorsementIdentity {
        &self.inner.identity
    }

    pub fn ak(&self) -> &AttestationKey {
        &self.inner.ak
    }

    /// Power-cycle and measure `components`. Any held payload and answered
    /// challenge are dropped; an already-enrolled worker stays enrolled.
    pub fn boot(&self, components: &[BootComponent]) -> Result<BootEventLog, AgentError> {
        let mut st = self.lock();
        st.bank.reset_all();
        st.log = None;
        st.answered = None;
        st.held = None;
        let log = simulate_boot(components, &mut st.bank, &self.inner.config.allocation)?;
        st.log = Some(log.clone());
        debug!("agent {}: booted {} components", self.device_id(), components.len());
        Ok(log)
    }

    pub fn is_booted(&self) -> bool {
        self.lock().log.is_some()
    }

    /// Run the EK challenge with the registrar, retrying with backoff.
    pub fn register(&self, registrar: &dyn RegistrarApi) -> Result<DeviceRecord, AgentError> {
        if !self.is_booted() {
            return Err(AgentError::NotBooted);
        }
        let req = BeginRegistration {
            device_id: self.device_id().to_owned(),
            ek_cert: self.inner.identity.ek_cert().clone(),
            ak: self.inner.ak.public(),
            agent_address: self.inner.address.clone(),
        };
        let attempts = self.inner.config.registration_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            let result = registrar.begin_registration(&req).and_then(|nonce| {
                registrar.complete_registration(&req.device_id, &self.inner.identity.prove_possession(&nonce))
            });
            match result {
                Ok(record) => {
                    info!("agent {}: registered on attempt {attempt}", req.device_id);
                    return Ok(record);
                }
                Err(e) => {
                    warn!("agent {}: registration attempt {attempt}/{attempts} failed: {e}", req.device_id);
                    last = e.to_string();
                    if attempt < attempts {
                        std::thread::sleep(self.inner.config.registration_backoff);
                    }
                }
            }
        }
        Err(AgentError::Registration { attempts, last })
    }

    pub fn boot_and_register(
        &self,
        components: &[BootComponent],
        registrar: &dyn RegistrarApi,
    ) -> Result<DeviceRecord, AgentError> {
        self.boot(components)?;
        self.register(registrar)
    }

    pub fn is_executed(&self) -> bool {
        self.lock().executed
    }

    pub fn executed_at(&self) -> Option<DateTime<Utc>> {
        self.lock().executed_at
    }

    pub fn execution_error(&self) -> Option<String> {
        self.lock().execution_error.clone()
    }

    /// Plaintext ZIP recovered from the last successful share delivery.
    pub fn recovered_payload(&self) -> Option<Vec<u8>> {
        self.lock().recovered.clone()
    }

    pub fn worker(&self) -> Option<WorkerNode> {
        self.lock().worker.clone()
    }

    pub fn holds_payload(&self) -> bool {
        self.lock().held.is_some()
    }

    /// How many `deliver_share` calls reached this agent, successful or not.
    pub fn shares_received(&self) -> u32 {
        self.lock().shares_received
    }

    /// Block until the payload has run or `timeout` passes.
    pub fn wait_executed(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut st = self.lock();
        while !st.executed {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return false;
            }
            st = self.inner.changed.wait_timeout(st, left).unwrap_or_else(|e| e.into_inner()).0;
        }
        true
    }

    fn execute(&self, plaintext: Vec<u8>) {
        let delay = self.inner.config.worker_startup_delay;
        if !delay.is_zero() {
            std::thread::sleep(delay);
        }
        let result = unpack_zip(&plaintext).and_then(|(creds, cfg)| {
            self.inner.cluster.register_worker(&creds.cert, &cfg.node_name).map_err(|e| e.to_string())
        });
        let mut st = self.lock();
        st.executing = false;
        match result {
            Ok(worker) => {
                info!("agent {}: worker {} enrolled", self.device_id(), worker.name);
                st.worker = Some(worker);
                st.executed = true;
                st.executed_at = Some(Utc::now());
                st.execution_error = None;
            }
            Err(e) => {
                warn!("agent {}: payload execution failed: {e}", self.device_id());
                st.execution_error = Some(e);
            }
        }
        self.inner.changed.notify_all();
    }
}

impl AgentApi for EdgeAgent {
    fn identity_challenge(&self, nonce: &Nonce) -> Result<PossessionProof, AgentError> {
        let proof = self.inner.identity.prove_possession(nonce);
        self.lock().answered = Some(*nonce);
        Ok(proof)
    }

    fn quote(&self, nonce: &Nonce, selection: &[PcrIndex]) -> Result<QuoteResponse, AgentError> {
        let st = self.lock();
        let log = st.log.clone().ok_or(AgentError::NotBooted)?;
        let quote = quote(&st.bank, &self.inner.ak, nonce, selection)?;
        Ok(QuoteResponse { quote, event_log: log })
    }

    fn deliver_payload(&self, delivery: &PayloadDelivery) -> Result<(), AgentError> {
        if delivery.ciphertext.is_empty() {
            return Err(AgentError::Malformed("empty ciphertext".into()));
        }
        let mut st = self.lock();
        if st.log.is_none() {
            return Err(AgentError::NotBooted);
        }
        if st.answered.take() != Some(delivery.challenge) {
            return Err(AgentError::SubChallengeMissing);
        }
        st.held = Some(Held { ciphertext: delivery.ciphertext.clone(), share: delivery.share });
        debug!("agent {}: holding {} byte payload", self.device_id(), delivery.ciphertext.len());
        Ok(())
    }

    fn deliver_share(&self, share: &KeyShare) -> Result<ShareAck, AgentError> {
        let mut st = self.lock();
        st.shares_received += 1;
        let held = st.held.clone().ok_or(AgentError::MissingCiphertext)?;
        let plaintext = open_payload(&(held.share ^ *share), self.device_id(), &held.ciphertext)
            .map_err(|_| AgentError::Decryption)?;
        if st.recovered.as_ref() == Some(&plaintext) && (st.executed || st.executing) {
            return Ok(ShareAck { first_delivery: false });
        }
        st.recovered = Some(plaintext.clone());
        st.executing = true;
        drop(st);
        let me = self.clone();
        std::thread::Builder::new()
            .name(format!("payload-{}", self.device_id()))
            .spawn(move || me.execute(plaintext))
            .map_err(|e| AgentError::Payload(e.to_string()))?;
        Ok(ShareAck { first_delivery: true })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boot::BootStage;
    use crate::cluster::InMemoryCluster;
    use crate::tenant::{seal_payload, split_key};

    fn components() -> Vec<BootComponent> {
        vec![
            BootComponent::from_content(BootStage::Crtm, "crtm", b"c"),
            BootComponent::from_content(BootStage::Kernel, "linux", b"k"),
        ]
    }

    fn agent() -> EdgeAgent {
        let ca = CertificateAuthority::generate("tpm-manufacturer");
        EdgeAgent::new("edge-01", "127.0.0.1:1", &ca, Arc::new(InMemoryCluster::new()), AgentConfig::default()).unwrap()
    }

    #[test]
    fn quote_requires_boot_and_uses_request_nonce() {
        let a = agent();
        let sel = PcrAllocation::default().selection();
        assert_eq!(a.quote(&Nonce::random(), &sel).unwrap_err(), AgentError::NotBooted);
        a.boot(&components()).unwrap();
        let (n1, n2) = (Nonce::random(), Nonce::random());
        let q1 = a.quote(&n1, &sel).unwrap();
        let q2 = a.quote(&n2, &sel).unwrap();
        assert_eq!(q1.quote.nonce, n1);
        assert_ne!(q1.quote.signature, q2.quote.signature);
        assert_eq!(q1.event_log.entries.len(), 2);
    }

    #[test]
    fn delivery_requires_answered_challenge() {
        let a = agent();
        a.boot(&components()).unwrap();
        let s = split_key();
        let d = PayloadDelivery {
            challenge: Nonce::random(),
            ciphertext: seal_payload(&s.payload_key, "edge-01", b"x"),
            share: s.agent_share,
        };
        assert_eq!(a.deliver_payload(&d).unwrap_err(), AgentError::SubChallengeMissing);
        a.identity_challenge(&d.challenge).unwrap();
        a.deliver_payload(&d).unwrap();
        assert!(a.holds_payload());
        assert!(!a.is_executed());
        // The challenge is consumed by the delivery.
        assert_eq!(a.deliver_payload(&d).unwrap_err(), AgentError::SubChallengeMissing);
    }

    #[test]
    fn share_without_payload_and_wrong_share() {
        let a = agent();
        a.boot(&components()).unwrap();
        assert_eq!(a.deliver_share(&KeyShare::random()).unwrap_err(), AgentError::MissingCiphertext);
        let s = split_key();
        let d = PayloadDelivery {
            challenge: Nonce::random(),
            ciphertext: seal_payload(&s.payload_key, "edge-01", b"x"),
            share: s.agent_share,
        };
        a.identity_challenge(&d.challenge).unwrap();
        a.deliver_payload(&d).unwrap();
        assert_eq!(a.deliver_share(&KeyShare::random()).unwrap_err(), AgentError::Decryption);
        assert!(a.recovered_payload().is_none());
        assert!(a.holds_payload());
    }

    #[test]
    fn reboot_clears_held_payload() {
        let a = agent();
        a.boot(&components()).unwrap();
        let s = split_key();
        let n = Nonce::random();
        a.identity_challenge(&n).unwrap();
        a.deliver_payload(&PayloadDelivery {
            challenge: n,
            ciphertext: seal_payload(&s.payload_key, "edge-01", b"x"),
            share: s.agent_share,
        })
        .unwrap();
        a.boot(&components()).unwrap();
        assert!(!a.holds_payload());
    }
}
