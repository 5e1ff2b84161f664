// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 Edgetrust Authors

//! Service boundaries. Each trait has an in-process implementation (the
//! service itself) and a socket client in [`crate::wire`], so components
//! can be wired either way without changing their logic.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use crate::agent::{PayloadDelivery, QuoteResponse, ShareAck};
use crate::crypto::Nonce;
use crate::error::{AgentError, RegistrarError, TenantError, VerifierError};
use crate::registrar::{BeginRegistration, DeviceRecord};
use crate::tenant::{EnrollmentReceipt, EnrollmentRequest, KeyShare};
use crate::tpm::{PcrIndex, PossessionProof};
use crate::verifier::{MonitorHandle, MonitorRequest};

pub trait RegistrarApi: Send + Sync {
    fn begin_registration(&self, req: &BeginRegistration) -> Result<Nonce, RegistrarError>;
    fn complete_registration(&self, device_id: &str, proof: &PossessionProof) -> Result<DeviceRecord, RegistrarError>;
    fn lookup_device(&self, device_id: &str) -> Result<DeviceRecord, RegistrarError>;
}

pub trait AgentApi: Send + Sync {
    fn identity_challenge(&self, nonce: &Nonce) -> Result<PossessionProof, AgentError>;
    fn quote(&self, nonce: &Nonce, selection: &[PcrIndex]) -> Result<QuoteResponse, AgentError>;
    fn deliver_payload(&self, delivery: &PayloadDelivery) -> Result<(), AgentError>;
    fn deliver_share(&self, share: &KeyShare) -> Result<ShareAck, AgentError>;
}

/// Resolves an agent's `host:port` to something that speaks [`AgentApi`].
pub trait AgentConnector: Send + Sync {
    fn connect(&self, address: &str) -> Result<Arc<dyn AgentApi>, AgentError>;
}

pub trait TenantApi: Send + Sync {
    fn enroll(&self, req: &EnrollmentRequest) -> Result<EnrollmentReceipt, TenantError>;
}

pub trait VerifierApi: Send + Sync {
    fn add_monitor(&self, req: &MonitorRequest) -> Result<MonitorHandle, VerifierError>;
}

/// Agent handle plus its reachability switch.
type AgentSlot = (Arc<dyn AgentApi>, bool);

/// In-process agent lookup by address, with a switch to simulate an
/// unreachable device.
#[derive(Default)]
pub struct LocalAgents {
    agents: RwLock<HashMap<String, AgentSlot>>,
}

impl LocalAgents {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, address: &str, agent: Arc<dyn AgentApi>) {
        self.agents.write().unwrap_or_else(|e| e.into_inner()).insert(address.to_owned(), (agent, true));
    }

    pub fn set_reachable(&self, address: &str, reachable: bool) {
        if let Some(entry) = self.agents.write().unwrap_or_else(|e| e.into_inner()).get_mut(address) {
            entry.1 = reachable;
        }
    }
}

impl AgentConnector for LocalAgents {
    fn connect(&self, address: &str) -> Result<Arc<dyn AgentApi>, AgentError> {
        match self.agents.read().unwrap_or_else(|e| e.into_inner()).get(address) {
            Some((agent, true)) => Ok(agent.clone()),
            Some((_, false)) => Err(AgentError::Transport(format!("{address}: connection refused"))),
            None => Err(AgentError::Transport(format!("{address}: no such agent"))),
        }
    }
}
