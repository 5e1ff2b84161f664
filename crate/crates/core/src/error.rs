// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 Edgetrust Authors

//! Error types. Service errors are serde-serializable so they survive the
//! JSON wire protocol unchanged.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boot::BootStage;
use crate::cluster::NodePhase;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum CryptoError {
    #[error("invalid hex: {0}")]
    Hex(String),
    #[error("expected {expected} bytes, got {actual}")]
    Length { expected: usize, actual: usize },
    #[error("malformed encoding: {0}")]
    Malformed(String),
    #[error("signature verification failed")]
    BadSignature,
    #[error("certificate issued by unknown authority {0:?}")]
    UnknownIssuer(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum TpmError {
    #[error("pcr index {0} out of range 0..24")]
    PcrIndexOutOfRange(usize),
    #[error("digest must be 32 bytes, got {0}")]
    DigestLength(usize),
    #[error("nonce must be 32 bytes, got {0}")]
    NonceLength(usize),
    #[error("pcr selection is empty")]
    EmptySelection,
    #[error("device id is empty")]
    EmptyDeviceId,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum BootError {
    #[error("boot chain is empty")]
    EmptyChain,
    #[error("boot stage {next} follows {previous}, violating chain order")]
    OutOfOrder { previous: BootStage, next: BootStage },
    #[error("malformed event log entry {index}: {reason}")]
    MalformedLog { index: usize, reason: String },
    #[error("reference state invalid at {path}: {message}")]
    Schema { path: String, message: String },
    #[error(transparent)]
    Tpm(#[from] TpmError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum ClusterError {
    #[error("{kind} {name:?} already exists")]
    AlreadyExists { kind: String, name: String },
    #[error("{kind} {name:?} not found")]
    NotFound { kind: String, name: String },
    #[error("illegal status transition {from} -> {to}")]
    IllegalTransition { from: NodePhase, to: NodePhase },
    #[error("invalid status: {0}")]
    InvalidStatus(String),
    #[error("user {0:?} is already bound to a different key")]
    NameCollision(String),
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("bad certificate: {0}")]
    BadCertificate(String),
    #[error("{0} cannot be applied directly")]
    NotApplicable(String),
    #[error("user {user:?} may not {verb} {resource}")]
    AccessDenied { user: String, verb: String, resource: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum RegistrarError {
    #[error("ek certificate rejected: {0}")]
    BadCertChain(String),
    #[error("attestation key binding does not verify under the ek")]
    BadAkBinding,
    #[error("no outstanding challenge for device {0:?}")]
    NoOutstandingNonce(String),
    #[error("challenge for device {0:?} expired")]
    ExpiredNonce(String),
    #[error("possession proof for device {0:?} is invalid")]
    InvalidProof(String),
    #[error("unknown device {0:?}")]
    UnknownDevice(String),
    #[error("device {0:?} is already registered with a different ek")]
    IdentityConflict(String),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("transport: {0}")]
    Transport(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum AgentError {
    #[error("agent has not booted")]
    NotBooted,
    #[error("registration failed after {attempts} attempts: {last}")]
    Registration { attempts: u32, last: String },
    #[error("payload delivery was not preceded by an answered identity challenge")]
    SubChallengeMissing,
    #[error("no payload held; deliver the ciphertext first")]
    MissingCiphertext,
    #[error("payload decryption failed authentication")]
    Decryption,
    #[error("payload rejected: {0}")]
    Payload(String),
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error(transparent)]
    Tpm(#[from] TpmError),
    #[error(transparent)]
    Boot(#[from] BootError),
    #[error("transport: {0}")]
    Transport(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum TenantError {
    #[error("unknown device {0:?}")]
    UnknownDevice(String),
    #[error("invalid enrollment request: {0}")]
    InvalidRequest(String),
    #[error("an enrollment for {0:?} is already in flight")]
    InFlight(String),
    #[error("agent unreachable: {0}")]
    AgentUnreachable(String),
    #[error("agent failed the ek possession check: {0}")]
    IdentityCheckFailed(String),
    #[error("payload delivery failed: {0}")]
    Delivery(String),
    #[error("verifier handoff failed: {0}")]
    VerifierHandoff(String),
    #[error("registrar: {0}")]
    Registrar(String),
    #[error("transport: {0}")]
    Transport(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum VerifierError {
    #[error("device {0:?} is already monitored")]
    DuplicateMonitor(String),
    #[error("device {0:?} is not monitored")]
    UnknownMonitor(String),
    #[error("monitor for {0:?} is revoked")]
    Revoked(String),
    #[error(transparent)]
    InvalidReference(#[from] BootError),
    #[error("webhook delivery failed: {0}")]
    Webhook(String),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("transport: {0}")]
    Transport(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum ControllerError {
    #[error("ek certificate on EdgeNode {0:?} does not match the registrar record")]
    IdentityMismatch(String),
    #[error("credentials for {0:?} already exist")]
    CredentialCollision(String),
    #[error("registrar lookup failed: {0}")]
    Lookup(String),
    #[error("tenant enrollment failed: {0}")]
    Tenant(String),
    #[error("payload build failed: {0}")]
    Payload(String),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

/// Failures of the socket layer itself, before any service-level error.
#[derive(Debug, Error)]
pub enum TransportError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario config: {0}")]
    Config(String),
    #[error("component startup failed: {0}")]
    Startup(String),
    #[error("run {run} timed out after {seconds:.1}s waiting for {waiting_for}")]
    Timeout { run: usize, seconds: f64, waiting_for: String },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
