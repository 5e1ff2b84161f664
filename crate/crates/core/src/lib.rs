// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 Edgetrust Authors

//! Remotely attested enrollment of edge devices as orchestrator workers.
//!
//! Simulated TPM-equipped devices boot with a measured chain, register with
//! a registrar through an EK challenge, and receive unique cluster
//! credentials in a split-key encrypted payload that only becomes decryptable
//! after the verifier appraises their boot state. A reconciliation controller
//! grants and revokes RBAC permissions as attestation results change.

pub mod agent;
pub mod api;
pub mod boot;
pub mod cluster;
pub mod controller;
pub mod crypto;
pub mod error;
pub mod payload;
pub mod registrar;
pub mod scenario;
pub mod task;
pub mod tenant;
pub mod tpm;
pub mod verifier;
pub mod wire;
