// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 Edgetrust Authors

//! Measured boot simulation, event log replay, reference ("golden") state
//! and the appraisal that turns a quote plus log into a verdict.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use crate::crypto::{sha256, Digest, Nonce, PublicKey};
use crate::error::BootError;
use crate::tpm::{AkPublic, PcrBank, PcrIndex, Quote, QuoteFailure};

/// Boot chain stages, ordered as they execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BootStage {
    Crtm,
    Firmware,
    Bootloader,
    Kernel,
    Keys,
}

impl BootStage {
    pub const CHAIN: [BootStage; 5] =
        [BootStage::Crtm, BootStage::Firmware, BootStage::Bootloader, BootStage::Kernel, BootStage::Keys];

    pub fn as_str(self) -> &'static str {
        match self {
            BootStage::Crtm => "crtm",
            BootStage::Firmware => "firmware",
            BootStage::Bootloader => "bootloader",
            BootStage::Kernel => "kernel",
            BootStage::Keys => "keys",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::CHAIN.into_iter().find(|st| st.as_str() == s)
    }
}

impl fmt::Display for BootStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which PCR each stage is measured into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PcrAllocation {
    pub crtm: PcrIndex,
    pub firmware: PcrIndex,
    pub bootloader: PcrIndex,
    pub kernel: PcrIndex,
    pub keys: PcrIndex,
}

impl Default for PcrAllocation {
    /// CRTM and firmware in 0, bootloader in 4, kernel in 5, keys in 7.
    fn default() -> Self {
        let p = |i| PcrIndex::new(i).expect("static index");
        Self { crtm: p(0), firmware: p(0), bootloader: p(4), kernel: p(5), keys: p(7) }
    }
}

impl PcrAllocation {
    pub fn pcr_for(&self, stage: BootStage) -> PcrIndex {
        match stage {
            BootStage::Crtm => self.crtm,
            BootStage::Firmware => self.firmware,
            BootStage::Bootloader => self.bootloader,
            BootStage::Kernel => self.kernel,
            BootStage::Keys => self.keys,
        }
    }

    /// Distinct PCRs touched by the chain, ascending.
    pub fn selection(&self) -> Vec<PcrIndex> {
        let set: BTreeSet<PcrIndex> = BootStage::CHAIN.iter().map(|s| self.pcr_for(*s)).collect();
        set.into_iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootComponent {
    pub stage: BootStage,
    pub name: String,
    pub digest: Digest,
}

impl BootComponent {
    pub fn from_content(stage: BootStage, name: impl Into<String>, content: &[u8]) -> Self {
        Self { stage, name: name.into(), digest: sha256(content) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootEvent {
    pub stage: BootStage,
    pub name: String,
    pub digest: Digest,
    pub pcr: PcrIndex,
}

/// Ordered measured-boot record; serializes as a bare JSON array.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BootEventLog {
    pub entries: Vec<BootEvent>,
}

fn check_chain_order(stages: impl IntoIterator<Item = BootStage>) -> Result<(), BootError> {
    let mut prev: Option<BootStage> = None;
    for stage in stages {
        if let Some(p) = prev {
            if stage < p {
                return Err(BootError::OutOfOrder { previous: p, next: stage });
            }
        }
        prev = Some(stage);
    }
    Ok(())
}

/// Measure each component into its PCR and record it in the log.
pub fn simulate_boot(
    components: &[BootComponent],
    bank: &mut PcrBank,
    allocation: &PcrAllocation,
) -> Result<BootEventLog, BootError> {
    if components.is_empty() {
        return Err(BootError::EmptyChain);
    }
    check_chain_order(components.iter().map(|c| c.stage))?;
    let entries = components
        .iter()
        .map(|c| {
            let pcr = allocation.pcr_for(c.stage);
            bank.extend_pcr(pcr, c.digest);
            BootEvent { stage: c.stage, name: c.name.clone(), digest: c.digest, pcr }
        })
        .collect();
    Ok(BootEventLog { entries })
}

/// Registers obtained by replaying every logged extend on a fresh bank.
pub fn replay_event_log(log: &BootEventLog) -> Result<PcrBank, BootError> {
    let mut prev: Option<BootStage> = None;
    let mut bank = PcrBank::new();
    for (index, entry) in log.entries.iter().enumerate() {
        if matches!(prev, Some(p) if entry.stage < p) {
            return Err(BootError::MalformedLog {
                index,
                reason: format!("stage {} after {}", entry.stage, prev.unwrap()),
            });
        }
        prev = Some(entry.stage);
        bank.extend_pcr(entry.pcr, entry.digest);
    }
    Ok(bank)
}

/// Administrator-supplied golden values.
///
/// JSON form: `{"allowed": {"crtm": [hex, ...], ...}, "pcr_selection": [0, 4, 5, 7]}`.
/// Every stage must be present with at least one digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReferenceState {
    pub allowed: BTreeMap<BootStage, BTreeSet<Digest>>,
    pub pcr_selection: Vec<PcrIndex>,
}

impl ReferenceState {
    /// Reference that allows exactly the given components.
    pub fn from_components<'a>(
        components: impl IntoIterator<Item = &'a BootComponent>,
        pcr_selection: Vec<PcrIndex>,
    ) -> Self {
        let mut allowed: BTreeMap<BootStage, BTreeSet<Digest>> = BTreeMap::new();
        for c in components {
            allowed.entry(c.stage).or_default().insert(c.digest);
        }
        Self { allowed, pcr_selection }
    }

    pub fn allow(&mut self, stage: BootStage, digest: Digest) {
        self.allowed.entry(stage).or_default().insert(digest);
    }

    pub fn validate(&self) -> Result<(), BootError> {
        for stage in BootStage::CHAIN {
            if self.allowed.get(&stage).is_none_or(|s| s.is_empty()) {
                return Err(schema(format!("allowed.{stage}"), "stage must list at least one digest"));
            }
        }
        if self.pcr_selection.is_empty() {
            return Err(schema("pcr_selection", "selection must not be empty"));
        }
        Ok(())
    }

    pub fn is_allowed(&self, stage: BootStage, digest: &Digest) -> bool {
        self.allowed.get(&stage).is_some_and(|s| s.contains(digest))
    }
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> BootError {
    BootError::Schema { path: path.into(), message: message.into() }
}

pub fn serialize_reference_state(reference: &ReferenceState) -> Vec<u8> {
    serde_json::to_vec(reference).expect("reference state serializes")
}

pub fn parse_reference_state(bytes: &[u8]) -> Result<ReferenceState, BootError> {
    let value: Value = serde_json::from_slice(bytes).map_err(|e| schema("$", e.to_string()))?;
    reference_from_value(&value)
}

fn reference_from_value(value: &Value) -> Result<ReferenceState, BootError> {
    let obj = value.as_object().ok_or_else(|| schema("$", "expected an object"))?;
    if let Some(unknown) = obj.keys().find(|k| *k != "allowed" && *k != "pcr_selection") {
        return Err(schema(unknown.as_str(), "unknown field"));
    }

    let allowed_obj = obj
        .get("allowed")
        .ok_or_else(|| schema("allowed", "missing field"))?
        .as_object()
        .ok_or_else(|| schema("allowed", "expected an object"))?;
    let mut allowed = BTreeMap::new();
    for (key, digests) in allowed_obj {
        let stage = BootStage::parse(key).ok_or_else(|| schema(format!("allowed.{key}"), "unknown boot stage"))?;
        let list =
            digests.as_array().ok_or_else(|| schema(format!("allowed.{key}"), "expected an array of hex digests"))?;
        let mut set = BTreeSet::new();
        for (i, d) in list.iter().enumerate() {
            let path = format!("allowed.{key}[{i}]");
            let s = d.as_str().ok_or_else(|| schema(path.clone(), "expected a hex string"))?;
            set.insert(Digest::from_hex(s).map_err(|e| schema(path, e.to_string()))?);
        }
        allowed.insert(stage, set);
    }
    for stage in BootStage::CHAIN {
        match allowed.get(&stage) {
            None => return Err(schema(format!("allowed.{stage}"), "missing stage")),
            Some(s) if s.is_empty() => {
                return Err(schema(format!("allowed.{stage}"), "stage must list at least one digest"))
            }
            Some(_) => {}
        }
    }

    let sel = obj
        .get("pcr_selection")
        .ok_or_else(|| schema("pcr_selection", "missing field"))?
        .as_array()
        .ok_or_else(|| schema("pcr_selection", "expected an array"))?;
    if sel.is_empty() {
        return Err(schema("pcr_selection", "selection must not be empty"));
    }
    let pcr_selection = sel
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let path = format!("pcr_selection[{i}]");
            let n = v.as_u64().ok_or_else(|| schema(path.clone(), "expected a pcr index"))?;
            PcrIndex::new(n as usize).map_err(|e| schema(path, e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;

    Ok(ReferenceState { allowed, pcr_selection })
}

impl<'de> Deserialize<'de> for ReferenceState {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(d)?;
        reference_from_value(&value).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureReason {
    DigestNotAllowed,
    PcrMismatch,
    BadSignature,
    StaleNonce,
    LogReplayMismatch,
    AgentUnreachable,
}

impl FailureReason {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureReason::DigestNotAllowed => "digest-not-allowed",
            FailureReason::PcrMismatch => "pcr-mismatch",
            FailureReason::BadSignature => "bad-signature",
            FailureReason::StaleNonce => "stale-nonce",
            FailureReason::LogReplayMismatch => "log-replay-mismatch",
            FailureReason::AgentUnreachable => "agent-unreachable",
        }
    }
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationVerdict {
    pub passed: bool,
    pub failing_stage: Option<BootStage>,
    pub reason: Option<FailureReason>,
}

impl AttestationVerdict {
    pub fn pass() -> Self {
        Self { passed: true, failing_stage: None, reason: None }
    }

    pub fn fail(reason: FailureReason, stage: Option<BootStage>) -> Self {
        Self { passed: false, failing_stage: stage, reason: Some(reason) }
    }

    /// `reason` or `reason:stage`, used as the Unattested status message.
    pub fn summary(&self) -> String {
        match (self.reason, self.failing_stage) {
            (None, _) => "attested".to_owned(),
            (Some(r), None) => r.to_string(),
            (Some(r), Some(s)) => format!("{r}:{s}"),
        }
    }
}

/// Appraise a quote and its event log against the reference.
///
/// Checks run in a fixed order and the first failure decides the reason:
/// quote signature and AK binding, nonce, replayed log against the quoted
/// composite, then every measured digest against the allowed sets.
pub fn check_reference(
    log: &BootEventLog,
    quote: &Quote,
    reference: &ReferenceState,
    ak: &AkPublic,
    ek: &PublicKey,
    nonce: &Nonce,
) -> AttestationVerdict {
    match quote.verify(ak, ek, nonce) {
        Ok(()) => {}
        Err(QuoteFailure::BadSignature | QuoteFailure::BadBinding) => {
            return AttestationVerdict::fail(FailureReason::BadSignature, None)
        }
        Err(QuoteFailure::StaleNonce) => return AttestationVerdict::fail(FailureReason::StaleNonce, None),
    }
    if quote.selection != reference.pcr_selection {
        return AttestationVerdict::fail(FailureReason::PcrMismatch, None);
    }
    let replayed = match replay_event_log(log) {
        Ok(bank) => bank,
        Err(_) => return AttestationVerdict::fail(FailureReason::LogReplayMismatch, None),
    };
    if replayed.composite(&reference.pcr_selection) != quote.composite {
        return AttestationVerdict::fail(FailureReason::LogReplayMismatch, None);
    }
    for entry in &log.entries {
        if !reference.is_allowed(entry.stage, &entry.digest) {
            return AttestationVerdict::fail(FailureReason::DigestNotAllowed, Some(entry.stage));
        }
    }
    AttestationVerdict::pass()
}
