// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 Edgetrust Authors

//! Shared fixtures, independent oracles and the suites used by both the
//! focused integration tests and the acceptance target.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::Utc;
use edgetrust::agent::{AgentConfig, EdgeAgent};
use edgetrust::api::{AgentApi, LocalAgents, RegistrarApi, TenantApi};
use edgetrust::boot::{
    check_reference, replay_event_log, simulate_boot, BootComponent, BootStage, PcrAllocation, ReferenceState,
};
use edgetrust::cluster::{
    ClusterApi, ClusterEventKind, EdgeNodeSpec, InMemoryCluster, NodePhase, NodeStatus, PolicyRule, ResourceKind,
};
use edgetrust::controller::{build_payload, Controller, ControllerConfig};
use edgetrust::crypto::{CertificateAuthority, Digest, Nonce, SymmetricKey};
use edgetrust::error::{AgentError, RegistrarError, TenantError};
use edgetrust::registrar::{BeginRegistration, DeviceRecord, Registrar, RegistrarConfig};
use edgetrust::scenario::golden_components;
use edgetrust::tenant::{open_payload, seal_payload, split_key, EnrollmentReceipt, EnrollmentRequest, Tenant};
use edgetrust::tpm::{generate_endorsement, quote, AttestationKey, PcrBank, PcrIndex, PCR_COUNT};
use edgetrust::verifier::{Schedule, Verifier, VerifierConfig};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use sha2::{Digest as _, Sha256};

// ---------------------------------------------------------------- oracles

/// SHA-256(old || digest), computed without the crate's own hashing helpers.
pub fn oracle_extend(old: [u8; 32], digest: [u8; 32]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(old);
    h.update(digest);
    h.finalize().into()
}

/// Registers after applying `(pcr, digest)` extends to an all-zero bank.
pub fn oracle_registers(extends: &[(usize, [u8; 32])]) -> [[u8; 32]; PCR_COUNT] {
    let mut regs = [[0u8; 32]; PCR_COUNT];
    for (pcr, d) in extends {
        regs[*pcr] = oracle_extend(regs[*pcr], *d);
    }
    regs
}

/// SHA-256 over the concatenated selected registers.
pub fn oracle_composite(regs: &[[u8; 32]; PCR_COUNT], selection: &[usize]) -> [u8; 32] {
    let mut h = Sha256::new();
    for &i in selection {
        h.update(regs[i]);
    }
    h.finalize().into()
}

/// Default stage-to-PCR mapping, spelled out independently of `PcrAllocation`.
pub fn oracle_pcr(stage: BootStage) -> usize {
    match stage {
        BootStage::Crtm | BootStage::Firmware => 0,
        BootStage::Bootloader => 4,
        BootStage::Kernel => 5,
        BootStage::Keys => 7,
    }
}

pub const STAGES: [BootStage; 5] =
    [BootStage::Crtm, BootStage::Firmware, BootStage::Bootloader, BootStage::Kernel, BootStage::Keys];

/// A chain of 1..=6 components with non-decreasing stages.
pub fn random_chain(rng: &mut StdRng) -> Vec<BootComponent> {
    let len = rng.gen_range(1..=6);
    let mut stages: Vec<BootStage> = (0..len).map(|_| STAGES[rng.gen_range(0..STAGES.len())]).collect();
    stages.sort();
    stages
        .into_iter()
        .enumerate()
        .map(|(i, stage)| {
            let mut content = [0u8; 24];
            rng.fill_bytes(&mut content);
            BootComponent::from_content(stage, format!("c{i}"), &content)
        })
        .collect()
}

fn random_digest(rng: &mut StdRng) -> Digest {
    let mut d = [0u8; 32];
    rng.fill_bytes(&mut d);
    Digest(d)
}

pub fn selection(indices: &[usize]) -> Vec<PcrIndex> {
    indices.iter().map(|&i| PcrIndex::new(i).unwrap()).collect()
}

// ---------------------------------------------------------------- harness

pub fn golden_reference() -> ReferenceState {
    ReferenceState::from_components(&golden_components(0), PcrAllocation::default().selection())
}

pub fn role_rules() -> Vec<PolicyRule> {
    vec![PolicyRule::new("create", "node"), PolicyRule::new("get", "pod")]
}

/// Every service in-process, with the verifier on the manual schedule and
/// the controller driven by explicit `reconcile` calls.
pub struct Harness {
    pub cluster: Arc<InMemoryCluster>,
    pub manufacturer: CertificateAuthority,
    pub registrar: Arc<Registrar>,
    pub agents: Arc<LocalAgents>,
    pub verifier: Arc<Verifier>,
    pub tenant: Arc<Tenant>,
    pub controller: Arc<Controller>,
}

impl Harness {
    pub fn new() -> Self {
        Self::with_verifier(VerifierConfig { schedule: Schedule::Manual, ..VerifierConfig::default() })
    }

    pub fn with_verifier(config: VerifierConfig) -> Self {
        let cluster = Arc::new(InMemoryCluster::new());
        let manufacturer = CertificateAuthority::generate("tpm-manufacturer");
        let registrar = Arc::new(Registrar::new(manufacturer.anchor(), cluster.clone(), RegistrarConfig::default()));
        let agents = Arc::new(LocalAgents::new());
        let verifier = Arc::new(Verifier::new(cluster.clone(), agents.clone(), config));
        let tenant = Arc::new(Tenant::new(registrar.clone(), agents.clone(), verifier.clone(), cluster.clone()));
        let controller = Arc::new(Controller::new(
            cluster.clone(),
            registrar.clone(),
            tenant.clone(),
            ControllerConfig { backoff: Duration::from_millis(5), ..ControllerConfig::default() },
        ));
        Self { cluster, manufacturer, registrar, agents, verifier, tenant, controller }
    }

    /// A device whose EdgeNode spec names its own EK certificate.
    pub fn device(&self, id: &str) -> EdgeAgent {
        let agent = self.agent(id);
        self.apply_node(&agent, agent.identity().ek_cert().clone());
        agent
    }

    /// A device with no EdgeNode yet.
    pub fn agent(&self, id: &str) -> EdgeAgent {
        let addr = format!("local:{id}");
        let agent =
            EdgeAgent::new(id, &addr, &self.manufacturer, self.cluster.clone(), AgentConfig::default()).unwrap();
        self.agents.insert(&addr, Arc::new(agent.clone()) as Arc<dyn AgentApi>);
        agent
    }

    pub fn apply_node(&self, agent: &EdgeAgent, ek_cert: edgetrust::crypto::Certificate) {
        self.cluster
            .apply_edge_node(
                agent.device_id(),
                EdgeNodeSpec {
                    ek_cert,
                    reference_state: golden_reference(),
                    agent_address: agent.address().to_owned(),
                    role_rules: role_rules(),
                },
            )
            .unwrap();
    }

    pub fn reconcile(
        &self,
        name: &str,
    ) -> Result<edgetrust::controller::ReconcileAction, edgetrust::error::ControllerError> {
        let node = self.cluster.edge_node(name).unwrap();
        self.controller.reconcile(&node)
    }

    /// Boot golden components, register, run the controller, attest once.
    pub fn enroll(&self, agent: &EdgeAgent, components: &[BootComponent]) {
        agent.boot_and_register(components, self.registrar.as_ref()).unwrap();
        self.reconcile(agent.device_id()).unwrap();
        let _ = self.verifier.attest_once(agent.device_id());
    }

    pub fn phase(&self, name: &str) -> NodePhase {
        self.cluster.edge_node(name).unwrap().status.phase
    }

    pub fn user_allowed(&self, name: &str) -> Vec<bool> {
        let user = self.controller.user_name(name);
        role_rules().iter().map(|r| self.cluster.check_access(&user, &r.verb, &r.resource).is_allowed()).collect()
    }
}

/// Registrar stand-in returning fixed records.
#[derive(Default)]
pub struct StubRegistrar {
    pub records: Mutex<HashMap<String, DeviceRecord>>,
}

impl RegistrarApi for StubRegistrar {
    fn begin_registration(&self, _req: &BeginRegistration) -> Result<Nonce, RegistrarError> {
        Err(RegistrarError::Transport("stub".into()))
    }

    fn complete_registration(
        &self,
        _device_id: &str,
        _proof: &edgetrust::tpm::PossessionProof,
    ) -> Result<DeviceRecord, RegistrarError> {
        Err(RegistrarError::Transport("stub".into()))
    }

    fn lookup_device(&self, device_id: &str) -> Result<DeviceRecord, RegistrarError> {
        self.records
            .lock()
            .unwrap()
            .get(device_id)
            .cloned()
            .ok_or_else(|| RegistrarError::UnknownDevice(device_id.to_owned()))
    }
}

/// Tenant stand-in that records requests and always succeeds.
#[derive(Default)]
pub struct RecordingTenant {
    pub calls: Mutex<Vec<EnrollmentRequest>>,
}

impl TenantApi for RecordingTenant {
    fn enroll(&self, req: &EnrollmentRequest) -> Result<EnrollmentReceipt, TenantError> {
        self.calls.lock().unwrap().push(req.clone());
        Ok(EnrollmentReceipt {
            enrollment_id: "stub".into(),
            device_id: req.device_id.clone(),
            steps_completed: vec![],
        })
    }
}

// ---------------------------------------------------------------- suites

/// 1000 splits recombine; 100 wrong shares fail authentication at the agent;
/// the agent's recovered plaintext equals the controller's ZIP.
pub fn key_split_suite() -> Result<String, String> {
    let mut keys = HashSet::new();
    for i in 0..1000 {
        let s = split_key();
        let mut xor = [0u8; 32];
        for (j, b) in xor.iter_mut().enumerate() {
            *b = s.agent_share.0[j] ^ s.verifier_share.0[j];
        }
        if xor != s.payload_key.0 {
            return Err(format!("split {i} does not recombine"));
        }
        if s.agent_share == s.payload_key || s.verifier_share == s.payload_key {
            return Err(format!("split {i}: a share equals the key"));
        }
        keys.insert(s.payload_key);
    }
    if keys.len() != 1000 {
        return Err(format!("only {} distinct payload keys in 1000 splits", keys.len()));
    }

    // Wrong shares, delivered through the agent's real endpoint.
    let h = Harness::new();
    let agent = h.agent("edge-ks");
    agent.boot(&golden_components(0)).map_err(|e| e.to_string())?;
    let s = split_key();
    let plaintext = b"PK\x03\x04 payload".to_vec();
    let sealed = seal_payload(&s.payload_key, agent.device_id(), &plaintext);
    let challenge = Nonce::random();
    agent.identity_challenge(&challenge).map_err(|e| e.to_string())?;
    agent
        .deliver_payload(&edgetrust::agent::PayloadDelivery {
            challenge,
            ciphertext: sealed.clone(),
            share: s.agent_share,
        })
        .map_err(|e| e.to_string())?;
    for i in 0..100 {
        let wrong = SymmetricKey::random();
        match agent.deliver_share(&wrong) {
            Err(AgentError::Decryption) => {}
            other => return Err(format!("wrong share {i} gave {other:?}")),
        }
        if open_payload(&(s.agent_share ^ wrong), agent.device_id(), &sealed).is_ok() {
            return Err(format!("wrong share {i} opened the payload"));
        }
    }
    if agent.is_executed() || agent.recovered_payload().is_some() {
        return Err("agent produced plaintext from wrong shares".into());
    }

    // Full enrollment: recovered plaintext vs the controller's ZIP.
    let device = h.device("edge-rt");
    h.enroll(&device, &golden_components(0));
    if !device.wait_executed(Duration::from_secs(5)) {
        return Err(format!("round-trip device never executed: {:?}", device.execution_error()));
    }
    let bundle = h.controller.bundle("edge-rt").ok_or("controller kept no bundle")?;
    let zip = build_payload(&bundle, "edge-rt").map_err(|e| e.to_string())?;
    if device.recovered_payload().as_deref() != Some(zip.as_slice()) {
        return Err("agent plaintext differs from the controller's ZIP".into());
    }
    Ok("1000 splits, 100 wrong shares rejected, ZIP round trip byte-identical".into())
}

/// 200 random chains: replay vs oracle, order permutation, and the
/// allowed-set verdict vs a brute-force oracle.
pub fn pcr_oracle_suite(seed: u64, chains: usize) -> Result<String, String> {
    let mut rng = StdRng::seed_from_u64(seed);
    let alloc = PcrAllocation::default();
    let sel_idx = [0usize, 4, 5, 7];
    let sel = selection(&sel_idx);
    let ca = CertificateAuthority::generate("tpm-manufacturer");
    let ek = generate_endorsement("edge-oracle", &ca).map_err(|e| e.to_string())?;
    let ak = AttestationKey::generate(&ek);
    let mut permuted_differ = 0;
    let mut passes = 0;

    for n in 0..chains {
        let chain = random_chain(&mut rng);
        let mut bank = PcrBank::new();
        let log = simulate_boot(&chain, &mut bank, &alloc).map_err(|e| format!("chain {n}: {e}"))?;

        let extends: Vec<(usize, [u8; 32])> = chain.iter().map(|c| (oracle_pcr(c.stage), c.digest.0)).collect();
        let expected = oracle_registers(&extends);
        let replayed = replay_event_log(&log).map_err(|e| format!("chain {n}: {e}"))?;
        for (i, want) in expected.iter().enumerate() {
            if replayed.read(i).unwrap().0 != *want || bank.read(i).unwrap().0 != *want {
                return Err(format!("chain {n}: pcr {i} disagrees with the oracle"));
            }
        }

        // Permute the extend order and compare with what the oracle predicts.
        let mut perm = extends.clone();
        perm.shuffle(&mut rng);
        let per_pcr = |xs: &[(usize, [u8; 32])]| {
            let mut m: BTreeMap<usize, Vec<[u8; 32]>> = BTreeMap::new();
            for (p, d) in xs {
                m.entry(*p).or_default().push(*d);
            }
            m
        };
        let mut pbank = PcrBank::new();
        for (p, d) in &perm {
            pbank.extend(*p, d).unwrap();
        }
        let differs = (0..PCR_COUNT).any(|i| pbank.read(i).unwrap().0 != expected[i]);
        if differs != (per_pcr(&perm) != per_pcr(&extends)) {
            return Err(format!("chain {n}: permutation result contradicts the oracle"));
        }
        permuted_differ += usize::from(differs);

        // Reference that keeps each measured digest with probability 0.8.
        let mut reference = ReferenceState { allowed: BTreeMap::new(), pcr_selection: sel.clone() };
        for stage in STAGES {
            reference.allow(stage, random_digest(&mut rng));
        }
        let mut all_allowed = true;
        for c in &chain {
            if rng.gen_bool(0.8) {
                reference.allow(c.stage, c.digest);
            } else if !reference.is_allowed(c.stage, &c.digest) {
                all_allowed = false;
            }
        }
        let nonce = Nonce::random();
        let q = quote(&bank, &ak, &nonce, &sel).map_err(|e| e.to_string())?;
        if q.composite.0 != oracle_composite(&expected, &sel_idx) {
            return Err(format!("chain {n}: composite disagrees with the oracle"));
        }
        let verdict = check_reference(&log, &q, &reference, &ak.public(), &ek.ek_public(), &nonce);
        if verdict.passed != all_allowed {
            return Err(format!("chain {n}: verdict {verdict:?}, oracle says passed={all_allowed}"));
        }
        passes += usize::from(verdict.passed);
    }
    Ok(format!("{chains} chains, {permuted_differ} permutations changed registers, {passes} verdicts passed"))
}

/// Random status patches with a synchronously reconciling controller.
/// Returns the number of accepted patches.
pub fn state_machine_fuzz(seed: u64, steps: usize) -> Result<String, String> {
    let mut rng = StdRng::seed_from_u64(seed);
    let cluster = Arc::new(InMemoryCluster::new());
    let manufacturer = CertificateAuthority::generate("tpm-manufacturer");
    let registrar = Arc::new(StubRegistrar::default());
    let tenant = Arc::new(RecordingTenant::default());
    let controller = Controller::new(
        cluster.clone(),
        registrar.clone(),
        tenant,
        ControllerConfig { retries: 1, backoff: Duration::ZERO, ..ControllerConfig::default() },
    );
    let names: Vec<String> = (0..6).map(|i| format!("edge-{i:02}")).collect();
    for name in &names {
        let ek = generate_endorsement(name, &manufacturer).unwrap();
        let ak = AttestationKey::generate(&ek);
        cluster
            .apply_edge_node(
                name,
                EdgeNodeSpec {
                    ek_cert: ek.ek_cert().clone(),
                    reference_state: golden_reference(),
                    agent_address: format!("local:{name}"),
                    role_rules: role_rules(),
                },
            )
            .unwrap();
        registrar.records.lock().unwrap().insert(
            name.clone(),
            DeviceRecord {
                device_id: name.clone(),
                ek_cert: ek.ek_cert().clone(),
                ak: ak.public(),
                agent_address: format!("local:{name}"),
                registered_at: Utc::now(),
            },
        );
    }
    let phases = [NodePhase::Unregistered, NodePhase::Registered, NodePhase::Attested, NodePhase::Unattested];
    let mut accepted = 0;
    let mut replayed = 0;
    let mut last: HashMap<String, ClusterEventKind> = HashMap::new();
    for step in 0..steps {
        let name = &names[rng.gen_range(0..names.len())];
        let phase = phases[rng.gen_range(0..phases.len())];
        let message = if rng.gen_bool(0.2) { String::new() } else { format!("step {step}") };
        if let Ok(node) = cluster.patch_status(name, NodeStatus::new(phase, message)) {
            accepted += 1;
            controller.reconcile(&node).map_err(|e| format!("step {step}: reconcile failed: {e}"))?;
        }
        // Replay new events: the last status event decides the permissions.
        let events = cluster.events();
        for ev in &events[replayed..] {
            if matches!(
                ev.kind,
                ClusterEventKind::Registered | ClusterEventKind::Attested | ClusterEventKind::AttestationFailed
            ) {
                last.insert(ev.subject.clone(), ev.kind);
            }
        }
        replayed = events.len();
        let dump = cluster.dump();
        for n in &names {
            let expected = matches!(last.get(n), Some(ClusterEventKind::Registered | ClusterEventKind::Attested));
            let user = controller.user_name(n);
            for r in role_rules() {
                let got = cluster.check_access(&user, &r.verb, &r.resource).is_allowed();
                if got != expected {
                    return Err(format!("step {step}: {n} access {got}, replayed log says {expected}"));
                }
            }
            let bindings = dump.role_bindings.iter().filter(|b| b.user == user).count();
            if bindings > 1 {
                return Err(format!("step {step}: {n} has {bindings} live rolebindings"));
            }
        }
    }
    for name in &names {
        let node = cluster.edge_node(name).unwrap();
        for w in node.status_history.windows(2) {
            if !w[0].status.phase.can_transition_to(w[1].status.phase) {
                return Err(format!("{name}: illegal {} -> {} in history", w[0].status.phase, w[1].status.phase));
            }
            if w[0].at >= w[1].at {
                return Err(format!("{name}: history not strictly time-ordered"));
            }
        }
        if node.status.phase == NodePhase::Unattested && node.status.message.is_empty() {
            return Err(format!("{name}: Unattested without a message"));
        }
    }
    Ok(format!("{steps} attempts, {accepted} accepted"))
}

/// Cross-device proofs, replayed proofs, and EK-certificate mismatch.
pub fn identity_suite() -> Result<String, String> {
    let manufacturer = CertificateAuthority::generate("tpm-manufacturer");
    let cluster = Arc::new(InMemoryCluster::new());
    let registrar = Registrar::new(manufacturer.anchor(), cluster.clone(), RegistrarConfig::default());
    let ids: Vec<_> = (0..10)
        .map(|i| {
            let ek = generate_endorsement(&format!("edge-{i:02}"), &manufacturer).unwrap();
            let ak = AttestationKey::generate(&ek);
            (ek, ak)
        })
        .collect();
    let begin = |i: usize| {
        registrar.begin_registration(&BeginRegistration {
            device_id: ids[i].0.device_id().to_owned(),
            ek_cert: ids[i].0.ek_cert().clone(),
            ak: ids[i].1.public(),
            agent_address: format!("local:{i}"),
        })
    };
    let mut pairings = 0;
    'outer: for i in 0..10 {
        for j in 0..10 {
            if i == j {
                continue;
            }
            let nonce = begin(i).map_err(|e| e.to_string())?;
            let forged = ids[j].0.prove_possession(&nonce);
            match registrar.complete_registration(ids[i].0.device_id(), &forged) {
                Err(RegistrarError::InvalidProof(_)) => {}
                other => return Err(format!("proof of {j} accepted for {i}: {other:?}")),
            }
            if registrar.lookup_device(ids[i].0.device_id()).is_ok() {
                return Err(format!("record stored for {i} after a forged proof"));
            }
            pairings += 1;
            if pairings == 50 {
                break 'outer;
            }
        }
    }

    // Replay: a successful proof cannot be used again.
    let nonce = begin(0).map_err(|e| e.to_string())?;
    let proof = ids[0].0.prove_possession(&nonce);
    registrar.complete_registration(ids[0].0.device_id(), &proof).map_err(|e| e.to_string())?;
    match registrar.complete_registration(ids[0].0.device_id(), &proof) {
        Err(RegistrarError::NoOutstandingNonce(_)) => {}
        other => return Err(format!("replayed proof without challenge gave {other:?}")),
    }
    begin(0).map_err(|e| e.to_string())?;
    match registrar.complete_registration(ids[0].0.device_id(), &proof) {
        Err(RegistrarError::InvalidProof(_)) => {}
        other => return Err(format!("replayed proof against a new challenge gave {other:?}")),
    }

    // EdgeNode spec carrying another device's EK certificate.
    let h = Harness::new();
    let honest = h.agent("edge-a");
    let other = h.agent("edge-b");
    h.apply_node(&honest, other.identity().ek_cert().clone());
    honest.boot_and_register(&golden_components(0), h.registrar.as_ref()).map_err(|e| e.to_string())?;
    match h.reconcile("edge-a") {
        Err(edgetrust::error::ControllerError::IdentityMismatch(_)) => {}
        other => return Err(format!("mismatched EK certificate gave {other:?}")),
    }
    if h.cluster.get(ResourceKind::User, &h.controller.user_name("edge-a")).is_ok() {
        return Err("credentials issued despite the EK mismatch".into());
    }
    if honest.holds_payload() || h.verifier.inspect("edge-a").is_some() {
        return Err("payload delivered despite the EK mismatch".into());
    }
    if h.cluster.edge_node("edge-a").unwrap().conditions.is_empty() {
        return Err("mismatch not recorded on the resource".into());
    }
    Ok(format!("{pairings} cross-device proofs rejected, replay rejected, EK mismatch aborted"))
}
