// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 Edgetrust Authors

//! Scenario harness: wires every service plus N simulated devices, drives
//! one of the canned scenarios, and checks its postconditions.
//!
//! Every run gets a fresh world. With [`TransportMode::Tcp`] the registrar,
//! tenant, verifier and each agent listen on their own loopback port and
//! talk through [`crate::wire`]; the cluster stays in-process.
//!
//! Metrics are measured from `t0`, the moment the agent starts booting and
//! registering:
//!
//! | field                 | end point                                      |
//! |-----------------------|------------------------------------------------|
//! | `time_to_registered_s`| Registered status patch                        |
//! | `time_to_attested_s`  | Attested status patch                          |
//! | `enrollment_total_s`  | agent finished executing the payload           |
//! | `time_to_revoked_s`   | Unattested patch, from t0 or from the reboot   |
//! | `revocation_lag_s`    | PermissionsRevoked event after the Unattested patch |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use log::info;
use rand::rngs::StdRng;
use rand::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::agent::{AgentConfig, EdgeAgent};
use crate::api::{AgentApi, AgentConnector, LocalAgents, RegistrarApi, TenantApi, VerifierApi};
use crate::boot::{AttestationVerdict, BootComponent, BootStage, PcrAllocation, ReferenceState};
use crate::cluster::{
    ClusterApi, ClusterEvent, ClusterEventKind, EdgeNodeSpec, InMemoryCluster, NodePhase, PolicyRule, ResourceKind,
};
use crate::controller::{Controller, ControllerConfig};
use crate::crypto::CertificateAuthority;
use crate::error::ScenarioError;
use crate::registrar::{Registrar, RegistrarConfig};
use crate::task::BackgroundTask;
use crate::tenant::Tenant;
use crate::verifier::{Verifier, VerifierConfig};
use crate::wire::{
    loopback_listener, serve_agent, serve_registrar, serve_tenant, serve_verifier, RegistrarClient, Server,
    TcpAgentConnector, TenantClient, VerifierClient,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    HappyPath,
    BadInitialBoot,
    CompromiseAfterAttest,
    Benchmark,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::HappyPath,
        ScenarioKind::BadInitialBoot,
        ScenarioKind::CompromiseAfterAttest,
        ScenarioKind::Benchmark,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::HappyPath => "happy-path",
            ScenarioKind::BadInitialBoot => "bad-initial-boot",
            ScenarioKind::CompromiseAfterAttest => "compromise-after-attest",
            ScenarioKind::Benchmark => "benchmark",
        }
    }
}

impl FromStr for ScenarioKind {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| ScenarioError::Config(format!("unknown scenario {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransportMode {
    Tcp,
    InProcess,
}

impl FromStr for TransportMode {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tcp" => Ok(TransportMode::Tcp),
            "in-process" => Ok(TransportMode::InProcess),
            other => Err(ScenarioError::Config(format!("unknown transport {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub scenario: ScenarioKind,
    pub devices: usize,
    pub poll_interval: Duration,
    pub worker_startup_delay: Duration,
    pub repetitions: usize,
    pub seed: u64,
    pub run_timeout: Duration,
    pub transport: TransportMode,
    /// Runs executed at the same time. Each run still has its own world.
    pub concurrency: usize,
    pub role_rules: Vec<PolicyRule>,
    pub webhook_url: Option<String>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioKind::HappyPath,
            devices: 1,
            poll_interval: Duration::from_secs(2),
            worker_startup_delay: Duration::ZERO,
            repetitions: 1,
            seed: 0,
            run_timeout: Duration::from_secs(60),
            transport: TransportMode::Tcp,
            concurrency: 1,
            role_rules: default_role_rules(),
            webhook_url: None,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::Config(m.to_owned()));
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1");
        }
        if self.devices == 0 {
            return bad("devices must be at least 1");
        }
        if self.poll_interval.is_zero() {
            return bad("poll interval must be positive");
        }
        if self.concurrency == 0 {
            return bad("concurrency must be at least 1");
        }
        if !self.role_rules.iter().any(|r| r.verb == "create" && r.resource == "node") {
            return bad("role rules must include (create, node) so the worker can join");
        }
        Ok(())
    }
}

/// Rules granted to every enrolled edge user.
pub fn default_role_rules() -> Vec<PolicyRule> {
    vec![PolicyRule::new("create", "node"), PolicyRule::new("get", "pod"), PolicyRule::new("list", "configmap")]
}

/// The reference-approved firmware image, derived from `seed`.
pub fn golden_components(seed: u64) -> Vec<BootComponent> {
    let mut rng = StdRng::seed_from_u64(seed);
    [
        (BootStage::Crtm, "crtm"),
        (BootStage::Firmware, "uefi-firmware"),
        (BootStage::Bootloader, "grub"),
        (BootStage::Kernel, "vmlinuz"),
        (BootStage::Keys, "secureboot-db"),
    ]
    .into_iter()
    .map(|(stage, name)| {
        let mut content = [0u8; 32];
        rng.fill_bytes(&mut content);
        BootComponent::from_content(stage, name, &content)
    })
    .collect()
}

/// The golden image with its kernel replaced by one the reference does not know.
pub fn tampered_components(seed: u64) -> Vec<BootComponent> {
    let mut rng = StdRng::seed_from_u64(seed ^ 0x6b65_726e_656c);
    golden_components(seed)
        .into_iter()
        .map(|c| {
            if c.stage == BootStage::Kernel {
                let mut content = [0u8; 32];
                rng.fill_bytes(&mut content);
                BootComponent::from_content(BootStage::Kernel, "vmlinuz-unknown", &content)
            } else {
                c
            }
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub time_to_registered_s: Option<f64>,
    pub time_to_attested_s: Option<f64>,
    pub time_to_revoked_s: Option<f64>,
    pub revocation_lag_s: Option<f64>,
    pub enrollment_total_s: Option<f64>,
}

impl RunMetrics {
    fn named(&self) -> [(&'static str, Option<f64>); 5] {
        [
            ("time_to_registered_s", self.time_to_registered_s),
            ("time_to_attested_s", self.time_to_attested_s),
            ("time_to_revoked_s", self.time_to_revoked_s),
            ("revocation_lag_s", self.revocation_lag_s),
            ("enrollment_total_s", self.enrollment_total_s),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceOutcome {
    pub device_id: String,
    pub final_phase: NodePhase,
    pub status_message: String,
    pub last_verdict: Option<AttestationVerdict>,
    pub executed: bool,
    pub worker_enrolled: bool,
    pub shares_received: u32,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run: usize,
    pub passed: bool,
    pub failures: Vec<String>,
    pub wall_time_s: f64,
    pub devices: Vec<DeviceOutcome>,
    pub timeline: Vec<ClusterEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub scenario: ScenarioKind,
    pub devices: usize,
    pub poll_interval_ms: u64,
    pub worker_startup_delay_ms: u64,
    pub repetitions: usize,
    pub seed: u64,
    pub transport: TransportMode,
    pub concurrency: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub config: ReportConfig,
    pub passed: bool,
    pub runs_passed: usize,
    pub aggregate: BTreeMap<String, MetricStats>,
    pub runs: Vec<RunReport>,
}

pub fn metric_stats(values: &[f64]) -> MetricStats {
    let n = values.len();
    if n == 0 {
        return MetricStats { n, mean: 0.0, std: 0.0 };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std =
        if n < 2 { 0.0 } else { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() };
    MetricStats { n, mean, std }
}

/// Mean and std of every metric over all devices of all runs.
pub fn aggregate(runs: &[RunReport]) -> BTreeMap<String, MetricStats> {
    let mut values: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    for d in runs.iter().flat_map(|r| &r.devices) {
        for (name, v) in d.metrics.named() {
            let slot = values.entry(name).or_default();
            slot.extend(v);
        }
    }
    values.into_iter().filter(|(_, v)| !v.is_empty()).map(|(k, v)| (k.to_owned(), metric_stats(&v))).collect()
}

/// All services for one run. Dropping it stops every thread it started.
struct World {
    cluster: Arc<InMemoryCluster>,
    registrar: Arc<dyn RegistrarApi>,
    verifier: Arc<Verifier>,
    agents: Vec<EdgeAgent>,
    _tasks: Vec<BackgroundTask>,
    _servers: Vec<Server>,
}

impl Drop for World {
    fn drop(&mut self) {
        self.verifier.shutdown();
    }
}

fn startup(what: &str) -> impl Fn(std::io::Error) -> ScenarioError + '_ {
    move |e| ScenarioError::Startup(format!("{what}: {e}"))
}

impl World {
    fn build(cfg: &ScenarioConfig, reference: &ReferenceState) -> Result<Self, ScenarioError> {
        let cluster = Arc::new(InMemoryCluster::new());
        let cluster_dyn: Arc<dyn ClusterApi> = cluster.clone();
        let manufacturer = CertificateAuthority::generate("tpm-manufacturer");
        let tcp = cfg.transport == TransportMode::Tcp;
        let mut servers = Vec::new();
        let mut tasks = Vec::new();

        let registrar =
            Arc::new(Registrar::new(manufacturer.anchor(), cluster_dyn.clone(), RegistrarConfig::default()));
        tasks.push(registrar.spawn_watch());
        let registrar_api: Arc<dyn RegistrarApi> = if tcp {
            let server = serve_registrar(loopback_listener().map_err(startup("registrar"))?, registrar.clone())
                .map_err(startup("registrar"))?;
            let client = Arc::new(RegistrarClient::new(server.addr().to_string()));
            servers.push(server);
            client
        } else {
            registrar.clone()
        };

        let agent_config = AgentConfig {
            worker_startup_delay: cfg.worker_startup_delay,
            registration_backoff: Duration::from_millis(200),
            ..AgentConfig::default()
        };
        let local = Arc::new(LocalAgents::new());
        let mut agents = Vec::with_capacity(cfg.devices);
        for i in 1..=cfg.devices {
            let device_id = format!("edge-{i:02}");
            let agent = if tcp {
                let listener = loopback_listener().map_err(startup("agent"))?;
                let addr = listener.local_addr().map_err(startup("agent"))?.to_string();
                let agent =
                    EdgeAgent::new(&device_id, &addr, &manufacturer, cluster_dyn.clone(), agent_config.clone())?;
                servers.push(serve_agent(listener, Arc::new(agent.clone())).map_err(startup("agent"))?);
                agent
            } else {
                let addr = format!("local:{device_id}");
                let agent =
                    EdgeAgent::new(&device_id, &addr, &manufacturer, cluster_dyn.clone(), agent_config.clone())?;
                local.insert(&addr, Arc::new(agent.clone()) as Arc<dyn AgentApi>);
                agent
            };
            agents.push(agent);
        }
        let connector: Arc<dyn AgentConnector> = if tcp { Arc::new(TcpAgentConnector::default()) } else { local };

        let verifier = Arc::new(Verifier::new(
            cluster_dyn.clone(),
            connector.clone(),
            VerifierConfig {
                poll_interval: cfg.poll_interval,
                webhook_url: cfg.webhook_url.clone(),
                ..VerifierConfig::default()
            },
        ));
        let verifier_api: Arc<dyn VerifierApi> = if tcp {
            let server = serve_verifier(loopback_listener().map_err(startup("verifier"))?, verifier.clone())
                .map_err(startup("verifier"))?;
            let client = Arc::new(VerifierClient::new(server.addr().to_string()));
            servers.push(server);
            client
        } else {
            verifier.clone()
        };

        let tenant = Arc::new(Tenant::new(registrar_api.clone(), connector, verifier_api, cluster_dyn.clone()));
        let tenant_api: Arc<dyn TenantApi> = if tcp {
            let server =
                serve_tenant(loopback_listener().map_err(startup("tenant"))?, tenant).map_err(startup("tenant"))?;
            let client = Arc::new(TenantClient::new(server.addr().to_string()));
            servers.push(server);
            client
        } else {
            tenant
        };

        let controller = Arc::new(Controller::new(
            cluster_dyn.clone(),
            registrar_api.clone(),
            tenant_api,
            ControllerConfig { backoff: Duration::from_millis(500), ..ControllerConfig::default() },
        ));
        tasks.extend(controller.spawn());

        for agent in &agents {
            cluster.apply_edge_node(
                agent.device_id(),
                EdgeNodeSpec {
                    ek_cert: agent.identity().ek_cert().clone(),
                    reference_state: reference.clone(),
                    agent_address: agent.address().to_owned(),
                    role_rules: cfg.role_rules.clone(),
                },
            )?;
        }
        Ok(Self { cluster, registrar: registrar_api, verifier, agents, _tasks: tasks, _servers: servers })
    }
}

fn secs_between(from: DateTime<Utc>, to: DateTime<Utc>) -> f64 {
    (to - from).num_nanoseconds().unwrap_or(i64::MAX) as f64 / 1e9
}

/// Poll `probe` every few milliseconds until it yields a value or the run deadline passes.
fn wait_for<T>(
    run: usize,
    started: Instant,
    deadline: Instant,
    what: &str,
    mut probe: impl FnMut() -> Option<T>,
) -> Result<T, ScenarioError> {
    loop {
        if let Some(v) = probe() {
            return Ok(v);
        }
        if Instant::now() >= deadline {
            return Err(ScenarioError::Timeout {
                run,
                seconds: started.elapsed().as_secs_f64(),
                waiting_for: what.to_owned(),
            });
        }
        std::thread::sleep(Duration::from_millis(5));
    }
}

fn phase_of(cluster: &InMemoryCluster, name: &str) -> Option<NodePhase> {
    cluster.edge_node(name).ok().map(|n| n.status.phase)
}

fn status_time(cluster: &InMemoryCluster, name: &str, phase: NodePhase) -> Option<DateTime<Utc>> {
    cluster.edge_node(name).ok()?.status_history.iter().find(|e| e.status.phase == phase).map(|e| e.at)
}

fn event_time(events: &[ClusterEvent], kind: ClusterEventKind, subject: &str) -> Option<DateTime<Utc>> {
    events.iter().find(|e| e.kind == kind && e.subject == subject).map(|e| e.timestamp)
}

struct DeviceRun {
    t0: DateTime<Utc>,
    compromised_at: Option<DateTime<Utc>>,
}

/// Drive one device through the scenario. Waiting ends at the postcondition
/// the scenario is about; the checks happen afterwards on the quiet world.
fn drive_device(
    cfg: &ScenarioConfig,
    world: &World,
    agent: &EdgeAgent,
    run: usize,
    started: Instant,
    deadline: Instant,
) -> Result<DeviceRun, ScenarioError> {
    let name = agent.device_id().to_owned();
    let first_boot = match cfg.scenario {
        ScenarioKind::BadInitialBoot => tampered_components(cfg.seed),
        _ => golden_components(cfg.seed),
    };
    let t0 = Utc::now();
    agent.boot_and_register(&first_boot, world.registrar.as_ref())?;
    let cluster = &world.cluster;
    let revoked = |what: &str| {
        wait_for(run, started, deadline, what, || {
            (phase_of(cluster, &name) == Some(NodePhase::Unattested)
                && event_time(&cluster.events(), ClusterEventKind::PermissionsRevoked, &name).is_some())
            .then_some(())
        })
    };
    let enrolled = |what: &str| {
        wait_for(run, started, deadline, what, || match phase_of(cluster, &name) {
            Some(NodePhase::Unattested) => Some(()),
            Some(NodePhase::Attested) if agent.is_executed() => Some(()),
            _ => None,
        })
    };
    let mut compromised_at = None;
    match cfg.scenario {
        ScenarioKind::HappyPath | ScenarioKind::Benchmark => enrolled(&format!("{name} to enroll"))?,
        ScenarioKind::BadInitialBoot => revoked(&format!("{name} to be revoked"))?,
        ScenarioKind::CompromiseAfterAttest => {
            enrolled(&format!("{name} to enroll"))?;
            if phase_of(cluster, &name) == Some(NodePhase::Attested) {
                compromised_at = Some(Utc::now());
                agent.boot(&tampered_components(cfg.seed))?;
                revoked(&format!("{name} to be revoked after compromise"))?;
            }
        }
    }
    Ok(DeviceRun { t0, compromised_at })
}

fn check_device(
    cfg: &ScenarioConfig,
    world: &World,
    agent: &EdgeAgent,
    dr: Option<&DeviceRun>,
    events: &[ClusterEvent],
    failures: &mut Vec<String>,
) -> DeviceOutcome {
    let name = agent.device_id();
    let cluster = &world.cluster;
    let node = cluster.edge_node(name).ok();
    let final_phase = node.as_ref().map_or(NodePhase::Unregistered, |n| n.status.phase);
    let status_message = node.as_ref().map(|n| n.status.message.clone()).unwrap_or_default();
    let worker_enrolled = cluster.get(ResourceKind::WorkerNode, name).is_ok();
    let user = format!("edge-user-{name}");
    let allowed: Vec<bool> =
        cfg.role_rules.iter().map(|r| cluster.check_access(&user, &r.verb, &r.resource).is_allowed()).collect();
    let mut fail = |m: String| failures.push(format!("{name}: {m}"));

    let mut metrics = RunMetrics::default();
    let registered_at = status_time(cluster, name, NodePhase::Registered);
    let attested_at = status_time(cluster, name, NodePhase::Attested);
    let unattested_at = status_time(cluster, name, NodePhase::Unattested);
    let revoked_at = event_time(events, ClusterEventKind::PermissionsRevoked, name);
    if let Some(dr) = dr {
        metrics.time_to_registered_s = registered_at.map(|t| secs_between(dr.t0, t));
        metrics.time_to_attested_s = attested_at.map(|t| secs_between(dr.t0, t));
        metrics.enrollment_total_s = agent.executed_at().map(|t| secs_between(dr.t0, t));
        let revoke_from = dr.compromised_at.unwrap_or(dr.t0);
        metrics.time_to_revoked_s = unattested_at.map(|t| secs_between(revoke_from, t));
    }
    metrics.revocation_lag_s = unattested_at.zip(revoked_at).map(|(u, r)| secs_between(u, r));

    let kernel_reason = "digest-not-allowed:kernel";
    match cfg.scenario {
        ScenarioKind::HappyPath | ScenarioKind::Benchmark => {
            if final_phase != NodePhase::Attested {
                fail(format!("final status {final_phase} ({status_message}), expected Attested"));
            }
            if !agent.is_executed() {
                fail("payload not executed".into());
            }
            if !worker_enrolled {
                fail("no worker node".into());
            }
            if allowed.iter().any(|a| !a) {
                fail("attested user lacks some role rules".into());
            }
            let order = [
                ClusterEventKind::Registered,
                ClusterEventKind::CredentialsIssued,
                ClusterEventKind::PayloadDelivered,
                ClusterEventKind::Attested,
                ClusterEventKind::WorkerEnrolled,
            ];
            let times: Vec<Option<DateTime<Utc>>> = order.iter().map(|k| event_time(events, *k, name)).collect();
            if times.iter().any(Option::is_none) {
                fail(format!("timeline incomplete: {times:?}"));
            } else if times.windows(2).any(|w| w[0] >= w[1]) {
                fail("timeline out of order".into());
            }
        }
        ScenarioKind::BadInitialBoot => {
            if final_phase != NodePhase::Unattested || status_message != kernel_reason {
                fail(format!("final status {final_phase} ({status_message}), expected Unattested ({kernel_reason})"));
            }
            if agent.is_executed() || agent.shares_received() > 0 {
                fail("agent received the verifier's share".into());
            }
            if allowed.iter().any(|a| *a) {
                fail("unattested user still has permissions".into());
            }
            if event_time(events, ClusterEventKind::WorkerEnrolled, name).is_some() || worker_enrolled {
                fail("worker enrolled".into());
            }
            if event_time(events, ClusterEventKind::AttestationFailed, name).is_none() || revoked_at.is_none() {
                fail("timeline lacks AttestationFailed or PermissionsRevoked".into());
            }
        }
        ScenarioKind::CompromiseAfterAttest => {
            if final_phase != NodePhase::Unattested || status_message != kernel_reason {
                fail(format!("final status {final_phase} ({status_message}), expected Unattested ({kernel_reason})"));
            }
            if !agent.is_executed() {
                fail("never enrolled before the compromise".into());
            }
            if allowed.iter().any(|a| *a) {
                fail("revoked user still has permissions".into());
            }
            let enrolled = event_time(events, ClusterEventKind::WorkerEnrolled, name);
            let failed = event_time(events, ClusterEventKind::AttestationFailed, name);
            match (enrolled, failed) {
                (Some(e), Some(f)) if e < f => {}
                _ => fail("WorkerEnrolled does not precede AttestationFailed".into()),
            }
            let bound = 2.0 * cfg.poll_interval.as_secs_f64();
            match metrics.time_to_revoked_s {
                Some(t) if t <= bound => {}
                Some(t) => fail(format!("detection took {t:.3}s, bound {bound}s")),
                None => fail("compromise never detected".into()),
            }
            match metrics.revocation_lag_s {
                Some(t) if t <= 1.0 => {}
                Some(t) => fail(format!("permissions revoked {t:.3}s after the patch, bound 1s")),
                None => fail("permissions never revoked".into()),
            }
        }
    }

    DeviceOutcome {
        device_id: name.to_owned(),
        final_phase,
        status_message,
        last_verdict: world.verifier.inspect(name).and_then(|s| s.last_verdict),
        executed: agent.is_executed(),
        worker_enrolled,
        shares_received: agent.shares_received(),
        metrics,
    }
}

/// One repetition in a fresh world.
pub fn run_once(cfg: &ScenarioConfig, run: usize) -> Result<RunReport, ScenarioError> {
    let started = Instant::now();
    let deadline = started + cfg.run_timeout;
    let golden = golden_components(cfg.seed);
    let reference = ReferenceState::from_components(&golden, PcrAllocation::default().selection());
    let world = World::build(cfg, &reference)?;

    let mut failures = Vec::new();
    let driven: Vec<Result<DeviceRun, ScenarioError>> = std::thread::scope(|s| {
        let handles: Vec<_> = world
            .agents
            .iter()
            .map(|agent| s.spawn(|| drive_device(cfg, &world, agent, run, started, deadline)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(ScenarioError::Startup("device thread panicked".into()))))
            .collect()
    });
    let wall_time_s = started.elapsed().as_secs_f64();
    let events = world.cluster.events();
    let devices = world
        .agents
        .iter()
        .zip(&driven)
        .map(|(agent, dr)| {
            if let Err(e) = dr {
                failures.push(format!("{}: {e}", agent.device_id()));
            }
            check_device(cfg, &world, agent, dr.as_ref().ok(), &events, &mut failures)
        })
        .collect();
    drop(world);
    Ok(RunReport { run, passed: failures.is_empty(), failures, wall_time_s, devices, timeline: events })
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioReport, ScenarioError> {
    cfg.validate()?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Result<RunReport, ScenarioError>>> = Mutex::new(Vec::with_capacity(cfg.repetitions));
    std::thread::scope(|s| {
        for _ in 0..cfg.concurrency.min(cfg.repetitions) {
            s.spawn(|| loop {
                let run = next.fetch_add(1, Ordering::SeqCst);
                if run >= cfg.repetitions {
                    break;
                }
                let r = run_once(cfg, run);
                if let Ok(report) = &r {
                    info!("{} run {run}: {}", cfg.scenario.as_str(), if report.passed { "pass" } else { "FAIL" });
                }
                results.lock().unwrap_or_else(|e| e.into_inner()).push(r);
            });
        }
    });
    let mut runs = Vec::with_capacity(cfg.repetitions);
    for r in results.into_inner().unwrap_or_else(|e| e.into_inner()) {
        runs.push(r?);
    }
    runs.sort_by_key(|r| r.run);
    let runs_passed = runs.iter().filter(|r| r.passed).count();
    Ok(ScenarioReport {
        config: ReportConfig {
            scenario: cfg.scenario,
            devices: cfg.devices,
            poll_interval_ms: cfg.poll_interval.as_millis() as u64,
            worker_startup_delay_ms: cfg.worker_startup_delay.as_millis() as u64,
            repetitions: cfg.repetitions,
            seed: cfg.seed,
            transport: cfg.transport,
            concurrency: cfg.concurrency,
        },
        passed: runs_passed == runs.len(),
        runs_passed,
        aggregate: aggregate(&runs),
        runs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Table,
}

impl FromStr for ReportFormat {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "table" => Ok(ReportFormat::Table),
            other => Err(ScenarioError::Config(format!("unknown format {other:?}"))),
        }
    }
}

pub fn emit_report(report: &ScenarioReport, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Json => {
            let mut out = serde_json::to_vec_pretty(report).expect("report serializes");
            out.push(b'\n');
            out
        }
        ReportFormat::Table => render_table(report).into_bytes(),
    }
}

fn render_table(report: &ScenarioReport) -> String {
    let c = &report.config;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "scenario {}  devices {}  poll {} ms  startup delay {} ms  seed {}",
        c.scenario.as_str(),
        c.devices,
        c.poll_interval_ms,
        c.worker_startup_delay_ms,
        c.seed
    );
    let _ = writeln!(
        s,
        "runs passed {}/{}  => {}\n",
        report.runs_passed,
        report.runs.len(),
        if report.passed { "PASS" } else { "FAIL" }
    );
    let _ = writeln!(s, "{:<22} {:>5} {:>12} {:>12}", "metric", "n", "mean (s)", "std (s)");
    for (name, m) in &report.aggregate {
        let _ = writeln!(s, "{name:<22} {:>5} {:>12.4} {:>12.4}", m.n, m.mean, m.std);
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "{:>4}  {:<6} {:>9}  final statuses / failures", "run", "result", "wall (s)");
    for r in &report.runs {
        let statuses: Vec<String> = r
            .devices
            .iter()
            .map(|d| format!("{}={}{}", d.device_id, d.final_phase, if d.executed { "+worker" } else { "" }))
            .collect();
        let _ = writeln!(
            s,
            "{:>4}  {:<6} {:>9.3}  {}",
            r.run,
            if r.passed { "pass" } else { "FAIL" },
            r.wall_time_s,
            statuses.join(" ")
        );
        for f in &r.failures {
            let _ = writeln!(s, "      - {f}");
        }
    }
    s
}
