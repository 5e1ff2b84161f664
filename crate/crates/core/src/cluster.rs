// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 Edgetrust Authors

//! In-memory mock orchestrator.
//!
//! Holds EdgeNode resources and their status state machine, the RBAC tables
//! (users, roles, rolebindings), enrolled worker nodes and an append-only
//! event log. All mutations go through one mutex, so watch notifications and
//! the event log share a single commit order. [`ClusterApi`] is the seam a
//! real orchestrator client would plug into.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Mutex, MutexGuard};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::boot::ReferenceState;
use crate::crypto::{Certificate, CertificateAuthority, PublicKey, TrustAnchor};
use crate::error::ClusterError;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PolicyRule {
    pub verb: String,
    pub resource: String,
}

impl PolicyRule {
    pub fn new(verb: impl Into<String>, resource: impl Into<String>) -> Self {
        Self { verb: verb.into(), resource: resource.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodePhase {
    Unregistered,
    Registered,
    Attested,
    Unattested,
}

impl NodePhase {
    pub fn can_transition_to(self, next: NodePhase) -> bool {
        use NodePhase::*;
        matches!(
            (self, next),
            (Unregistered, Registered)
                | (Registered, Attested)
                | (Registered, Unattested)
                | (Attested, Unattested)
                | (Unattested, Attested)
        )
    }
}

impl fmt::Display for NodePhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeStatus {
    pub phase: NodePhase,
    pub message: String,
}

impl NodeStatus {
    pub fn new(phase: NodePhase, message: impl Into<String>) -> Self {
        Self { phase, message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusEntry {
    pub status: NodeStatus,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeNodeSpec {
    pub ek_cert: Certificate,
    pub reference_state: ReferenceState,
    pub agent_address: String,
    pub role_rules: Vec<PolicyRule>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeNodeResource {
    pub name: String,
    pub spec: EdgeNodeSpec,
    pub status: NodeStatus,
    pub status_history: Vec<StatusEntry>,
    /// Bumped on every accepted status change.
    pub generation: u64,
    /// Free-form condition messages from reconcile failures.
    pub conditions: Vec<String>,
}

impl EdgeNodeResource {
    pub fn new(name: impl Into<String>, spec: EdgeNodeSpec) -> Self {
        Self {
            name: name.into(),
            spec,
            status: NodeStatus::new(NodePhase::Unregistered, "awaiting registration"),
            status_history: Vec::new(),
            generation: 0,
            conditions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Role {
    pub name: String,
    pub rules: Vec<PolicyRule>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleBinding {
    pub name: String,
    pub role: String,
    pub user: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct User {
    pub name: String,
    pub cert: Certificate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerNode {
    pub name: String,
    pub user: String,
    pub enrolled_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResourceKind {
    EdgeNode,
    Role,
    RoleBinding,
    User,
    WorkerNode,
}

impl fmt::Display for ResourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "object")]
pub enum Resource {
    EdgeNode(EdgeNodeResource),
    Role(Role),
    RoleBinding(RoleBinding),
    User(User),
    WorkerNode(WorkerNode),
}

impl Resource {
    pub fn kind(&self) -> ResourceKind {
        match self {
            Resource::EdgeNode(_) => ResourceKind::EdgeNode,
            Resource::Role(_) => ResourceKind::Role,
            Resource::RoleBinding(_) => ResourceKind::RoleBinding,
            Resource::User(_) => ResourceKind::User,
            Resource::WorkerNode(_) => ResourceKind::WorkerNode,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Resource::EdgeNode(r) => &r.name,
            Resource::Role(r) => &r.name,
            Resource::RoleBinding(r) => &r.name,
            Resource::User(r) => &r.name,
            Resource::WorkerNode(r) => &r.name,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClusterEventKind {
    Registered,
    CredentialsIssued,
    PayloadDelivered,
    Attested,
    AttestationFailed,
    PermissionsRevoked,
    WorkerEnrolled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterEvent {
    pub timestamp: DateTime<Utc>,
    pub kind: ClusterEventKind,
    pub subject: String,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChangeType {
    Added,
    Modified,
    Deleted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatchEvent {
    pub revision: u64,
    pub change: ChangeType,
    pub object: Resource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Access {
    Allow,
    Deny,
}

impl Access {
    pub fn is_allowed(self) -> bool {
        self == Access::Allow
    }
}

/// Everything in the cluster, for scenario assertions and export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterDump {
    pub edge_nodes: Vec<EdgeNodeResource>,
    pub users: Vec<User>,
    pub roles: Vec<Role>,
    pub role_bindings: Vec<RoleBinding>,
    pub workers: Vec<WorkerNode>,
    pub events: Vec<ClusterEvent>,
}

pub trait ClusterApi: Send + Sync {
    /// Store a new resource. EdgeNodes always start Unregistered.
    fn apply(&self, resource: Resource) -> Result<Resource, ClusterError>;
    fn get(&self, kind: ResourceKind, name: &str) -> Result<Resource, ClusterError>;
    fn patch_status(&self, name: &str, status: NodeStatus) -> Result<EdgeNodeResource, ClusterError>;
    fn add_condition(&self, name: &str, message: &str) -> Result<(), ClusterError>;
    fn watch(&self, kind: ResourceKind) -> Receiver<WatchEvent>;
    fn sign_csr(&self, public_key: &PublicKey, user_name: &str) -> Result<Certificate, ClusterError>;
    fn create_role(&self, name: &str, rules: &[PolicyRule]) -> Result<Role, ClusterError>;
    fn create_rolebinding(&self, name: &str, role: &str, user: &str) -> Result<RoleBinding, ClusterError>;
    /// Returns whether a binding was actually removed.
    fn delete_rolebinding(&self, name: &str) -> Result<bool, ClusterError>;
    fn check_access(&self, user: &str, verb: &str, resource: &str) -> Access;
    fn register_worker(&self, cert: &Certificate, node_name: &str) -> Result<WorkerNode, ClusterError>;
    fn record_event(&self, kind: ClusterEventKind, subject: &str, detail: &str) -> ClusterEvent;
    fn events(&self) -> Vec<ClusterEvent>;
    fn ca_anchor(&self) -> TrustAnchor;
    fn dump(&self) -> ClusterDump;

    fn edge_node(&self, name: &str) -> Result<EdgeNodeResource, ClusterError> {
        match self.get(ResourceKind::EdgeNode, name)? {
            Resource::EdgeNode(r) => Ok(r),
            _ => unreachable!("get(EdgeNode) returns an EdgeNode"),
        }
    }
}

#[derive(Default)]
struct State {
    edge_nodes: BTreeMap<String, EdgeNodeResource>,
    users: BTreeMap<String, User>,
    roles: BTreeMap<String, Role>,
    bindings: BTreeMap<String, RoleBinding>,
    workers: BTreeMap<String, WorkerNode>,
    events: Vec<ClusterEvent>,
    watchers: Vec<(ResourceKind, Sender<WatchEvent>)>,
    revision: u64,
    last_ts: Option<DateTime<Utc>>,
}

impl State {
    /// Wall-clock time, forced strictly increasing across all commits.
    fn tick(&mut self) -> DateTime<Utc> {
        let now = Utc::now();
        let ts = match self.last_ts {
            Some(last) if now <= last => last + Duration::nanoseconds(1),
            _ => now,
        };
        self.last_ts = Some(ts);
        ts
    }

    fn notify(&mut self, change: ChangeType, object: Resource) {
        self.revision += 1;
        let revision = self.revision;
        let kind = object.kind();
        self.watchers.retain(|(k, tx)| {
            if *k != kind {
                return true;
            }
            tx.send(WatchEvent { revision, change, object: object.clone() }).is_ok()
        });
    }

    fn event(&mut self, kind: ClusterEventKind, subject: &str, detail: &str) -> ClusterEvent {
        let ev = ClusterEvent { timestamp: self.tick(), kind, subject: subject.to_owned(), detail: detail.to_owned() };
        self.events.push(ev.clone());
        ev
    }

    fn allows(&self, user: &str, verb: &str, resource: &str) -> bool {
        self.bindings.values().filter(|b| b.user == user).any(|b| {
            self.roles
                .get(&b.role)
                .is_some_and(|role| role.rules.iter().any(|r| r.verb == verb && r.resource == resource))
        })
    }
}

fn not_found(kind: ResourceKind, name: &str) -> ClusterError {
    ClusterError::NotFound { kind: kind.to_string(), name: name.to_owned() }
}

fn exists(kind: ResourceKind, name: &str) -> ClusterError {
    ClusterError::AlreadyExists { kind: kind.to_string(), name: name.to_owned() }
}

pub struct InMemoryCluster {
    ca: CertificateAuthority,
    state: Mutex<State>,
}

impl Default for InMemoryCluster {
    fn default() -> Self {
        Self::new()
    }
}

impl InMemoryCluster {
    pub fn new() -> Self {
        Self::with_ca(CertificateAuthority::generate("cluster-ca"))
    }

    pub fn with_ca(ca: CertificateAuthority) -> Self {
        Self { ca, state: Mutex::new(State::default()) }
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Event log as JSON lines, one event per line.
    pub fn export_events_jsonl(&self) -> String {
        self.lock().events.iter().map(|e| serde_json::to_string(e).expect("event serializes") + "\n").collect()
    }

    pub fn apply_edge_node(&self, name: &str, spec: EdgeNodeSpec) -> Result<EdgeNodeResource, ClusterError> {
        match self.apply(Resource::EdgeNode(EdgeNodeResource::new(name, spec)))? {
            Resource::EdgeNode(r) => Ok(r),
            _ => unreachable!(),
        }
    }

    fn insert_role(st: &mut State, name: &str, rules: &[PolicyRule]) -> Result<Role, ClusterError> {
        if st.roles.contains_key(name) {
            return Err(exists(ResourceKind::Role, name));
        }
        let role = Role { name: name.to_owned(), rules: rules.to_vec() };
        st.roles.insert(name.to_owned(), role.clone());
        st.notify(ChangeType::Added, Resource::Role(role.clone()));
        Ok(role)
    }

    fn insert_binding(st: &mut State, binding: RoleBinding) -> Result<RoleBinding, ClusterError> {
        if st.bindings.contains_key(&binding.name) {
            return Err(exists(ResourceKind::RoleBinding, &binding.name));
        }
        if !st.roles.contains_key(&binding.role) {
            return Err(ClusterError::DanglingReference(format!("role {:?}", binding.role)));
        }
        if !st.users.contains_key(&binding.user) {
            return Err(ClusterError::DanglingReference(format!("user {:?}", binding.user)));
        }
        st.bindings.insert(binding.name.clone(), binding.clone());
        st.notify(ChangeType::Added, Resource::RoleBinding(binding.clone()));
        Ok(binding)
    }
}

impl ClusterApi for InMemoryCluster {
    fn apply(&self, resource: Resource) -> Result<Resource, ClusterError> {
        let mut st = self.lock();
        match resource {
            Resource::EdgeNode(mut node) => {
                if st.edge_nodes.contains_key(&node.name) {
                    return Err(exists(ResourceKind::EdgeNode, &node.name));
                }
                let at = st.tick();
                node.status = NodeStatus::new(NodePhase::Unregistered, "awaiting registration");
                node.status_history = vec![StatusEntry { status: node.status.clone(), at }];
                node.generation = 1;
                node.conditions.clear();
                st.edge_nodes.insert(node.name.clone(), node.clone());
                st.notify(ChangeType::Added, Resource::EdgeNode(node.clone()));
                Ok(Resource::EdgeNode(node))
            }
            Resource::Role(role) => Self::insert_role(&mut st, &role.name, &role.rules).map(Resource::Role),
            Resource::RoleBinding(b) => Self::insert_binding(&mut st, b).map(Resource::RoleBinding),
            Resource::User(_) => Err(ClusterError::NotApplicable("User (use sign_csr)".into())),
            Resource::WorkerNode(_) => Err(ClusterError::NotApplicable("WorkerNode (use register_worker)".into())),
        }
    }

    fn get(&self, kind: ResourceKind, name: &str) -> Result<Resource, ClusterError> {
        let st = self.lock();
        let found = match kind {
            ResourceKind::EdgeNode => st.edge_nodes.get(name).cloned().map(Resource::EdgeNode),
            ResourceKind::Role => st.roles.get(name).cloned().map(Resource::Role),
            ResourceKind::RoleBinding => st.bindings.get(name).cloned().map(Resource::RoleBinding),
            ResourceKind::User => st.users.get(name).cloned().map(Resource::User),
            ResourceKind::WorkerNode => st.workers.get(name).cloned().map(Resource::WorkerNode),
        };
        found.ok_or_else(|| not_found(kind, name))
    }

    fn patch_status(&self, name: &str, status: NodeStatus) -> Result<EdgeNodeResource, ClusterError> {
        let mut st = self.lock();
        let current = st.edge_nodes.get(name).ok_or_else(|| not_found(ResourceKind::EdgeNode, name))?.status.phase;
        if !current.can_transition_to(status.phase) {
            return Err(ClusterError::IllegalTransition { from: current, to: status.phase });
        }
        if status.phase == NodePhase::Unattested && status.message.is_empty() {
            return Err(ClusterError::InvalidStatus("Unattested requires a reason message".into()));
        }
        let at = st.tick();
        let node = st.edge_nodes.get_mut(name).expect("checked above");
        node.status = status.clone();
        node.status_history.push(StatusEntry { status: status.clone(), at });
        node.generation += 1;
        let snapshot = node.clone();
        let kind = match status.phase {
            NodePhase::Registered => ClusterEventKind::Registered,
            NodePhase::Attested => ClusterEventKind::Attested,
            NodePhase::Unattested => ClusterEventKind::AttestationFailed,
            NodePhase::Unregistered => unreachable!("no transition into Unregistered"),
        };
        st.event(kind, name, &status.message);
        st.notify(ChangeType::Modified, Resource::EdgeNode(snapshot.clone()));
        Ok(snapshot)
    }

    fn add_condition(&self, name: &str, message: &str) -> Result<(), ClusterError> {
        let mut st = self.lock();
        let node = st.edge_nodes.get_mut(name).ok_or_else(|| not_found(ResourceKind::EdgeNode, name))?;
        node.conditions.push(message.to_owned());
        Ok(())
    }

    fn watch(&self, kind: ResourceKind) -> Receiver<WatchEvent> {
        let (tx, rx) = channel();
        self.lock().watchers.push((kind, tx));
        rx
    }

    fn sign_csr(&self, public_key: &PublicKey, user_name: &str) -> Result<Certificate, ClusterError> {
        let mut st = self.lock();
        if let Some(existing) = st.users.get(user_name) {
            if existing.cert.public_key != *public_key {
                return Err(ClusterError::NameCollision(user_name.to_owned()));
            }
            return Ok(existing.cert.clone());
        }
        let cert = self.ca.issue(user_name, public_key);
        let user = User { name: user_name.to_owned(), cert: cert.clone() };
        st.users.insert(user_name.to_owned(), user.clone());
        st.notify(ChangeType::Added, Resource::User(user));
        Ok(cert)
    }

    fn create_role(&self, name: &str, rules: &[PolicyRule]) -> Result<Role, ClusterError> {
        Self::insert_role(&mut self.lock(), name, rules)
    }

    fn create_rolebinding(&self, name: &str, role: &str, user: &str) -> Result<RoleBinding, ClusterError> {
        let binding = RoleBinding { name: name.to_owned(), role: role.to_owned(), user: user.to_owned() };
        Self::insert_binding(&mut self.lock(), binding)
    }

    fn delete_rolebinding(&self, name: &str) -> Result<bool, ClusterError> {
        let mut st = self.lock();
        match st.bindings.remove(name) {
            Some(b) => {
                st.notify(ChangeType::Deleted, Resource::RoleBinding(b));
                Ok(true)
            }
            None => Ok(false),
        }
    }

    fn check_access(&self, user: &str, verb: &str, resource: &str) -> Access {
        if self.lock().allows(user, verb, resource) {
            Access::Allow
        } else {
            Access::Deny
        }
    }

    fn register_worker(&self, cert: &Certificate, node_name: &str) -> Result<WorkerNode, ClusterError> {
        cert.verify(&self.ca.anchor()).map_err(|e| ClusterError::BadCertificate(e.to_string()))?;
        let mut st = self.lock();
        let user = &cert.subject;
        match st.users.get(user) {
            Some(u) if u.cert.public_key == cert.public_key => {}
            _ => return Err(ClusterError::BadCertificate(format!("no user {user:?} with this key"))),
        }
        if !st.allows(user, "create", "node") {
            return Err(ClusterError::AccessDenied {
                user: user.clone(),
                verb: "create".into(),
                resource: "node".into(),
            });
        }
        if let Some(existing) = st.workers.get(node_name) {
            if existing.user == *user {
                return Ok(existing.clone());
            }
            return Err(exists(ResourceKind::WorkerNode, node_name));
        }
        let ev = st.event(ClusterEventKind::WorkerEnrolled, node_name, &format!("user {user}"));
        let worker = WorkerNode { name: node_name.to_owned(), user: user.clone(), enrolled_at: ev.timestamp };
        st.workers.insert(node_name.to_owned(), worker.clone());
        st.notify(ChangeType::Added, Resource::WorkerNode(worker.clone()));
        Ok(worker)
    }

    fn record_event(&self, kind: ClusterEventKind, subject: &str, detail: &str) -> ClusterEvent {
        self.lock().event(kind, subject, detail)
    }

    fn events(&self) -> Vec<ClusterEvent> {
        self.lock().events.clone()
    }

    fn ca_anchor(&self) -> TrustAnchor {
        self.ca.anchor()
    }

    fn dump(&self) -> ClusterDump {
        let st = self.lock();
        ClusterDump {
            edge_nodes: st.edge_nodes.values().cloned().collect(),
            users: st.users.values().cloned().collect(),
            roles: st.roles.values().cloned().collect(),
            role_bindings: st.bindings.values().cloned().collect(),
            workers: st.workers.values().cloned().collect(),
            events: st.events.clone(),
        }
    }
}
