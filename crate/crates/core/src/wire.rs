// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 Edgetrust Authors

//! Loopback JSON transport between services.
//!
//! One request per TCP connection, one JSON document per line:
//!
//! ```text
//! -> {"version":1,"op":"lookup","body":{"device_id":"edge-01"}}
//! <- {"version":1,"ok":true,"body":{...}}
//! <- {"version":1,"ok":false,"error":{"UnknownDevice":"edge-01"}}
//! ```
//!
//! `error` is the service's own error enum, so clients get back exactly the
//! value the server-side implementation returned. Protocol-level failures
//! use the `Transport` variant every service error type has.

use std::io::{BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use log::{debug, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agent::{PayloadDelivery, QuoteResponse, ShareAck};
use crate::api::{AgentApi, AgentConnector, RegistrarApi, TenantApi, VerifierApi};
use crate::crypto::Nonce;
use crate::error::{AgentError, RegistrarError, TenantError, TransportError, VerifierError};
use crate::registrar::{BeginRegistration, DeviceRecord};
use crate::tenant::{EnrollmentReceipt, EnrollmentRequest, KeyShare};
use crate::tpm::{PcrIndex, PossessionProof};
use crate::verifier::{MonitorHandle, MonitorRequest};

pub const PROTOCOL_VERSION: u32 = 1;

const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Request {
    version: u32,
    op: String,
    body: Value,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Response {
    version: u32,
    ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    body: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<Value>,
}

impl Response {
    fn ok(body: Value) -> Self {
        Self { version: PROTOCOL_VERSION, ok: true, body: Some(body), error: None }
    }

    fn err(error: Value) -> Self {
        Self { version: PROTOCOL_VERSION, ok: false, body: None, error: Some(error) }
    }

    fn protocol(message: impl Into<String>) -> Self {
        Self::err(serde_json::json!({ "Transport": message.into() }))
    }
}

type Handler = dyn Fn(&str, Value) -> Response + Send + Sync;

/// Decode `body`, run `f`, encode the result.
fn dispatch<B, R, E>(body: Value, f: impl FnOnce(B) -> Result<R, E>) -> Response
where
    B: DeserializeOwned,
    R: Serialize,
    E: Serialize,
{
    let body: B = match serde_json::from_value(body) {
        Ok(b) => b,
        Err(e) => return Response::protocol(format!("malformed body: {e}")),
    };
    match f(body) {
        Ok(r) => serde_json::to_value(r).map(Response::ok).unwrap_or_else(|e| Response::protocol(e.to_string())),
        Err(e) => serde_json::to_value(e).map(Response::err).unwrap_or_else(|e| Response::protocol(e.to_string())),
    }
}

/// A listening service. Dropping it stops accepting connections.
pub struct Server {
    addr: SocketAddr,
    stopping: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl Server {
    fn start(listener: TcpListener, name: &str, handler: Arc<Handler>) -> std::io::Result<Self> {
        let addr = listener.local_addr()?;
        let stopping = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stopping);
        let label = name.to_owned();
        let accept = std::thread::Builder::new().name(format!("{name}-accept")).spawn(move || {
            for conn in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                match conn {
                    Ok(stream) => {
                        let h = Arc::clone(&handler);
                        let _ = std::thread::Builder::new()
                            .name(format!("{label}-conn"))
                            .spawn(move || serve_connection(stream, &*h));
                    }
                    Err(e) => warn!("{label}: accept failed: {e}"),
                }
            }
        })?;
        debug!("{name} listening on {addr}");
        Ok(Self { addr, stopping, accept: Some(accept) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(&mut self) {
        if self.stopping.swap(true, Ordering::SeqCst) {
            return;
        }
        // Wake the blocking accept.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_connection(stream: TcpStream, handler: &Handler) {
    let _ = stream.set_read_timeout(Some(DEFAULT_TIMEOUT));
    let mut reader = BufReader::new(match stream.try_clone() {
        Ok(s) => s,
        Err(_) => return,
    });
    let mut line = String::new();
    if reader.read_line(&mut line).unwrap_or(0) == 0 {
        return;
    }
    let response = match serde_json::from_str::<Request>(&line) {
        Ok(req) if req.version != PROTOCOL_VERSION => {
            Response::protocol(format!("unsupported protocol version {}", req.version))
        }
        Ok(req) => handler(&req.op, req.body),
        Err(e) => Response::protocol(format!("malformed request: {e}")),
    };
    let mut out = serde_json::to_vec(&response).unwrap_or_default();
    out.push(b'\n');
    let mut w = &stream;
    let _ = w.write_all(&out).and_then(|_| w.flush());
    let _ = stream.shutdown(Shutdown::Both);
}

fn round_trip(addr: &str, op: &str, body: Value, timeout: Duration) -> Result<Response, TransportError> {
    let target =
        addr.to_socket_addrs()?.next().ok_or_else(|| TransportError::Protocol(format!("{addr}: no address")))?;
    let stream = TcpStream::connect_timeout(&target, timeout)?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))?;
    let mut line = serde_json::to_vec(&Request { version: PROTOCOL_VERSION, op: op.to_owned(), body })?;
    line.push(b'\n');
    (&stream).write_all(&line)?;
    let mut reader = BufReader::new(&stream);
    let mut reply = String::new();
    if reader.read_line(&mut reply)? == 0 {
        return Err(TransportError::Protocol(format!("{addr}: connection closed without a response")));
    }
    let response: Response = serde_json::from_str(&reply)?;
    if response.version != PROTOCOL_VERSION {
        return Err(TransportError::Protocol(format!("unsupported protocol version {}", response.version)));
    }
    Ok(response)
}

/// Send one request and decode either the result or the service error.
fn call<R, E>(addr: &str, op: &str, body: impl Serialize, timeout: Duration, transport: fn(String) -> E) -> Result<R, E>
where
    R: DeserializeOwned,
    E: DeserializeOwned,
{
    let body = serde_json::to_value(body).map_err(|e| transport(e.to_string()))?;
    let response = round_trip(addr, op, body, timeout).map_err(|e| transport(format!("{addr}: {e}")))?;
    if response.ok {
        serde_json::from_value(response.body.unwrap_or(Value::Null)).map_err(|e| transport(e.to_string()))
    } else {
        let err = response.error.unwrap_or(Value::Null);
        Err(serde_json::from_value(err.clone()).unwrap_or_else(|_| transport(format!("unrecognised error {err}"))))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeviceBody {
    device_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CompleteBody {
    device_id: String,
    proof: PossessionProof,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChallengeBody {
    nonce: Nonce,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuoteBody {
    nonce: Nonce,
    selection: Vec<PcrIndex>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShareBody {
    share: KeyShare,
}

fn unknown_op(op: &str) -> Response {
    Response::protocol(format!("unknown operation {op:?}"))
}

/// Bind an ephemeral loopback port.
pub fn loopback_listener() -> std::io::Result<TcpListener> {
    TcpListener::bind("127.0.0.1:0")
}

pub fn serve_registrar(listener: TcpListener, api: Arc<dyn RegistrarApi>) -> std::io::Result<Server> {
    Server::start(
        listener,
        "registrar",
        Arc::new(move |op: &str, body: Value| match op {
            "begin" => dispatch(body, |b: BeginRegistration| api.begin_registration(&b)),
            "complete" => dispatch(body, |b: CompleteBody| api.complete_registration(&b.device_id, &b.proof)),
            "lookup" => dispatch(body, |b: DeviceBody| api.lookup_device(&b.device_id)),
            _ => unknown_op(op),
        }),
    )
}

pub fn serve_agent(listener: TcpListener, api: Arc<dyn AgentApi>) -> std::io::Result<Server> {
    Server::start(
        listener,
        "agent",
        Arc::new(move |op: &str, body: Value| match op {
            "identity-challenge" => dispatch(body, |b: ChallengeBody| api.identity_challenge(&b.nonce)),
            "quote" => dispatch(body, |b: QuoteBody| api.quote(&b.nonce, &b.selection)),
            "deliver-payload" => dispatch(body, |b: PayloadDelivery| api.deliver_payload(&b)),
            "deliver-share" => dispatch(body, |b: ShareBody| api.deliver_share(&b.share)),
            _ => unknown_op(op),
        }),
    )
}

pub fn serve_tenant(listener: TcpListener, api: Arc<dyn TenantApi>) -> std::io::Result<Server> {
    Server::start(
        listener,
        "tenant",
        Arc::new(move |op: &str, body: Value| match op {
            "enroll" => dispatch(body, |b: EnrollmentRequest| api.enroll(&b)),
            _ => unknown_op(op),
        }),
    )
}

pub fn serve_verifier(listener: TcpListener, api: Arc<dyn VerifierApi>) -> std::io::Result<Server> {
    Server::start(
        listener,
        "verifier",
        Arc::new(move |op: &str, body: Value| match op {
            "add-monitor" => dispatch(body, |b: MonitorRequest| api.add_monitor(&b)),
            _ => unknown_op(op),
        }),
    )
}

#[derive(Debug, Clone)]
pub struct RegistrarClient {
    addr: String,
    timeout: Duration,
}

impl RegistrarClient {
    pub fn new(addr: impl Into<String>) -> Self {
        Self { addr: addr.into(), timeout: DEFAULT_TIMEOUT }
    }
}

impl RegistrarApi for RegistrarClient {
    fn begin_registration(&self, req: &BeginRegistration) -> Result<Nonce, RegistrarError> {
        call(&self.addr, "begin", req, self.timeout, RegistrarError::Transport)
    }

    fn complete_registration(&self, device_id: &str, proof: &PossessionProof) -> Result<DeviceRecord, RegistrarError> {
        let body = CompleteBody { device_id: device_id.to_owned(), proof: proof.clone() };
        call(&self.addr, "complete", body, self.timeout, RegistrarError::Transport)
    }

    fn lookup_device(&self, device_id: &str) -> Result<DeviceRecord, RegistrarError> {
        let body = DeviceBody { device_id: device_id.to_owned() };
        call(&self.addr, "lookup", body, self.timeout, RegistrarError::Transport)
    }
}

#[derive(Debug, Clone)]
pub struct AgentClient {
    addr: String,
    timeout: Duration,
}

impl AgentClient {
    pub fn new(addr: impl Into<String>) -> Self {
        Self { addr: addr.into(), timeout: DEFAULT_TIMEOUT }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

impl AgentApi for AgentClient {
    fn identity_challenge(&self, nonce: &Nonce) -> Result<PossessionProof, AgentError> {
        call(&self.addr, "identity-challenge", ChallengeBody { nonce: *nonce }, self.timeout, AgentError::Transport)
    }

    fn quote(&self, nonce: &Nonce, selection: &[PcrIndex]) -> Result<QuoteResponse, AgentError> {
        let body = QuoteBody { nonce: *nonce, selection: selection.to_vec() };
        call(&self.addr, "quote", body, self.timeout, AgentError::Transport)
    }

    fn deliver_payload(&self, delivery: &PayloadDelivery) -> Result<(), AgentError> {
        call(&self.addr, "deliver-payload", delivery, self.timeout, AgentError::Transport)
    }

    fn deliver_share(&self, share: &KeyShare) -> Result<ShareAck, AgentError> {
        call(&self.addr, "deliver-share", ShareBody { share: *share }, self.timeout, AgentError::Transport)
    }
}

/// Connects to agents by their registered `host:port`.
#[derive(Debug, Clone)]
pub struct TcpAgentConnector {
    timeout: Duration,
}

impl Default for TcpAgentConnector {
    fn default() -> Self {
        Self { timeout: Duration::from_secs(5) }
    }
}

impl TcpAgentConnector {
    pub fn new(timeout: Duration) -> Self {
        Self { timeout }
    }
}

impl AgentConnector for TcpAgentConnector {
    fn connect(&self, address: &str) -> Result<Arc<dyn AgentApi>, AgentError> {
        Ok(Arc::new(AgentClient::new(address).with_timeout(self.timeout)))
    }
}

#[derive(Debug, Clone)]
pub struct TenantClient {
    addr: String,
    timeout: Duration,
}

impl TenantClient {
    pub fn new(addr: impl Into<String>) -> Self {
        Self { addr: addr.into(), timeout: DEFAULT_TIMEOUT }
    }
}

impl TenantApi for TenantClient {
    fn enroll(&self, req: &EnrollmentRequest) -> Result<EnrollmentReceipt, TenantError> {
        call(&self.addr, "enroll", req, self.timeout, TenantError::Transport)
    }
}

#[derive(Debug, Clone)]
pub struct VerifierClient {
    addr: String,
    timeout: Duration,
}

impl VerifierClient {
    pub fn new(addr: impl Into<String>) -> Self {
        Self { addr: addr.into(), timeout: DEFAULT_TIMEOUT }
    }
}

impl VerifierApi for VerifierClient {
    fn add_monitor(&self, req: &MonitorRequest) -> Result<MonitorHandle, VerifierError> {
        call(&self.addr, "add-monitor", req, self.timeout, VerifierError::Transport)
    }
}
