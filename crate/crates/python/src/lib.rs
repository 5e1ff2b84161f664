// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 Edgetrust Authors

//! Python bindings for the edgetrust core: PCR banks, simulated devices,
//! reference appraisal, payload key splitting and the scenario runner.

// The pymethods expansion triggers this lint on every PyResult signature.
#![allow(clippy::useless_conversion)]

use std::str::FromStr;
use std::time::Duration;

use edgetrust::boot::{self, BootComponent, BootEventLog, BootStage, PcrAllocation, ReferenceState};
use edgetrust::crypto::{CertificateAuthority, Nonce, SymmetricKey};
use edgetrust::scenario::{self, ReportFormat, ScenarioConfig, ScenarioKind, ScenarioReport, TransportMode};
use edgetrust::tenant;
use edgetrust::tpm::{self, AttestationKey, EndorsementIdentity};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

fn parse_stage(s: &str) -> PyResult<BootStage> {
    BootStage::parse(s).ok_or_else(|| value_err(format!("unknown boot stage {s:?}")))
}

fn parse_reference(json: &str) -> PyResult<ReferenceState> {
    boot::parse_reference_state(json.as_bytes()).map_err(value_err)
}

/// A bank of 24 SHA-256 registers.
#[pyclass(module = "edgetrust_py")]
#[derive(Clone, Default)]
struct PcrBank {
    inner: tpm::PcrBank,
}

#[pymethods]
impl PcrBank {
    #[new]
    fn new() -> Self {
        Self::default()
    }

    /// Extend register `index` with a 32-byte digest; returns the new value as hex.
    fn extend(&mut self, index: usize, digest: &[u8]) -> PyResult<String> {
        self.inner.extend(index, digest).map(|d| d.to_hex()).map_err(value_err)
    }

    fn read(&self, index: usize) -> PyResult<String> {
        self.inner.read(index).map(|d| d.to_hex()).map_err(value_err)
    }

    fn reset(&mut self, index: usize) -> PyResult<()> {
        self.inner.reset(index).map_err(value_err)
    }

    fn composite(&self, selection: Vec<usize>) -> PyResult<String> {
        let sel = selection.into_iter().map(tpm::PcrIndex::new).collect::<Result<Vec<_>, _>>().map_err(value_err)?;
        Ok(self.inner.composite(&sel).to_hex())
    }

    fn __repr__(&self) -> String {
        format!("PcrBank(pcr0={}…)", &self.inner.read(0).map(|d| d.to_hex()).unwrap_or_default()[..16])
    }
}

/// A simulated TPM-equipped device with a manufacturer-issued EK and an AK.
#[pyclass(module = "edgetrust_py")]
struct Device {
    ek: EndorsementIdentity,
    ak: AttestationKey,
    bank: tpm::PcrBank,
    log: BootEventLog,
}

#[pymethods]
impl Device {
    #[new]
    fn new(device_id: &str) -> PyResult<Self> {
        let ca = CertificateAuthority::generate("tpm-manufacturer");
        let ek = tpm::generate_endorsement(device_id, &ca).map_err(value_err)?;
        let ak = AttestationKey::generate(&ek);
        Ok(Self { ek, ak, bank: tpm::PcrBank::new(), log: BootEventLog::default() })
    }

    #[getter]
    fn device_id(&self) -> String {
        self.ek.device_id().to_owned()
    }

    /// Boot `(stage, name, content)` components; returns the event log as JSON.
    fn boot(&mut self, components: Vec<(String, String, Vec<u8>)>) -> PyResult<String> {
        let chain = components
            .into_iter()
            .map(|(stage, name, content)| Ok(BootComponent::from_content(parse_stage(&stage)?, name, &content)))
            .collect::<PyResult<Vec<_>>>()?;
        let mut bank = tpm::PcrBank::new();
        let log = boot::simulate_boot(&chain, &mut bank, &PcrAllocation::default()).map_err(value_err)?;
        self.bank = bank;
        self.log = log;
        to_json(&self.log)
    }

    /// Boot the golden image for `seed`, or the image with an unknown kernel.
    #[pyo3(signature = (seed=0, tampered=false))]
    fn boot_image(&mut self, seed: u64, tampered: bool) -> PyResult<String> {
        let chain = if tampered { scenario::tampered_components(seed) } else { scenario::golden_components(seed) };
        let mut bank = tpm::PcrBank::new();
        self.log = boot::simulate_boot(&chain, &mut bank, &PcrAllocation::default()).map_err(value_err)?;
        self.bank = bank;
        to_json(&self.log)
    }

    fn pcrs(&self) -> PcrBank {
        PcrBank { inner: self.bank.clone() }
    }

    /// Quote the reference's selection with a fresh nonce and appraise it.
    /// Returns the verdict as JSON.
    fn attest(&self, reference_json: &str) -> PyResult<String> {
        let reference = parse_reference(reference_json)?;
        let nonce = Nonce::random();
        let quote = tpm::quote(&self.bank, &self.ak, &nonce, &reference.pcr_selection).map_err(value_err)?;
        let verdict =
            boot::check_reference(&self.log, &quote, &reference, &self.ak.public(), &self.ek.ek_public(), &nonce);
        to_json(&verdict)
    }
}

/// Reference state accepting exactly the golden image for `seed`.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn golden_reference(seed: u64) -> PyResult<String> {
    let r = ReferenceState::from_components(&scenario::golden_components(seed), PcrAllocation::default().selection());
    Ok(String::from_utf8_lossy(&boot::serialize_reference_state(&r)).into_owned())
}

/// Validate and normalise a reference-state document.
#[pyfunction]
fn normalize_reference(json: &str) -> PyResult<String> {
    let r = parse_reference(json)?;
    r.validate().map_err(value_err)?;
    Ok(String::from_utf8_lossy(&boot::serialize_reference_state(&r)).into_owned())
}

#[pyfunction]
fn sha256_hex(data: &[u8]) -> String {
    edgetrust::crypto::sha256(data).to_hex()
}

/// Returns `(payload_key, agent_share, verifier_share)` as hex.
#[pyfunction]
fn split_key() -> (String, String, String) {
    let s = tenant::split_key();
    (s.payload_key.to_hex(), s.agent_share.to_hex(), s.verifier_share.to_hex())
}

#[pyfunction]
fn combine_shares(agent_share: &str, verifier_share: &str) -> PyResult<String> {
    let a = SymmetricKey::from_hex(agent_share).map_err(value_err)?;
    let b = SymmetricKey::from_hex(verifier_share).map_err(value_err)?;
    Ok((a ^ b).to_hex())
}

#[pyfunction]
fn seal_payload<'py>(py: Python<'py>, key: &str, device_id: &str, plaintext: &[u8]) -> PyResult<Bound<'py, PyBytes>> {
    let key = SymmetricKey::from_hex(key).map_err(value_err)?;
    Ok(PyBytes::new_bound(py, &tenant::seal_payload(&key, device_id, plaintext)))
}

#[pyfunction]
fn open_payload<'py>(py: Python<'py>, key: &str, device_id: &str, sealed: &[u8]) -> PyResult<Bound<'py, PyBytes>> {
    let key = SymmetricKey::from_hex(key).map_err(value_err)?;
    let pt = tenant::open_payload(&key, device_id, sealed).map_err(|_| value_err("payload authentication failed"))?;
    Ok(PyBytes::new_bound(py, &pt))
}

/// Run a scenario and return the JSON report. Releases the GIL while running.
#[pyfunction]
#[pyo3(signature = (
    scenario, devices=1, poll_interval_ms=2000, repetitions=1, seed=0,
    worker_startup_delay_ms=0, transport="tcp", concurrency=1, timeout_s=60
))]
#[allow(clippy::too_many_arguments)]
fn run_scenario(
    py: Python<'_>,
    scenario: &str,
    devices: usize,
    poll_interval_ms: u64,
    repetitions: usize,
    seed: u64,
    worker_startup_delay_ms: u64,
    transport: &str,
    concurrency: usize,
    timeout_s: u64,
) -> PyResult<String> {
    let cfg = ScenarioConfig {
        scenario: ScenarioKind::from_str(scenario).map_err(value_err)?,
        devices,
        poll_interval: Duration::from_millis(poll_interval_ms),
        worker_startup_delay: Duration::from_millis(worker_startup_delay_ms),
        repetitions,
        seed,
        run_timeout: Duration::from_secs(timeout_s),
        transport: TransportMode::from_str(transport).map_err(value_err)?,
        concurrency,
        ..ScenarioConfig::default()
    };
    let report = py.allow_threads(|| scenario::run_scenario(&cfg)).map_err(value_err)?;
    to_json(&report)
}

/// Render a JSON report as `json` or `table`.
#[pyfunction]
#[pyo3(signature = (report_json, format="table"))]
fn render_report(report_json: &str, format: &str) -> PyResult<String> {
    let report: ScenarioReport = serde_json::from_str(report_json).map_err(value_err)?;
    let format = ReportFormat::from_str(format).map_err(value_err)?;
    Ok(String::from_utf8_lossy(&scenario::emit_report(&report, format)).into_owned())
}

#[pyfunction]
fn scenarios() -> Vec<&'static str> {
    ScenarioKind::ALL.iter().map(|k| k.as_str()).collect()
}

#[pymodule]
fn edgetrust_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PcrBank>()?;
    m.add_class::<Device>()?;
    m.add_function(wrap_pyfunction!(golden_reference, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_reference, m)?)?;
    m.add_function(wrap_pyfunction!(sha256_hex, m)?)?;
    m.add_function(wrap_pyfunction!(split_key, m)?)?;
    m.add_function(wrap_pyfunction!(combine_shares, m)?)?;
    m.add_function(wrap_pyfunction!(seal_payload, m)?)?;
    m.add_function(wrap_pyfunction!(open_payload, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(render_report, m)?)?;
    m.add_function(wrap_pyfunction!(scenarios, m)?)?;
    Ok(())
}
