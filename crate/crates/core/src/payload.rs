// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 Edgetrust Authors

//! Layout of the enrollment ZIP shared by the controller (which builds it)
//! and the agent (which unpacks and executes it).
//!
//! ```text
//! credentials.json   {"user_name", "cert", "private_key", "role_name"}
//! enroll.cfg         node_name = <target node name>
//! ```
//!
//! Entries are stored uncompressed, in that order, with the minimum DOS
//! timestamp, so the same inputs always give the same bytes.

use std::io::{Cursor, Read, Write};

use serde::{Deserialize, Serialize};
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, DateTime, ZipArchive, ZipWriter};

use crate::crypto::Certificate;

pub const CREDENTIALS_ENTRY: &str = "credentials.json";
pub const ENROLL_ENTRY: &str = "enroll.cfg";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CredentialsFile {
    pub user_name: String,
    pub cert: Certificate,
    /// Hex-encoded private key of the worker identity.
    pub private_key: String,
    pub role_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnrollConfig {
    pub node_name: String,
}

impl EnrollConfig {
    pub fn render(&self) -> String {
        format!("node_name = {}\n", self.node_name)
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut node_name = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| format!("enroll.cfg: expected key = value, got {line:?}"))?;
            match k.trim() {
                "node_name" => node_name = Some(v.trim().to_owned()),
                other => return Err(format!("enroll.cfg: unknown key {other:?}")),
            }
        }
        node_name
            .filter(|n| !n.is_empty())
            .map(|node_name| Self { node_name })
            .ok_or_else(|| "enroll.cfg: missing node_name".to_owned())
    }
}

pub fn build_zip(credentials: &CredentialsFile, enroll: &EnrollConfig) -> Result<Vec<u8>, String> {
    let opts = SimpleFileOptions::default()
        .compression_method(CompressionMethod::Stored)
        .last_modified_time(DateTime::default())
        .unix_permissions(0o600);
    let creds = serde_json::to_vec_pretty(credentials).map_err(|e| e.to_string())?;
    let mut zip = ZipWriter::new(Cursor::new(Vec::new()));
    let mut put = |name: &str, data: &[u8]| -> Result<(), String> {
        zip.start_file(name, opts).map_err(|e| e.to_string())?;
        zip.write_all(data).map_err(|e| e.to_string())
    };
    put(CREDENTIALS_ENTRY, &creds)?;
    put(ENROLL_ENTRY, enroll.render().as_bytes())?;
    Ok(zip.finish().map_err(|e| e.to_string())?.into_inner())
}

pub fn unpack_zip(bytes: &[u8]) -> Result<(CredentialsFile, EnrollConfig), String> {
    let mut archive = ZipArchive::new(Cursor::new(bytes)).map_err(|e| e.to_string())?;
    let mut read = |name: &str| -> Result<Vec<u8>, String> {
        let mut f = archive.by_name(name).map_err(|e| format!("{name}: {e}"))?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf).map_err(|e| e.to_string())?;
        Ok(buf)
    };
    let creds: CredentialsFile =
        serde_json::from_slice(&read(CREDENTIALS_ENTRY)?).map_err(|e| format!("{CREDENTIALS_ENTRY}: {e}"))?;
    let cfg = String::from_utf8(read(ENROLL_ENTRY)?).map_err(|e| e.to_string())?;
    Ok((creds, EnrollConfig::parse(&cfg)?))
}

/// Entry names in archive order.
pub fn zip_entries(bytes: &[u8]) -> Result<Vec<String>, String> {
    let mut archive = ZipArchive::new(Cursor::new(bytes)).map_err(|e| e.to_string())?;
    (0..archive.len()).map(|i| archive.by_index(i).map(|f| f.name().to_owned()).map_err(|e| e.to_string())).collect()
}
