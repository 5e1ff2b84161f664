// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 Edgetrust Authors

//! Simulated TPM: a 24-register PCR bank with extend/reset, an endorsement
//! identity certified by a manufacturer CA, an attestation key bound to the
//! EK, and signed quotes over selected registers.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::crypto::{
    hash_concat, sha256, CanonicalEncoder, Certificate, CertificateAuthority, Digest, HashAlg, KeyPair, Nonce,
    PublicKey, Signature,
};
use crate::error::TpmError;

pub const PCR_COUNT: usize = 24;

/// A validated PCR index in `0..24`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct PcrIndex(u8);

impl PcrIndex {
    pub fn new(index: usize) -> Result<Self, TpmError> {
        if index < PCR_COUNT {
            Ok(Self(index as u8))
        } else {
            Err(TpmError::PcrIndexOutOfRange(index))
        }
    }

    pub fn get(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Debug for PcrIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PCR{}", self.0)
    }
}

impl fmt::Display for PcrIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl<'de> Deserialize<'de> for PcrIndex {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = usize::deserialize(d)?;
        PcrIndex::new(raw).map_err(serde::de::Error::custom)
    }
}

/// One mutation of the bank, in the order it happened.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum PcrEvent {
    Extend { pcr: PcrIndex, digest: Digest },
    Reset { pcr: PcrIndex },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PcrBank {
    hash_alg: HashAlg,
    registers: [Digest; PCR_COUNT],
    history: Vec<PcrEvent>,
}

impl Default for PcrBank {
    fn default() -> Self {
        Self::new()
    }
}

impl PcrBank {
    pub fn new() -> Self {
        Self { hash_alg: HashAlg::Sha256, registers: [Digest::zero(); PCR_COUNT], history: Vec::new() }
    }

    pub fn hash_alg(&self) -> HashAlg {
        self.hash_alg
    }

    /// `register[index] = H(register[index] || digest)`.
    pub fn extend(&mut self, index: usize, digest: &[u8]) -> Result<Digest, TpmError> {
        let pcr = PcrIndex::new(index)?;
        let digest = Digest::from_slice(digest).map_err(|_| TpmError::DigestLength(digest.len()))?;
        Ok(self.extend_pcr(pcr, digest))
    }

    pub fn extend_pcr(&mut self, pcr: PcrIndex, digest: Digest) -> Digest {
        let slot = &mut self.registers[pcr.get()];
        *slot = hash_concat(slot.as_bytes(), digest.as_bytes());
        self.history.push(PcrEvent::Extend { pcr, digest });
        *slot
    }

    pub fn reset(&mut self, index: usize) -> Result<(), TpmError> {
        let pcr = PcrIndex::new(index)?;
        self.registers[pcr.get()] = Digest::zero();
        self.history.push(PcrEvent::Reset { pcr });
        Ok(())
    }

    /// Platform reset: every register back to zero.
    pub fn reset_all(&mut self) {
        for i in 0..PCR_COUNT {
            self.reset(i).expect("index in range");
        }
    }

    pub fn read(&self, index: usize) -> Result<Digest, TpmError> {
        Ok(self.registers[PcrIndex::new(index)?.get()])
    }

    pub fn registers(&self) -> &[Digest; PCR_COUNT] {
        &self.registers
    }

    pub fn history(&self) -> &[PcrEvent] {
        &self.history
    }

    /// Rebuild a bank by applying `history` to a fresh one.
    pub fn replay(history: &[PcrEvent]) -> Self {
        let mut bank = Self::new();
        for event in history {
            match *event {
                PcrEvent::Extend { pcr, digest } => {
                    bank.extend_pcr(pcr, digest);
                }
                PcrEvent::Reset { pcr } => {
                    bank.registers[pcr.get()] = Digest::zero();
                    bank.history.push(PcrEvent::Reset { pcr });
                }
            }
        }
        bank
    }

    pub fn composite(&self, selection: &[PcrIndex]) -> Digest {
        composite_digest(selection.iter().map(|p| &self.registers[p.get()]))
    }
}

/// Hash of the concatenation of register values, in selection order.
pub fn composite_digest<'a>(values: impl IntoIterator<Item = &'a Digest>) -> Digest {
    let mut buf = Vec::with_capacity(32 * 8);
    for v in values {
        buf.extend_from_slice(v.as_bytes());
    }
    sha256(&buf)
}

const POSSESSION_DOMAIN: &str = "edgetrust-ek-possession-v1";
const BINDING_DOMAIN: &str = "edgetrust-ak-binding-v1";
const QUOTE_DOMAIN: &str = "edgetrust-quote-v1";

/// EK keypair plus its manufacturer certificate.
#[derive(Debug, Clone)]
pub struct EndorsementIdentity {
    device_id: String,
    ek: KeyPair,
    ek_cert: Certificate,
}

/// Create a fresh EK for `device_id`, certified by the manufacturer CA.
pub fn generate_endorsement(
    device_id: &str,
    manufacturer: &CertificateAuthority,
) -> Result<EndorsementIdentity, TpmError> {
    if device_id.is_empty() {
        return Err(TpmError::EmptyDeviceId);
    }
    let ek = KeyPair::generate();
    let ek_cert = manufacturer.issue(device_id, &ek.public());
    Ok(EndorsementIdentity { device_id: device_id.to_owned(), ek, ek_cert })
}

impl EndorsementIdentity {
    pub fn device_id(&self) -> &str {
        &self.device_id
    }

    pub fn ek_cert(&self) -> &Certificate {
        &self.ek_cert
    }

    pub fn ek_public(&self) -> PublicKey {
        self.ek.public()
    }

    pub fn prove_possession(&self, nonce: &Nonce) -> PossessionProof {
        PossessionProof {
            hash_alg: HashAlg::Sha256,
            nonce: *nonce,
            signature: self.ek.sign(&possession_message(nonce)),
        }
    }
}

fn possession_message(nonce: &Nonce) -> Vec<u8> {
    let mut enc = CanonicalEncoder::new(POSSESSION_DOMAIN);
    enc.bytes(nonce.as_bytes());
    enc.finish()
}

/// EK signature over a challenge nonce.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PossessionProof {
    pub hash_alg: HashAlg,
    pub nonce: Nonce,
    pub signature: Signature,
}

/// Check that `proof` answers `nonce` and was produced by the key in `ek_cert`.
pub fn verify_possession(ek_cert: &Certificate, nonce: &Nonce, proof: &PossessionProof) -> Result<(), TpmError> {
    if proof.nonce != *nonce {
        return Err(crate::error::CryptoError::BadSignature.into());
    }
    ek_cert.public_key.verify(&possession_message(nonce), &proof.signature)?;
    Ok(())
}

/// Quote-signing key, bound to the EK.
#[derive(Debug, Clone)]
pub struct AttestationKey {
    key: KeyPair,
    binding: Signature,
}

impl AttestationKey {
    pub fn generate(ek: &EndorsementIdentity) -> Self {
        let key = KeyPair::generate();
        let binding = ek.ek.sign(&binding_message(&key.public()));
        Self { key, binding }
    }

    pub fn public(&self) -> AkPublic {
        AkPublic { key: self.key.public(), binding: self.binding }
    }
}

fn binding_message(ak: &PublicKey) -> Vec<u8> {
    let mut enc = CanonicalEncoder::new(BINDING_DOMAIN);
    enc.bytes(&ak.to_bytes());
    enc.finish()
}

/// The public AK together with the EK's signature over it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AkPublic {
    pub key: PublicKey,
    pub binding: Signature,
}

impl AkPublic {
    pub fn verify_binding(&self, ek: &PublicKey) -> Result<(), TpmError> {
        ek.verify(&binding_message(&self.key), &self.binding)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Quote {
    pub hash_alg: HashAlg,
    pub nonce: Nonce,
    pub selection: Vec<PcrIndex>,
    pub composite: Digest,
    pub signature: Signature,
}

fn quote_message(alg: HashAlg, nonce: &Nonce, selection: &[PcrIndex], composite: &Digest) -> Vec<u8> {
    let sel: Vec<u8> = selection.iter().map(|p| p.0).collect();
    let mut enc = CanonicalEncoder::new(QUOTE_DOMAIN);
    enc.str(alg.as_str()).bytes(nonce.as_bytes()).bytes(&sel).bytes(composite.as_bytes());
    enc.finish()
}

/// Sign the current values of `selection` together with `nonce`.
pub fn quote(bank: &PcrBank, ak: &AttestationKey, nonce: &Nonce, selection: &[PcrIndex]) -> Result<Quote, TpmError> {
    if selection.is_empty() {
        return Err(TpmError::EmptySelection);
    }
    let composite = bank.composite(selection);
    let signature = ak.key.sign(&quote_message(bank.hash_alg, nonce, selection, &composite));
    Ok(Quote { hash_alg: bank.hash_alg, nonce: *nonce, selection: selection.to_vec(), composite, signature })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum QuoteFailure {
    #[error("quote signature invalid")]
    BadSignature,
    #[error("attestation key not bound to the ek")]
    BadBinding,
    #[error("quote nonce does not match the challenge")]
    StaleNonce,
}

impl Quote {
    /// Accept iff the AK signature, the AK-to-EK binding and the nonce all check out.
    pub fn verify(&self, ak: &AkPublic, ek: &PublicKey, nonce: &Nonce) -> Result<(), QuoteFailure> {
        ak.key
            .verify(&quote_message(self.hash_alg, &self.nonce, &self.selection, &self.composite), &self.signature)
            .map_err(|_| QuoteFailure::BadSignature)?;
        ak.verify_binding(ek).map_err(|_| QuoteFailure::BadBinding)?;
        if self.nonce != *nonce {
            return Err(QuoteFailure::StaleNonce);
        }
        Ok(())
    }
}
