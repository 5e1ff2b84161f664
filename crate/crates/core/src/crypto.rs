// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 Edgetrust Authors

//! Fixed-width byte types, hashing, signing keys and the minimal certificate
//! format shared by the simulated TPM manufacturer CA and the cluster CA.
//!
//! Every signed structure is encoded with [`CanonicalEncoder`], a
//! length-prefixed binary layout that is byte-stable for the lifetime of a
//! run, so that signatures computed on one side verify on the other.

use std::fmt;

use ed25519_dalek::{Signer, Verifier};
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};

use crate::error::CryptoError;

/// Identifier of the digest function used for every PCR, quote and log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum HashAlg {
    #[default]
    Sha256,
}

impl HashAlg {
    pub fn as_str(self) -> &'static str {
        match self {
            HashAlg::Sha256 => "sha256",
        }
    }
}

/// Decode a lowercase hex string into exactly `N` bytes.
pub fn decode_hex_array<const N: usize>(s: &str) -> Result<[u8; N], CryptoError> {
    if !s.len().is_multiple_of(2) {
        return Err(CryptoError::Hex(format!("odd hex length {}", s.len())));
    }
    if s.bytes().any(|b| b.is_ascii_uppercase()) {
        return Err(CryptoError::Hex("uppercase hex is not canonical".into()));
    }
    if s.len() != N * 2 {
        return Err(CryptoError::Hex(format!("expected {} hex characters, got {}", N * 2, s.len())));
    }
    let mut out = [0u8; N];
    hex::decode_to_slice(s, &mut out).map_err(|e| CryptoError::Hex(e.to_string()))?;
    Ok(out)
}

macro_rules! bytes32_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
        pub struct $name(pub [u8; 32]);

        impl $name {
            pub const LEN: usize = 32;

            pub fn zero() -> Self {
                Self([0u8; 32])
            }

            pub fn as_bytes(&self) -> &[u8; 32] {
                &self.0
            }

            pub fn from_slice(bytes: &[u8]) -> Result<Self, CryptoError> {
                let arr: [u8; 32] = bytes
                    .try_into()
                    .map_err(|_| CryptoError::Length { expected: 32, actual: bytes.len() })?;
                Ok(Self(arr))
            }

            pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
                decode_hex_array::<32>(s).map(Self)
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }

            pub fn random() -> Self {
                let mut b = [0u8; 32];
                OsRng.fill_bytes(&mut b);
                Self(b)
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self.to_hex())
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }

        impl From<[u8; 32]> for $name {
            fn from(b: [u8; 32]) -> Self {
                Self(b)
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_hex())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                Self::from_hex(&s).map_err(serde::de::Error::custom)
            }
        }
    };
}

bytes32_newtype!(
    /// A 32-byte SHA-256 output: PCR values, component measurements, composites.
    Digest
);
bytes32_newtype!(
    /// A 32-byte freshness challenge.
    Nonce
);
bytes32_newtype!(
    /// A 32-byte symmetric key, or one XOR share of one.
    SymmetricKey
);

impl std::ops::BitXor for SymmetricKey {
    type Output = SymmetricKey;

    fn bitxor(self, rhs: Self) -> Self {
        let mut out = [0u8; 32];
        for (o, (a, b)) in out.iter_mut().zip(self.0.iter().zip(rhs.0.iter())) {
            *o = a ^ b;
        }
        SymmetricKey(out)
    }
}

pub fn sha256(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// `H(left || right)`, the PCR extend primitive.
pub fn hash_concat(left: &[u8], right: &[u8]) -> Digest {
    let mut h = Sha256::new();
    h.update(left);
    h.update(right);
    Digest(h.finalize().into())
}

/// Length-prefixed binary encoder for signed payloads.
#[derive(Default)]
pub struct CanonicalEncoder {
    buf: Vec<u8>,
}

impl CanonicalEncoder {
    pub fn new(domain: &str) -> Self {
        let mut enc = Self { buf: Vec::new() };
        enc.bytes(domain.as_bytes());
        enc
    }

    pub fn bytes(&mut self, data: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(&(data.len() as u32).to_be_bytes());
        self.buf.extend_from_slice(data);
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.bytes(s.as_bytes())
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

struct CanonicalDecoder<'a> {
    buf: &'a [u8],
}

impl<'a> CanonicalDecoder<'a> {
    fn bytes(&mut self) -> Result<&'a [u8], CryptoError> {
        if self.buf.len() < 4 {
            return Err(CryptoError::Malformed("truncated length prefix".into()));
        }
        let (len, rest) = self.buf.split_at(4);
        let len = u32::from_be_bytes(len.try_into().expect("4 bytes")) as usize;
        if rest.len() < len {
            return Err(CryptoError::Malformed("truncated field".into()));
        }
        let (field, rest) = rest.split_at(len);
        self.buf = rest;
        Ok(field)
    }

    fn string(&mut self) -> Result<String, CryptoError> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| CryptoError::Malformed("field is not utf-8".into()))
    }
}

/// Ed25519 verifying key.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct PublicKey(ed25519_dalek::VerifyingKey);

impl PublicKey {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; 32] = bytes.try_into().map_err(|_| CryptoError::Length { expected: 32, actual: bytes.len() })?;
        ed25519_dalek::VerifyingKey::from_bytes(&arr)
            .map(Self)
            .map_err(|_| CryptoError::Malformed("invalid public key".into()))
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.0.to_bytes()
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.to_bytes())
    }

    pub fn verify(&self, message: &[u8], sig: &Signature) -> Result<(), CryptoError> {
        self.0.verify(message, &sig.0).map_err(|_| CryptoError::BadSignature)
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", self.to_hex())
    }
}

impl Serialize for PublicKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for PublicKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let raw = decode_hex_array::<32>(&s).map_err(serde::de::Error::custom)?;
        PublicKey::from_bytes(&raw).map_err(serde::de::Error::custom)
    }
}

/// Ed25519 signature, hex encoded on the wire.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature(ed25519_dalek::Signature);

impl Signature {
    pub fn to_bytes(&self) -> [u8; 64] {
        self.0.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; 64] = bytes.try_into().map_err(|_| CryptoError::Length { expected: 64, actual: bytes.len() })?;
        Ok(Self(ed25519_dalek::Signature::from_bytes(&arr)))
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({})", hex::encode(self.to_bytes()))
    }
}

impl Serialize for Signature {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.to_bytes()))
    }
}

impl<'de> Deserialize<'de> for Signature {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let raw = decode_hex_array::<64>(&s).map_err(serde::de::Error::custom)?;
        Ok(Signature(ed25519_dalek::Signature::from_bytes(&raw)))
    }
}

/// Ed25519 signing keypair.
#[derive(Clone)]
pub struct KeyPair(ed25519_dalek::SigningKey);

impl KeyPair {
    pub fn generate() -> Self {
        Self(ed25519_dalek::SigningKey::generate(&mut OsRng))
    }

    pub fn from_secret_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; 32] = bytes.try_into().map_err(|_| CryptoError::Length { expected: 32, actual: bytes.len() })?;
        Ok(Self(ed25519_dalek::SigningKey::from_bytes(&arr)))
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.0.to_bytes()
    }

    pub fn public(&self) -> PublicKey {
        PublicKey(self.0.verifying_key())
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        Signature(self.0.sign(message))
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair").field("public", &self.public()).finish_non_exhaustive()
    }
}

const CERT_DOMAIN: &str = "edgetrust-cert-v1";

/// A certificate binding `subject` to `public_key`, signed by `issuer`.
///
/// The canonical byte form (see [`Certificate::to_bytes`]) is what gets
/// compared when two parties must agree on "the same certificate".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Certificate {
    pub subject: String,
    pub issuer: String,
    pub public_key: PublicKey,
    pub signature: Signature,
}

impl Certificate {
    fn tbs(subject: &str, issuer: &str, key: &PublicKey) -> Vec<u8> {
        let mut enc = CanonicalEncoder::new(CERT_DOMAIN);
        enc.str(subject).str(issuer).bytes(&key.to_bytes());
        enc.finish()
    }

    /// Verify the signature under `anchor`, including the issuer name.
    pub fn verify(&self, anchor: &TrustAnchor) -> Result<(), CryptoError> {
        if self.issuer != anchor.name {
            return Err(CryptoError::UnknownIssuer(self.issuer.clone()));
        }
        anchor.key.verify(&Self::tbs(&self.subject, &self.issuer, &self.public_key), &self.signature)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = CanonicalEncoder::new(CERT_DOMAIN);
        enc.str(&self.subject).str(&self.issuer).bytes(&self.public_key.to_bytes()).bytes(&self.signature.to_bytes());
        enc.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let mut dec = CanonicalDecoder { buf: bytes };
        if dec.bytes()? != CERT_DOMAIN.as_bytes() {
            return Err(CryptoError::Malformed("not a certificate".into()));
        }
        let subject = dec.string()?;
        let issuer = dec.string()?;
        let public_key = PublicKey::from_bytes(dec.bytes()?)?;
        let signature = Signature::from_bytes(dec.bytes()?)?;
        if !dec.buf.is_empty() {
            return Err(CryptoError::Malformed("trailing bytes after certificate".into()));
        }
        Ok(Self { subject, issuer, public_key, signature })
    }
}

/// Public half of a certificate authority.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrustAnchor {
    pub name: String,
    pub key: PublicKey,
}

/// A run-scoped in-memory certificate authority.
#[derive(Debug, Clone)]
pub struct CertificateAuthority {
    name: String,
    keypair: KeyPair,
}

impl CertificateAuthority {
    pub fn generate(name: impl Into<String>) -> Self {
        Self { name: name.into(), keypair: KeyPair::generate() }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn anchor(&self) -> TrustAnchor {
        TrustAnchor { name: self.name.clone(), key: self.keypair.public() }
    }

    pub fn issue(&self, subject: &str, key: &PublicKey) -> Certificate {
        let signature = self.keypair.sign(&Certificate::tbs(subject, &self.name, key));
        Certificate { subject: subject.to_owned(), issuer: self.name.clone(), public_key: *key, signature }
    }
}

/// Serde adapter: `Vec<u8>` as standard base64.
pub mod base64_bytes {
    use base64::{engine::general_purpose::STANDARD, Engine as _};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        STANDARD.decode(s).map_err(serde::de::Error::custom)
    }
}
