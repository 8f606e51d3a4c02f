// SPDX-License-Identifier: Apache-2.0

//! Measurements, the seed-derived attestation key and signed reports.
//!
//! Digests are SHA-256. The attestation key is an Ed25519 key whose secret
//! is HKDF-SHA256 output keyed by the endorsement seed, with the boot
//! measurements as context, so a different seed or a different boot chain
//! yields an unrelated key.
//!
//! # Report record
//!
//! [`AttestationReport::to_record`] renders a report as `key=value` lines:
//!
//! ```text
//! scheme=ed25519
//! key_id=<16 hex digits>
//! measurement=<64 hex digits>
//! nonce=<hex>
//! boot=<component>:<64 hex digits>     (one line per boot measurement, in order)
//! signature=<128 hex digits>
//! ```

use std::fmt;

use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use hkdf::Hkdf;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::hw::{HwError, Platform};
use crate::{PAGE_SIZE, SEED_LEN};

pub use ed25519_dalek::VerifyingKey as PublicKey;

pub const SIGNATURE_SCHEME: &str = "ed25519";
/// Label of the key derived from the seed and the boot chain.
pub const KEY_LABEL: &str = "seed+boot-chain";
const KDF_SALT: &[u8] = b"cvm-model/attestation-key/v1";
const REPORT_TAG: &[u8] = b"cvm-model/report/v1";

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum AttestationError {
    #[error("endorsement seed is locked")]
    SeedLocked,
    #[error(transparent)]
    Hw(HwError),
    #[error("malformed report record: {0}")]
    Malformed(String),
}

impl From<HwError> for AttestationError {
    fn from(e: HwError) -> Self {
        match e {
            HwError::SeedLocked => AttestationError::SeedLocked,
            other => AttestationError::Hw(other),
        }
    }
}

/// 256-bit digest.
#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, String> {
        let bytes = hex::decode(s).map_err(|e| e.to_string())?;
        let arr: [u8; 32] = bytes.try_into().map_err(|_| "digest must be 32 bytes".to_string())?;
        Ok(Digest(arr))
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..16])
    }
}

pub fn measure(bytes: &[u8]) -> Digest {
    Digest(Sha256::digest(bytes).into())
}

/// Measurement of a guest image: page count (little-endian u64) followed by
/// the pages in ascending guest-page order.
pub fn measure_pages<'a>(pages: impl IntoIterator<Item = &'a [u8]>) -> Digest {
    let pages: Vec<&[u8]> = pages.into_iter().collect();
    let mut h = Sha256::new();
    h.update((pages.len() as u64).to_le_bytes());
    for page in pages {
        debug_assert_eq!(page.len() as u64, PAGE_SIZE);
        h.update(page);
    }
    Digest(h.finalize().into())
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Measurement {
    pub subject: String,
    pub digest: Digest,
}

impl Measurement {
    pub fn of(subject: &str, bytes: &[u8]) -> Self {
        Self { subject: subject.to_string(), digest: measure(bytes) }
    }
}

fn chain_context(boot: &[Measurement]) -> Vec<u8> {
    let mut info = Vec::new();
    info.extend_from_slice(&(boot.len() as u64).to_le_bytes());
    for m in boot {
        info.extend_from_slice(&(m.subject.len() as u64).to_le_bytes());
        info.extend_from_slice(m.subject.as_bytes());
        info.extend_from_slice(&m.digest.0);
    }
    info
}

/// Signing key derived from the endorsement seed.
#[derive(Clone)]
pub struct AttestationKey {
    signing: SigningKey,
    label: String,
}

impl fmt::Debug for AttestationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AttestationKey").field("id", &self.id()).field("label", &self.label).finish()
    }
}

impl AttestationKey {
    pub fn from_secret(secret: [u8; 32], label: &str) -> Self {
        Self { signing: SigningKey::from_bytes(&secret), label: label.to_string() }
    }

    pub fn secret(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }

    pub fn public(&self) -> PublicKey {
        self.signing.verifying_key()
    }

    pub fn id(&self) -> String {
        key_id(&self.public())
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn sign_report(&self, measurement: Digest, nonce: &[u8], boot: &[Measurement]) -> AttestationReport {
        let mut report = AttestationReport {
            key_id: self.id(),
            measurement,
            nonce: nonce.to_vec(),
            boot_chain: boot.to_vec(),
            signature: [0u8; 64],
        };
        report.signature = self.signing.sign(&report.signed_bytes()).to_bytes();
        report
    }
}

/// Short identifier of a public key: first 8 bytes of its SHA-256.
pub fn key_id(public: &PublicKey) -> String {
    hex::encode(&Sha256::digest(public.as_bytes())[..8])
}

pub fn derive_attestation_key(seed: &[u8; SEED_LEN], boot: &[Measurement]) -> AttestationKey {
    let hk = Hkdf::<Sha256>::new(Some(KDF_SALT), seed);
    let mut okm = [0u8; 32];
    hk.expand(&chain_context(boot), &mut okm).expect("32 bytes is a valid HKDF length");
    AttestationKey::from_secret(okm, KEY_LABEL)
}

/// Reads the seed (fails once locked) and derives the key.
pub fn derive_from_platform(
    platform: &mut Platform,
    hart: usize,
    boot: &[Measurement],
) -> Result<AttestationKey, AttestationError> {
    let seed = platform.read_seed(hart)?;
    Ok(derive_attestation_key(&seed, boot))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttestationReport {
    pub key_id: String,
    pub measurement: Digest,
    pub nonce: Vec<u8>,
    pub boot_chain: Vec<Measurement>,
    pub signature: [u8; 64],
}

impl AttestationReport {
    fn signed_bytes(&self) -> Vec<u8> {
        let mut msg = REPORT_TAG.to_vec();
        msg.extend_from_slice(&(self.key_id.len() as u64).to_le_bytes());
        msg.extend_from_slice(self.key_id.as_bytes());
        msg.extend_from_slice(&self.measurement.0);
        msg.extend_from_slice(&(self.nonce.len() as u64).to_le_bytes());
        msg.extend_from_slice(&self.nonce);
        msg.extend_from_slice(&chain_context(&self.boot_chain));
        msg
    }

    pub fn to_record(&self) -> String {
        let mut out = format!(
            "scheme={SIGNATURE_SCHEME}\nkey_id={}\nmeasurement={}\nnonce={}\n",
            self.key_id,
            self.measurement,
            hex::encode(&self.nonce)
        );
        for m in &self.boot_chain {
            out.push_str(&format!("boot={}:{}\n", m.subject, m.digest));
        }
        out.push_str(&format!("signature={}\n", hex::encode(self.signature)));
        out
    }

    pub fn from_record(text: &str) -> Result<Self, AttestationError> {
        let bad = |m: String| AttestationError::Malformed(m);
        let mut key_id = None;
        let mut measurement = None;
        let mut nonce = None;
        let mut boot_chain = Vec::new();
        let mut signature = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("line `{line}`")))?;
            match k {
                "scheme" if v == SIGNATURE_SCHEME => {}
                "scheme" => return Err(bad(format!("unsupported scheme `{v}`"))),
                "key_id" => key_id = Some(v.to_string()),
                "measurement" => measurement = Some(Digest::from_hex(v).map_err(bad)?),
                "nonce" => nonce = Some(hex::decode(v).map_err(|e| bad(e.to_string()))?),
                "boot" => {
                    let (subject, d) = v.rsplit_once(':').ok_or_else(|| bad(format!("boot entry `{v}`")))?;
                    boot_chain.push(Measurement { subject: subject.to_string(), digest: Digest::from_hex(d).map_err(bad)? });
                }
                "signature" => {
                    let bytes = hex::decode(v).map_err(|e| bad(e.to_string()))?;
                    signature = Some(bytes.try_into().map_err(|_| bad("signature must be 64 bytes".into()))?);
                }
                other => return Err(bad(format!("unknown field `{other}`"))),
            }
        }
        Ok(Self {
            key_id: key_id.ok_or_else(|| bad("missing key_id".into()))?,
            measurement: measurement.ok_or_else(|| bad("missing measurement".into()))?,
            nonce: nonce.ok_or_else(|| bad("missing nonce".into()))?,
            boot_chain,
            signature: signature.ok_or_else(|| bad("missing signature".into()))?,
        })
    }
}

pub fn verify_report(public: &PublicKey, report: &AttestationReport) -> bool {
    if report.key_id != key_id(public) {
        return false;
    }
    let signature = Signature::from_bytes(&report.signature);
    public.verify_strict(&report.signed_bytes(), &signature).is_ok()
}

/// Parses a 32-byte public key.
pub fn public_key_from_bytes(bytes: &[u8; 32]) -> Option<PublicKey> {
    VerifyingKey::from_bytes(bytes).ok()
}
