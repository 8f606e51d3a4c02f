// SPDX-License-Identifier: Apache-2.0

use cvm_model::attestation::{derive_attestation_key, verify_report, AttestationReport, Digest, Measurement};
use hmac::{Hmac, Mac};
use proptest::prelude::*;
use sha2::Sha256;

const SALT: &[u8] = b"cvm-model/attestation-key/v1";

fn hmac(key: &[u8], parts: &[&[u8]]) -> [u8; 32] {
    let mut mac = Hmac::<Sha256>::new_from_slice(key).unwrap();
    for p in parts {
        mac.update(p);
    }
    mac.finalize().into_bytes().into()
}

/// Extract-then-expand, written out from the HMAC definition.
fn hkdf_oracle(salt: &[u8], ikm: &[u8], info: &[u8], len: usize) -> Vec<u8> {
    let prk = hmac(salt, &[ikm]);
    let mut out = Vec::new();
    let mut block: Vec<u8> = Vec::new();
    for i in 1..=len.div_ceil(32) as u8 {
        block = hmac(&prk, &[&block, info, &[i]]).to_vec();
        out.extend_from_slice(&block);
    }
    out.truncate(len);
    out
}

fn info(chain: &[Measurement]) -> Vec<u8> {
    let mut v = (chain.len() as u64).to_le_bytes().to_vec();
    for m in chain {
        v.extend_from_slice(&(m.subject.len() as u64).to_le_bytes());
        v.extend_from_slice(m.subject.as_bytes());
        v.extend_from_slice(&m.digest.0);
    }
    v
}

#[test]
fn oracle_matches_published_vector() {
    // Basic SHA-256 test case from the HKDF RFC.
    let ikm = [0x0b; 22];
    let salt: Vec<u8> = (0x00..=0x0c).collect();
    let info: Vec<u8> = (0xf0..=0xf9).collect();
    let okm = hkdf_oracle(&salt, &ikm, &info, 42);
    assert_eq!(hex::encode(okm), "3cb25f25faacd57a90434f64d0362f2a2d2d0a90cf1a5a4c5db02d56ecc4c5bf34007208d5b887185865");
}

fn measurement() -> impl Strategy<Value = Measurement> {
    ("[a-z][a-z0-9-]{0,12}", any::<[u8; 32]>()).prop_map(|(subject, d)| Measurement { subject, digest: Digest(d) })
}

proptest! {
    #[test]
    fn key_derivation_matches_oracle(seed in any::<[u8; 32]>(), chain in prop::collection::vec(measurement(), 0..4)) {
        let key = derive_attestation_key(&seed, &chain);
        let okm = hkdf_oracle(SALT, &seed, &info(&chain), 32);
        prop_assert_eq!(key.secret().to_vec(), okm);
    }

    #[test]
    fn reports_round_trip_and_verify(
        seed in any::<[u8; 32]>(),
        chain in prop::collection::vec(measurement(), 1..4),
        m in any::<[u8; 32]>(),
        nonce in prop::collection::vec(any::<u8>(), 0..48),
    ) {
        let key = derive_attestation_key(&seed, &chain);
        let report = key.sign_report(Digest(m), &nonce, &chain);
        prop_assert!(verify_report(&key.public(), &report));
        let parsed = AttestationReport::from_record(&report.to_record()).unwrap();
        prop_assert_eq!(&parsed, &report);
        prop_assert!(verify_report(&key.public(), &parsed));
    }

    #[test]
    fn reordered_boot_chain_changes_the_key(seed in any::<[u8; 32]>(), a in measurement(), b in measurement()) {
        prop_assume!(a != b);
        let ab = derive_attestation_key(&seed, &[a.clone(), b.clone()]);
        let ba = derive_attestation_key(&seed, &[b, a]);
        prop_assert_ne!(ab.public(), ba.public());
    }
}
