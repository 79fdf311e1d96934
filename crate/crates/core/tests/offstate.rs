// SPDX-License-Identifier: Apache-2.0

use bbs_core::ledger::hash;
use bbs_core::offstate::{cipher_len, decrypt_stream, encrypt_stream, transfer_local, OffStateStore, MAX_BUFFER};
use proptest::prelude::*;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bytes(len: usize, seed: u64) -> Vec<u8> {
    let mut v = vec![0u8; len];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut v);
    v
}

/// File sizes from empty to 32 MB, biased toward chunk edges.
fn size() -> impl Strategy<Value = usize> {
    prop_oneof![
        Just(0usize),
        0usize..4096,
        (1usize..=32).prop_map(|m| m << 20),
        (1usize..=32, -3i64..=3).prop_map(|(m, d)| ((m << 20) as i64 + d).max(0) as usize),
        0usize..=32 << 20,
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn completed_transfers_preserve_content(len in size(), buffer in 1u32..=MAX_BUFFER, seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let src = OffStateStore::open(dir.path().join("src")).unwrap();
        let dst = OffStateStore::open(dir.path().join("dst")).unwrap();
        let data = bytes(len, seed);
        let name = src.put("f", &data, 0).unwrap();
        // Tiny buffers make large files crawl; keep the cycle count bounded.
        let buffer = buffer.max((len / 20_000) as u32).min(MAX_BUFFER);
        let got = transfer_local(&src, &name, &dst, "g", buffer).unwrap();
        prop_assert_eq!(got.meta.length, len as u64);
        prop_assert_eq!(got.meta.hash, hash(&data));
        prop_assert_eq!(dst.hash_of(&got.name).unwrap(), src.hash_of(&name).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decrypt_inverts_encrypt(len in 0usize..300_000, k in any::<[u8; 32]>(), other in any::<[u8; 32]>(), nonce in any::<[u8; 12]>()) {
        let plain = bytes(len, len as u64);
        let mut cipher = Vec::new();
        encrypt_stream(&k, nonce, plain.as_slice(), &mut cipher).unwrap();
        prop_assert_eq!(cipher.len() as u64, cipher_len(len as u64));
        let mut back = Vec::new();
        decrypt_stream(&k, cipher.as_slice(), &mut back).unwrap();
        prop_assert_eq!(&back, &plain);
        if other != k {
            let mut sink = Vec::new();
            prop_assert!(decrypt_stream(&other, cipher.as_slice(), &mut sink).is_err());
        }
    }
}
