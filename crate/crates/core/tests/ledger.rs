// SPDX-License-Identifier: Apache-2.0

#[path = "common/oracle.rs"]
mod oracle;
#[path = "common/sha256.rs"]
mod sha256;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use bbs_core::codec;
use bbs_core::contract::{EventEntity, FileEntity, KeyEntity, Phase, Verdict};
use bbs_core::identity::OrgId;
use bbs_core::ledger::{hash, replay, verify_chain, Block, ChainFile, Namespace, StateKey, Version};
use bbs_core::testkit::Consortium;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A random chain built by the validation model, with the model's view of
/// every key version.
fn random_chain(seed: u64, len: usize) -> (Consortium, Vec<Block>, oracle::Model) {
    let c = Consortium::three_org(seed);
    let mut m = oracle::Model::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nonce = 0;
    let mut blocks = vec![Block::genesis(c.config.clone())];
    for _ in 0..len {
        let (b, _, _) = oracle::step(&c, &mut m, blocks.last().unwrap(), &mut rng, &mut nonce);
        blocks.push(b);
    }
    (c, blocks, m)
}

fn org(s: &str) -> OrgId {
    s.parse().unwrap()
}

fn arb_org() -> impl Strategy<Value = OrgId> {
    prop::sample::select(vec!["Org1", "Org2", "Org3", "OrgX"]).prop_map(org)
}

fn arb_file() -> impl Strategy<Value = FileEntity> {
    (
        "[0-9a-f]{32}",
        "[a-z._-]{1,20}",
        any::<[u8; 32]>(),
        prop::collection::btree_set(arb_org(), 0..4),
        ".{0,40}",
        arb_org(),
        "[a-z0-9._-]{1,20}",
    )
        .prop_map(|(id, name, h, access_rule, description, owner, location)| FileEntity {
            id,
            name,
            hash: hash(&h),
            access_rule,
            description,
            owner,
            location,
        })
}

fn arb_event() -> impl Strategy<Value = EventEntity> {
    let phase = prop::sample::select(vec![Phase::Requested, Phase::Transferred, Phase::KeyReleased, Phase::Decrypted]);
    let verdict = prop::sample::select(vec![Verdict::Pending, Verdict::Verified, Verdict::HashMismatch]);
    (
        "[0-9a-f]{32}",
        "[0-9a-f]{32}",
        "[0-9a-f]{0,32}",
        any::<bool>(),
        arb_org(),
        arb_org(),
        any::<u64>(),
        phase,
        verdict,
    )
        .prop_map(|(id, file_id, key_id, flag, sender, receiver, time_ms, phase, verdict)| EventEntity {
            id,
            file_id,
            key_id,
            flag,
            sender,
            receiver,
            time_ms,
            phase,
            verdict,
        })
}

#[test]
fn sha256_standard_vectors() {
    assert_eq!(
        hash(b"").to_hex(),
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    );
    assert_eq!(
        hash(b"abc").to_hex(),
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    );
    assert_eq!(sha256::sha256(b"").as_slice(), hash(b"").0.as_slice());
    assert_eq!(sha256::sha256(b"abc").as_slice(), hash(b"abc").0.as_slice());
}

proptest! {
    #[test]
    fn hash_matches_reference(data in prop::collection::vec(any::<u8>(), 0..2048)) {
        prop_assert_eq!(hash(&data).0, sha256::sha256(&data));
    }

    #[test]
    fn entities_round_trip(f in arb_file(), e in arb_event()) {
        prop_assert_eq!(codec::decode::<FileEntity>(&codec::encode(&f)).unwrap(), f);
        prop_assert_eq!(codec::decode::<EventEntity>(&codec::encode(&e)).unwrap(), e);
    }

    #[test]
    fn distinct_entities_encode_differently(a in arb_file(), b in arb_file()) {
        prop_assert_eq!(a == b, codec::encode(&a) == codec::encode(&b));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn any_byte_mutation_breaks_the_chain(seed in 0u64..1_000, at in any::<prop::sample::Index>(), mask in 1u8..=255) {
        let (_, blocks, _) = random_chain(seed, 6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.chain");
        ChainFile::write_all(&path, &blocks).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let i = at.index(bytes.len());
        bytes[i] ^= mask;
        let ok = ChainFile::read_from(bytes.as_slice()).map(|b| verify_chain(&b)).unwrap_or(false);
        prop_assert!(!ok, "mutation at byte {} of {} went unnoticed", i, bytes.len());
    }

    #[test]
    fn replay_matches_incremental_state(seed in 0u64..1_000, len in 1usize..30) {
        let (_, blocks, m) = random_chain(seed, len);
        let replayed = replay(&blocks).unwrap();
        prop_assert_eq!(replayed.digest(), m.state.digest());
        let a: Vec<_> = replayed.iter().collect();
        let b: Vec<_> = m.state.iter().collect();
        prop_assert_eq!(a, b);
        for (k, v) in &m.versions {
            prop_assert_eq!(replayed.version(&oracle::key(*k)), Some(*v));
        }
    }

    #[test]
    fn versions_increase_along_write_history(seed in 0u64..1_000, len in 1usize..30) {
        let (_, blocks, _) = random_chain(seed, len);
        let mut last: BTreeMap<StateKey, Version> = BTreeMap::new();
        for b in &blocks[1..] {
            for (i, (tx, f)) in b.transactions().iter().zip(&b.flags).enumerate() {
                if *f != bbs_core::ledger::Validity::Valid {
                    continue;
                }
                let v = Version::new(b.header.height, i as u32);
                for (k, _) in &tx.rwset.writes {
                    if let Some(prev) = last.insert(k.clone(), v) {
                        prop_assert!(prev < v, "{k}: {prev:?} then {v:?}");
                    }
                }
            }
        }
    }
}

#[test]
fn peers_fed_the_same_blocks_agree() {
    let (_, blocks, m) = random_chain(99, 40);
    let mut a = bbs_core::ledger::WorldState::new();
    for b in &blocks[1..] {
        a.apply_block(b).unwrap();
    }
    assert_eq!(a.digest(), m.state.digest());
    assert_eq!(replay(&blocks).unwrap().digest(), a.digest());
}

/// Pinned values whose encodings must never change.
fn golden_fixtures() -> Vec<(&'static str, Vec<u8>)> {
    let c = Consortium::three_org(1);
    let file = FileEntity {
        id: "00112233445566778899aabbccddeeff".into(),
        name: "report.pdf".into(),
        hash: hash(b"report"),
        access_rule: BTreeSet::from([org("Org2"), org("Org3")]),
        description: "quarterly".into(),
        owner: org("Org1"),
        location: "report.pdf".into(),
    };
    let event = EventEntity {
        id: "ffeeddccbbaa99887766554433221100".into(),
        file_id: file.id.clone(),
        key_id: String::new(),
        flag: true,
        sender: org("Org1"),
        receiver: org("Org2"),
        time_ms: 1_700_000_000_000,
        phase: Phase::Requested,
        verdict: Verdict::Pending,
    };
    let (_, k) = c.member("peer0.org1");
    let key = KeyEntity {
        id: "0f0e0d0c0b0a09080706050403020100".into(),
        hash_enc_file: hash(b"cipher"),
        public_key: k.verification_key(),
        signature: k.sign_raw(b"cipher").to_vec(),
        key_hash: hash(b"key"),
    };
    let (_, blocks, _) = random_chain(1, 2);
    vec![
        ("state-key", codec::encode(&StateKey::new(Namespace::Event, "abc").unwrap())),
        ("version", codec::encode(&Version::new(7, 3))),
        ("file", codec::encode(&file)),
        ("event", codec::encode(&event)),
        ("key", codec::encode(&key)),
        ("genesis", codec::encode(&blocks[0])),
        ("block", codec::encode(&blocks[1])),
        ("block-2", codec::encode(&blocks[2])),
    ]
}

#[test]
fn encodings_match_golden_file() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/codec.txt");
    let rendered: String = golden_fixtures()
        .into_iter()
        .map(|(name, bytes)| format!("{name} {}\n", hex::encode(bytes)))
        .collect();
    if std::env::var_os("BBS_BLESS").is_some() {
        std::fs::write(&path, &rendered).unwrap();
    }
    let want = std::fs::read_to_string(&path).expect("golden file present; run with BBS_BLESS=1 to create it");
    for (got, want) in rendered.lines().zip(want.lines()) {
        assert_eq!(got, want);
    }
    assert_eq!(rendered.lines().count(), want.lines().count());
}
