// SPDX-License-Identifier: Apache-2.0

#![allow(dead_code)]

use std::collections::HashSet;
use std::path::Path;

pub mod tamper;

use bbs_core::config::{client_label, peer_label, NetworkConfig};
use bbs_core::contract::{self, FileEntity};
use bbs_core::identity::OrgId;
use bbs_core::ledger::Validity;
use bbs_core::netsim::{Mode, SessionPlan, Topology};
use bbs_core::testkit::Consortium;
use rand::{RngCore, SeedableRng};
use tempfile::TempDir;

pub fn fixture(len: usize, seed: u64) -> Vec<u8> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut v = vec![0u8; len];
    rng.fill_bytes(&mut v);
    v
}

pub fn org(s: &str) -> OrgId {
    s.parse().unwrap()
}

pub struct Setup {
    pub topo: Topology,
    pub file: FileEntity,
    pub bytes: Vec<u8>,
    pub dir: TempDir,
}

/// Three-org network where Org1 has uploaded a file readable by `rule`.
pub fn setup(seed: u64, len: usize, rule: &str) -> Setup {
    setup_with(seed, len, rule, |_| {})
}

pub fn setup_with(seed: u64, len: usize, rule: &str, tweak: impl FnOnce(&mut NetworkConfig)) -> Setup {
    let c = Consortium::three_org(seed);
    let mut net = c.network.clone();
    tweak(&mut net);
    let dir = tempfile::tempdir().unwrap();
    let mut topo = Topology::build(net, &c.keys, dir.path(), seed).unwrap();
    let bytes = fixture(len, seed);
    let owner = client_label("Org1");
    let src = topo.put_fixture(&owner, "data.bin", &bytes).unwrap();
    let file = topo.upload(&owner, &src, "data.bin", rule, "fixture").unwrap();
    Setup { topo, file, bytes, dir }
}

pub fn plan(file: &FileEntity, mode: Mode) -> SessionPlan {
    SessionPlan {
        file_id: file.id.clone(),
        sender: org("Org1"),
        receiver: org("Org2"),
        mode,
        parallelism: 1,
        event_id: None,
    }
}

pub fn receiver_client() -> String {
    client_label("Org2")
}

pub fn receiver_peer() -> String {
    peer_label("Org2")
}

/// Every file below `root`, read fully.
pub fn files_under(root: &Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(rd) = std::fs::read_dir(&d) else { continue };
        for e in rd.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if let Ok(b) = std::fs::read(&p) {
                out.push((p, b));
            }
        }
    }
    out
}

pub fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// True if any 64-byte window of `plain` appears in `haystack`.
pub fn has_plaintext_window(haystack: &[u8], windows: &HashSet<&[u8]>) -> bool {
    haystack.windows(64).any(|w| windows.contains(w))
}

pub fn windows64(plain: &[u8]) -> HashSet<&[u8]> {
    plain.windows(64).collect()
}

/// Validity of every committed transaction invoking `function`.
pub fn flags_for(topo: &Topology, peer: &str, function: &str) -> Vec<Validity> {
    let p = &topo.peer(peer).peer;
    let mut out = Vec::new();
    for b in p.chain.blocks().iter().skip(1) {
        for (tx, f) in b.transactions().iter().zip(&b.flags) {
            if tx.proposal.proposal.function == function {
                out.push(*f);
            }
        }
    }
    out
}

pub fn key_of(topo: &Topology, event_id: &str) -> Option<Vec<u8>> {
    let p = &topo.peer(&peer_label("Org1")).peer;
    let kid = contract::key_id(event_id);
    let coll = contract::sender_collection(&kid, &org("Org1"));
    p.private.get(&coll.id, &contract::key_priv_key(&kid)).map(|e| e.value.clone())
}

/// Position (block index, tx index) of the first VALID `function` tx.
pub fn find_tx(blocks: &[bbs_core::ledger::Block], function: &str) -> Option<(usize, usize)> {
    blocks.iter().enumerate().skip(1).find_map(|(bi, b)| {
        b.transactions()
            .iter()
            .zip(&b.flags)
            .position(|(t, f)| t.function() == function && *f == Validity::Valid)
            .map(|ti| (bi, ti))
    })
}

pub fn chain_of(topo: &Topology, peer: &str) -> Vec<bbs_core::ledger::Block> {
    topo.peer(peer).peer.chain.blocks().to_vec()
}
