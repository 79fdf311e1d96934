// SPDX-License-Identifier: Apache-2.0

//! Forged chains for the custody audit, each with the failure it must produce.

use bbs_core::audit::{audit, audit_file, Check, Failure, Location};
use bbs_core::codec;
use bbs_core::config::peer_label;
use bbs_core::contract::{self, EventEntity, Phase};
use bbs_core::ledger::{Block, ChainFile, Validity};
use bbs_core::netsim::Mode;
use bbs_core::testkit::{Consortium, Flags, Forger};
use bbs_core::txflow::PolicyExpr;

use super::*;

pub struct Tampered {
    pub failure: Option<Failure>,
    pub want: (Check, Option<Location>),
}

impl Tampered {
    pub fn located(&self) -> bool {
        self.failure.as_ref().map(|f| (f.check, f.location)) == Some(self.want)
    }
}

pub fn at(block: usize, tx: Option<usize>) -> Option<Location> {
    Some(Location {
        block: block as u64,
        tx: tx.map(|t| t as u32),
    })
}

/// A completed honest session and Org1's copy of the chain.
pub fn honest(seed: u64) -> (Setup, Vec<Block>) {
    let mut s = setup(seed, 40_000, "Org2");
    s.topo.share(&receiver_client(), plan(&s.file, Mode::Auto)).unwrap();
    s.topo.settle().unwrap();
    let blocks = chain_of(&s.topo, &peer_label("Org1"));
    (s, blocks)
}

/// Flips one byte in the middle of block `target` of an exported chain.
pub fn byte_flip(s: &Setup, blocks: &[Block], target: usize) -> Tampered {
    let path = s.dir.path().join(format!("flip-{target}.chain"));
    ChainFile::write_all(&path, blocks).unwrap();
    let (lo, hi) = Forger::frame_offsets(blocks)[target];
    Forger::flip_byte(&path, (lo + hi) / 2).unwrap();
    Tampered {
        failure: audit_file(&path, &s.file.id).first_failure,
        want: (Check::ChainIntegrity, at(target, None)),
    }
}

/// Block `target` re-signed by a peer in place of the orderer.
pub fn forged_signature(seed: u64, target: usize) -> Tampered {
    let (s, mut blocks) = honest(seed);
    let c = Consortium::three_org(seed);
    Forger::new(&c).forge_orderer_signature(&mut blocks, target, &peer_label("Org3"));
    Tampered {
        failure: audit(&blocks, &s.file.id).first_failure,
        want: (Check::ChainIntegrity, at(target, None)),
    }
}

/// The request keeps its VALID flag after losing an endorsement.
pub fn missing_endorsement(seed: u64) -> Tampered {
    let (s, blocks) = honest(seed);
    let c = Consortium::three_org(seed);
    let (bi, ti) = find_tx(&blocks, contract::REQUEST).unwrap();
    let mut txs = Forger::batches(&blocks);
    txs[bi - 1][ti].endorsements.pop();
    let forged = Forger::new(&c).recut(&blocks, txs, &[], Flags::Recorded);
    assert!(bbs_core::ledger::verify_chain(&forged));
    Tampered {
        failure: audit(&forged, &s.file.id).first_failure,
        want: (Check::ValidationReplay, at(bi, Some(ti))),
    }
}

/// A validly endorsed transfer for an event whose receiver the rule excludes.
pub fn access_violation(seed: u64) -> Tampered {
    let mut s = setup(seed, 10_000, "Org3");
    s.topo.share(&receiver_client(), plan(&s.file, Mode::WrongReceiver)).unwrap();
    s.topo.settle().unwrap();
    let blocks = chain_of(&s.topo, &peer_label("Org1"));
    let c = Consortium::three_org(seed);
    let forger = Forger::new(&c);
    let (bi, ti) = find_tx(&blocks, contract::REQUEST).unwrap();
    let req = &blocks[bi].transactions()[ti];
    let (key, bytes) = req.rwset.writes[0].clone();
    let mut ev: EventEntity = codec::decode(&bytes).unwrap();
    assert!(!ev.flag);
    ev.phase = Phase::Transferred;
    ev.key_id = contract::key_id(&ev.id);
    let mut tx = req.clone();
    tx.proposal = c.proposal(&receiver_client(), contract::TRANSFER, &[&ev.id], 9_999);
    tx.rwset.reads = vec![(key.clone(), None)];
    tx.rwset.writes = vec![(key.clone(), codec::encode(&ev))];
    tx.rwset.key_policies = vec![(key, PolicyExpr::and_of([&ev.sender]))];
    tx.rwset.private_writes.clear();
    tx.rwset.events.clear();
    forger.endorse(&mut tx, &[org("Org1"), org("Org2")]);
    let id = tx.tx_id();
    let mut txs = Forger::batches(&blocks);
    txs.push(vec![tx]);
    let forged = forger.recut(&blocks, txs, &[id], Flags::Revalidate);
    let last = forged.len() - 1;
    assert_eq!(forged[last].flags, vec![Validity::Valid], "forgery must pass validation");
    Tampered {
        failure: audit(&forged, &s.file.id).first_failure,
        want: (Check::AccessControl, at(last, Some(0))),
    }
}

/// The key release committed ahead of the transfer.
pub fn phase_reordering(seed: u64) -> Tampered {
    let (s, blocks) = honest(seed);
    let c = Consortium::three_org(seed);
    let (tb, _) = find_tx(&blocks, contract::TRANSFER).unwrap();
    let (kb, _) = find_tx(&blocks, contract::KEYACCESS).unwrap();
    let (db, _) = find_tx(&blocks, contract::DECRYPT).unwrap();
    let mut txs = Forger::batches(&blocks);
    txs.swap(tb - 1, kb - 1);
    let refresh: Vec<_> = [tb, kb, db]
        .iter()
        .flat_map(|b| blocks[*b].transactions().iter().map(|t| t.tx_id()))
        .collect();
    let forged = Forger::new(&c).recut(&blocks, txs, &refresh, Flags::Revalidate);
    assert!(
        forged[1..].iter().all(|b| b.flags.iter().all(|f| *f == Validity::Valid)),
        "forgery must pass validation"
    );
    Tampered {
        failure: audit(&forged, &s.file.id).first_failure,
        want: (Check::PhaseOrder, at(tb, Some(0))),
    }
}
