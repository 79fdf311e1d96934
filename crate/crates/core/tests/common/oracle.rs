// SPDX-License-Identifier: Apache-2.0

//! Random blocks plus an independent serial model of block validation.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use bbs_core::identity::OrgId;
use bbs_core::ledger::{Block, Namespace, StateKey, Validity, Version, WorldState};
use bbs_core::testkit::Consortium;
use bbs_core::txflow::{validate_block, Endorsement, PolicyExpr, ReadWriteSet, Transaction, ValidationContext};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const KEYS: usize = 6;
const ORGS: [&str; 3] = ["Org1", "Org2", "Org3"];

/// What the generator did to a transaction, so the model never needs to
/// check a signature itself.
#[derive(Clone, Debug)]
pub struct Truth {
    pub bad_proposal_sig: bool,
    pub bad_endorsement: bool,
    pub endorsers: BTreeSet<&'static str>,
    /// Per written key: orgs that must all endorse, or any one of them.
    pub key_rules: Vec<Rule>,
}

#[derive(Clone, Debug)]
pub enum Rule {
    All(Vec<&'static str>),
    Any(Vec<&'static str>),
}

impl Rule {
    fn holds(&self, e: &BTreeSet<&'static str>) -> bool {
        match self {
            Rule::All(xs) => xs.iter().all(|x| e.contains(x)),
            Rule::Any(xs) => xs.iter().any(|x| e.contains(x)),
        }
    }

    fn expr(&self) -> PolicyExpr {
        let leaf = |s: &&str| PolicyExpr::Org(s.parse::<OrgId>().unwrap());
        match self {
            Rule::All(xs) => PolicyExpr::And(xs.iter().map(leaf).collect()),
            Rule::Any(xs) => PolicyExpr::Or(xs.iter().map(leaf).collect()),
        }
    }
}

pub fn key(i: usize) -> StateKey {
    StateKey::new(Namespace::File, format!("k{i}")).unwrap()
}

pub struct Model {
    pub versions: BTreeMap<usize, Version>,
    pub seen: HashSet<bbs_core::ledger::Digest>,
    pub state: WorldState,
    pub height: u64,
}

impl Model {
    pub fn new() -> Self {
        Model {
            versions: BTreeMap::new(),
            seen: HashSet::new(),
            state: WorldState::new(),
            height: 0,
        }
    }
}

fn org_orgs(rng: &mut ChaCha8Rng, n: usize) -> Vec<&'static str> {
    let mut v = ORGS.to_vec();
    v.shuffle(rng);
    v.truncate(n);
    v.sort();
    v
}

/// A block of 1..=8 random transactions against the model's current state.
pub fn gen_block(c: &Consortium, m: &Model, rng: &mut ChaCha8Rng, nonce: &mut u64) -> (Vec<Transaction>, Vec<Truth>) {
    let n = rng.gen_range(1..=8);
    let mut txs: Vec<Transaction> = Vec::new();
    let mut truths: Vec<Truth> = Vec::new();
    for _ in 0..n {
        if !txs.is_empty() && rng.gen_bool(0.05) {
            let i = rng.gen_range(0..txs.len());
            txs.push(txs[i].clone());
            truths.push(truths[i].clone());
            continue;
        }
        let client = if rng.gen_bool(0.5) { "client.org1" } else { "client.org2" };
        *nonce += 1;
        let mut proposal = c.proposal(client, "test", &[], *nonce);
        let mut keys: Vec<usize> = (0..KEYS).collect();
        keys.shuffle(rng);
        let reads: Vec<(StateKey, Option<Version>)> = keys[..rng.gen_range(0..=3)]
            .iter()
            .map(|&k| {
                let cur = m.versions.get(&k).copied();
                let v = if rng.gen_bool(0.8) {
                    cur
                } else if rng.gen_bool(0.5) {
                    None
                } else {
                    Some(Version::new(rng.gen_range(0..=m.height + 1), rng.gen_range(0..3)))
                };
                (key(k), v)
            })
            .collect();
        keys.shuffle(rng);
        let wkeys: Vec<usize> = keys[..rng.gen_range(0..=2)].to_vec();
        let writes = wkeys.iter().map(|&k| (key(k), vec![rng.gen::<u8>()])).collect();
        let mut key_rules = Vec::new();
        let mut key_policies = Vec::new();
        for &k in &wkeys {
            if rng.gen_bool(0.3) {
                let size = rng.gen_range(1..=2);
                let r = if rng.gen_bool(0.5) { Rule::All(org_orgs(rng, size)) } else { Rule::Any(org_orgs(rng, size)) };
                key_policies.push((key(k), r.expr()));
                key_rules.push(r);
            }
        }
        let rwset = ReadWriteSet {
            reads,
            writes,
            key_policies,
            ..Default::default()
        };
        let endorsers: BTreeSet<&'static str> = ORGS.iter().copied().filter(|_| rng.gen_bool(0.7)).collect();
        let tx_id = proposal.tx_id();
        let mut endorsements: Vec<Endorsement> = endorsers
            .iter()
            .map(|o| {
                let (id, k) = c.member(&format!("peer0.{}", o.to_lowercase()));
                Endorsement::sign(id, k, &tx_id, &rwset)
            })
            .collect();
        let bad_endorsement = !endorsements.is_empty() && rng.gen_bool(0.08);
        if bad_endorsement {
            let e = endorsements.choose_mut(rng).unwrap();
            let mut other = rwset.clone();
            other.writes.push((key(KEYS + 1), vec![0]));
            e.result_hash = other.result_hash();
        }
        let bad_proposal_sig = rng.gen_bool(0.05);
        if bad_proposal_sig {
            // Re-sign a different proposal and keep the original body.
            let other = c.proposal(client, "other", &[], *nonce);
            proposal.signature = other.signature;
        }
        txs.push(Transaction {
            proposal,
            rwset,
            endorsements,
        });
        truths.push(Truth {
            bad_proposal_sig,
            bad_endorsement,
            endorsers,
            key_rules,
        });
    }
    (txs, truths)
}

/// Serial model: each transaction is judged after every earlier one.
pub fn oracle_flags(m: &Model, txs: &[Transaction], truths: &[Truth]) -> Vec<Validity> {
    let height = m.height + 1;
    let mut versions = m.versions.clone();
    let mut written_here: BTreeSet<StateKey> = BTreeSet::new();
    let mut ids: HashSet<_> = HashSet::new();
    let mut out = Vec::new();
    for (idx, (tx, t)) in txs.iter().zip(truths).enumerate() {
        let id = tx.tx_id();
        let dup = m.seen.contains(&id) || !ids.insert(id);
        let flag = if t.bad_proposal_sig || dup {
            Validity::InvalidOther
        } else if t.endorsers.is_empty() || t.bad_endorsement {
            Validity::InvalidEndorsement
        } else if !(if t.key_rules.is_empty() {
            t.endorsers.contains("Org1") && t.endorsers.contains("Org2")
        } else {
            t.key_rules.iter().all(|r| r.holds(&t.endorsers))
        }) {
            Validity::InvalidEndorsement
        } else if tx.rwset.reads.iter().any(|(k, v)| versions.get(&key_index(k)).copied() != *v)
            || tx.rwset.writes.iter().any(|(k, _)| written_here.contains(k))
        {
            Validity::InvalidMvcc
        } else {
            Validity::Valid
        };
        if flag == Validity::Valid {
            for (k, _) in &tx.rwset.writes {
                versions.insert(key_index(k), Version::new(height, idx as u32));
                written_here.insert(k.clone());
            }
        }
        out.push(flag);
    }
    out
}

fn key_index(k: &StateKey) -> usize {
    k.id[1..].parse().unwrap()
}

/// Cuts, validates with the real validator and advances the model with the
/// real result. Returns (validator flags, model flags).
pub fn step(c: &Consortium, m: &mut Model, prev: &Block, rng: &mut ChaCha8Rng, nonce: &mut u64) -> (Block, Vec<Validity>, Vec<Validity>) {
    let (txs, truths) = gen_block(c, m, rng, nonce);
    let want = oracle_flags(m, &txs, &truths);
    let (oid, okey) = c.member("orderer.org3");
    let mut block = Block::cut(&prev.header, txs, oid, okey);
    let got = validate_block(
        &ValidationContext {
            config: &c.config,
            state: &m.state,
            seen_tx_ids: &m.seen,
        },
        &block,
    );
    block.seal(got.clone(), &prev.commit_hash);
    m.state.apply_block(&block).unwrap();
    m.height += 1;
    for (i, (tx, f)) in block.transactions().iter().zip(&got).enumerate() {
        m.seen.insert(tx.tx_id());
        if *f == Validity::Valid {
            for (k, _) in &tx.rwset.writes {
                m.versions.insert(key_index(k), Version::new(m.height, i as u32));
            }
        }
    }
    (block, got, want)
}
