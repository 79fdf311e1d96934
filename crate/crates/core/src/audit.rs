// SPDX-License-Identifier: Apache-2.0

//! Chain-of-custody audit of one file from an exported chain alone.
//!
//! Chain-wide checks run first: block links, signatures and commit hashes,
//! then a full re-validation against replayed state. The file-scoped checks
//! then walk every VALID transaction that touches the file or one of its
//! sharing events.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec;
use crate::contract::{self, EventEntity, FileEntity, KeyEntity, Phase, Verdict};
use crate::identity::OrgId;
use crate::ledger::{verify_chain_detailed, Block, ChainFile, Digest, LedgerError, Namespace, Validity, WorldState};
use crate::txflow::{validate_block, SideEffect, Transaction, ValidationContext};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Check {
    ChainIntegrity,
    ValidationReplay,
    AccessControl,
    HashBinding,
    PhaseOrder,
    Completeness,
}

impl Check {
    pub const ALL: [Check; 6] = [
        Check::ChainIntegrity,
        Check::ValidationReplay,
        Check::AccessControl,
        Check::HashBinding,
        Check::PhaseOrder,
        Check::Completeness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Check::ChainIntegrity => "chain-integrity",
            Check::ValidationReplay => "validation-replay",
            Check::AccessControl => "access-control",
            Check::HashBinding => "hash-binding",
            Check::PhaseOrder => "phase-order",
            Check::Completeness => "completeness",
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Block height, and transaction index within it when the fault is in one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Location {
    pub block: u64,
    pub tx: Option<u32>,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.tx {
            Some(t) => write!(f, "block {} tx {}", self.block, t),
            None => write!(f, "block {}", self.block),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub check: Check,
    /// `None` when the fault is an absence rather than a bad record.
    pub location: Option<Location>,
    pub reason: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.location {
            Some(l) => write!(f, "{} at {}: {}", self.check, l, self.reason),
            None => write!(f, "{}: {}", self.check, self.reason),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckStatus {
    Pass,
    Fail,
    /// Not run because the chain could not be trusted.
    Skipped,
}

/// One custody-relevant transaction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CustodyEntry {
    pub location: Location,
    pub tx_id: Digest,
    pub function: String,
    pub proposer: OrgId,
    pub endorsers: Vec<OrgId>,
    pub event_id: Option<String>,
    pub phase: Option<Phase>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CustodyReport {
    pub file_id: String,
    pub blocks: u64,
    pub checks: Vec<(Check, CheckStatus)>,
    /// Earliest fault in chain order; ties go to the earlier check.
    pub first_failure: Option<Failure>,
    pub failures: Vec<Failure>,
    pub timeline: Vec<CustodyEntry>,
}

impl CustodyReport {
    pub fn passed(&self) -> bool {
        self.first_failure.is_none()
    }
}

impl fmt::Display for CustodyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.first_failure {
            None => writeln!(f, "PASS file {} ({} blocks)", self.file_id, self.blocks)?,
            Some(fail) => writeln!(f, "FAIL file {}: {}", self.file_id, fail)?,
        }
        for (c, s) in &self.checks {
            let s = match s {
                CheckStatus::Pass => "ok",
                CheckStatus::Fail => "FAIL",
                CheckStatus::Skipped => "skipped",
            };
            writeln!(f, "  {:<18} {}", c.name(), s)?;
        }
        for e in &self.timeline {
            write!(f, "  {:<14} {:<10} by {}", e.location.to_string(), e.function, e.proposer)?;
            if let Some(p) = e.phase {
                write!(f, " -> {p}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

struct Findings {
    failures: Vec<Failure>,
}

impl Findings {
    fn fail(&mut self, check: Check, location: Option<Location>, reason: impl Into<String>) {
        self.failures.push(Failure {
            check,
            location,
            reason: reason.into(),
        });
    }
}

fn report(file_id: &str, blocks: u64, findings: Findings, skipped: &[Check], timeline: Vec<CustodyEntry>) -> CustodyReport {
    let failed: HashSet<Check> = findings.failures.iter().map(|f| f.check).collect();
    let checks = Check::ALL
        .iter()
        .map(|c| {
            let s = if skipped.contains(c) {
                CheckStatus::Skipped
            } else if failed.contains(c) {
                CheckStatus::Fail
            } else {
                CheckStatus::Pass
            };
            (*c, s)
        })
        .collect();
    // Absences sort after every located fault.
    let first_failure = findings
        .failures
        .iter()
        .min_by_key(|f| (f.location.is_none(), f.location, f.check))
        .cloned();
    CustodyReport {
        file_id: file_id.to_string(),
        blocks,
        checks,
        first_failure,
        failures: findings.failures,
        timeline,
    }
}

/// Audits the chain file at `path`.
pub fn audit_file(path: &Path, file_id: &str) -> CustodyReport {
    audit_loaded(ChainFile::read_all(path), file_id)
}

/// Audits an already read chain; a read error is a chain-integrity fault.
pub fn audit_loaded(blocks: Result<Vec<Block>, LedgerError>, file_id: &str) -> CustodyReport {
    match blocks {
        Ok(b) => audit(&b, file_id),
        Err(e) => {
            let mut f = Findings { failures: Vec::new() };
            let location = match &e {
                LedgerError::CorruptChain { index, .. } => Some(Location { block: *index, tx: None }),
                _ => None,
            };
            f.fail(Check::ChainIntegrity, location, e.to_string());
            report(file_id, 0, f, &Check::ALL[1..], Vec::new())
        }
    }
}

pub fn audit(blocks: &[Block], file_id: &str) -> CustodyReport {
    let mut f = Findings { failures: Vec::new() };
    let n = blocks.len() as u64;
    if let Err(fault) = verify_chain_detailed(blocks) {
        f.fail(
            Check::ChainIntegrity,
            Some(Location {
                block: fault.index,
                tx: None,
            }),
            fault.kind.to_string(),
        );
        return report(file_id, n, f, &Check::ALL[1..], Vec::new());
    }
    replay_validation(blocks, &mut f);
    let timeline = custody(blocks, file_id, &mut f);
    report(file_id, n, f, &[], timeline)
}

/// Re-validates every block against state rebuilt from its predecessors and
/// compares with the recorded flags.
fn replay_validation(blocks: &[Block], f: &mut Findings) {
    let Some(config) = blocks.first().and_then(Block::config) else { return };
    let mut state = WorldState::new();
    let mut seen = HashSet::new();
    for b in &blocks[1..] {
        let ctx = ValidationContext {
            config,
            state: &state,
            seen_tx_ids: &seen,
        };
        let flags = validate_block(&ctx, b);
        if let Some((i, (want, got))) = flags.iter().zip(&b.flags).enumerate().find(|(_, (a, b))| a != b) {
            f.fail(
                Check::ValidationReplay,
                Some(Location {
                    block: b.header.height,
                    tx: Some(i as u32),
                }),
                format!("recorded {got}, re-validation gives {want}"),
            );
            return;
        }
        if let Err(e) = state.apply_block(b) {
            f.fail(
                Check::ValidationReplay,
                Some(Location {
                    block: b.header.height,
                    tx: None,
                }),
                e.to_string(),
            );
            return;
        }
        seen.extend(b.transactions().iter().map(Transaction::tx_id));
    }
}

fn written<T: serde::de::DeserializeOwned>(tx: &Transaction, ns: Namespace) -> Vec<T> {
    tx.rwset
        .writes
        .iter()
        .filter(|(k, _)| k.namespace == ns)
        .filter_map(|(_, v)| codec::decode(v).ok())
        .collect()
}

fn expected_phase(function: &str) -> Option<Phase> {
    match function {
        contract::REQUEST => Some(Phase::Requested),
        contract::TRANSFER => Some(Phase::Transferred),
        contract::KEYACCESS => Some(Phase::KeyReleased),
        contract::DECRYPT => Some(Phase::Decrypted),
        _ => None,
    }
}

fn phase_after(p: Phase) -> Option<Phase> {
    match p {
        Phase::Requested => Some(Phase::Transferred),
        Phase::Transferred => Some(Phase::KeyReleased),
        Phase::KeyReleased => Some(Phase::Decrypted),
        Phase::Decrypted => None,
    }
}

/// Org whose endorsement each session function needs.
fn required_endorsers(function: &str, ev: &EventEntity) -> Vec<OrgId> {
    match function {
        contract::REQUEST => vec![ev.sender.clone(), ev.receiver.clone()],
        contract::TRANSFER | contract::KEYACCESS => vec![ev.sender.clone()],
        contract::DECRYPT => vec![ev.receiver.clone()],
        _ => Vec::new(),
    }
}

fn custody(blocks: &[Block], file_id: &str, f: &mut Findings) -> Vec<CustodyEntry> {
    let mut file: Option<FileEntity> = None;
    let mut events: BTreeMap<String, EventEntity> = BTreeMap::new();
    let mut keys: BTreeMap<String, KeyEntity> = BTreeMap::new();
    let mut timeline = Vec::new();
    for b in &blocks[1..] {
        for (i, (tx, flag)) in b.transactions().iter().zip(&b.flags).enumerate() {
            if *flag != Validity::Valid {
                continue;
            }
            let loc = Some(Location {
                block: b.header.height,
                tx: Some(i as u32),
            });
            let proposer = tx.proposal.proposal.proposer.org.clone();
            let endorsers = tx.endorsing_orgs();
            let mut entry = CustodyEntry {
                location: loc.expect("set"),
                tx_id: tx.tx_id(),
                function: tx.function().to_string(),
                proposer: proposer.clone(),
                endorsers: endorsers.iter().cloned().collect(),
                event_id: None,
                phase: None,
            };
            let mut relevant = false;

            for fe in written::<FileEntity>(tx, Namespace::File) {
                if fe.id != file_id {
                    continue;
                }
                relevant = true;
                if file.is_some() {
                    f.fail(Check::Completeness, loc, "file registered twice");
                }
                if tx.function() != contract::UPLOAD {
                    f.fail(Check::AccessControl, loc, format!("file record written by {}", tx.function()));
                }
                if proposer != fe.owner || !endorsers.contains(&fe.owner) {
                    f.fail(Check::AccessControl, loc, format!("file registered for {} by {proposer}", fe.owner));
                }
                file = Some(fe);
            }

            for ke in written::<KeyEntity>(tx, Namespace::KeyPub) {
                keys.insert(ke.id.clone(), ke);
            }

            for ev in written::<EventEntity>(tx, Namespace::Event) {
                if ev.file_id != file_id {
                    continue;
                }
                relevant = true;
                entry.event_id = Some(ev.id.clone());
                entry.phase = Some(ev.phase);
                let Some(fe) = &file else {
                    f.fail(Check::Completeness, loc, format!("event {} refers to an unregistered file", ev.id));
                    events.insert(ev.id.clone(), ev);
                    continue;
                };
                let prev = events.get(&ev.id);

                // Access control.
                let permitted = fe.access_rule.contains(&ev.receiver);
                if ev.sender != fe.owner {
                    f.fail(Check::AccessControl, loc, format!("sender {} does not own the file", ev.sender));
                }
                if ev.flag != permitted {
                    f.fail(Check::AccessControl, loc, format!("event flag {} contradicts the access rule", ev.flag));
                }
                if ev.phase != Phase::Requested && !permitted {
                    f.fail(
                        Check::AccessControl,
                        loc,
                        format!("{} for receiver {} outside the access rule", tx.function(), ev.receiver),
                    );
                }
                if proposer != ev.receiver {
                    f.fail(Check::AccessControl, loc, format!("{} proposed by {proposer}, not the receiver", tx.function()));
                }
                for org in required_endorsers(tx.function(), &ev) {
                    if !endorsers.contains(&org) {
                        f.fail(Check::AccessControl, loc, format!("{} lacks an endorsement from {org}", tx.function()));
                    }
                }
                if let Some(p) = prev {
                    if (p.file_id.as_str(), &p.sender, &p.receiver, p.flag) != (ev.file_id.as_str(), &ev.sender, &ev.receiver, ev.flag) {
                        f.fail(Check::AccessControl, loc, "immutable event fields rewritten");
                    }
                }

                // Phase order.
                match (ev.phase, prev.map(|e| e.phase)) {
                    (Phase::Requested, Some(_)) => f.fail(Check::PhaseOrder, loc, "event created twice"),
                    (Phase::Requested, None) => {}
                    (phase, None) => f.fail(Check::PhaseOrder, loc, format!("{phase} without a request")),
                    (phase, Some(fp)) if phase_after(fp) != Some(phase) => {
                        f.fail(Check::PhaseOrder, loc, format!("{fp} followed by {phase}"))
                    }
                    _ => {}
                }
                if expected_phase(tx.function()) != Some(ev.phase) {
                    f.fail(Check::PhaseOrder, loc, format!("{} wrote phase {}", tx.function(), ev.phase));
                }

                // Hash binding.
                match ev.phase {
                    Phase::Transferred => match keys.get(&ev.key_id) {
                        None => f.fail(Check::Completeness, loc, format!("key record {} missing", ev.key_id)),
                        Some(k) => {
                            let sent = tx.rwset.events.iter().find_map(|e| match e {
                                SideEffect::FileSent { to, digest, .. } => Some((to, digest)),
                                _ => None,
                            });
                            match sent {
                                Some((to, d)) if *to == ev.receiver && *d == k.hash_enc_file => {}
                                Some(_) => f.fail(Check::HashBinding, loc, "pushed file differs from the key record"),
                                None => f.fail(Check::HashBinding, loc, "no file push recorded"),
                            }
                            let coll = contract::sender_collection(&ev.key_id, &ev.sender).id;
                            if !tx.rwset.private_writes.iter().any(|w| w.collection == coll && w.value_hash == k.key_hash) {
                                f.fail(Check::HashBinding, loc, "stored key does not match the key record");
                            }
                        }
                    },
                    Phase::KeyReleased => {
                        // Without a key record the phase check reports it.
                        if let Some(k) = keys.get(&ev.key_id) {
                            let coll = contract::shared_collection_id(&ev.key_id, &ev.sender, &ev.receiver);
                            if !tx.rwset.private_writes.iter().any(|w| w.collection == coll && w.value_hash == k.key_hash) {
                                f.fail(Check::HashBinding, loc, "released key does not match the key record");
                            }
                        }
                    }
                    Phase::Decrypted => {
                        let staged = tx.rwset.events.iter().find_map(|e| match e {
                            SideEffect::PlaintextStaged { digest, .. } => Some(*digest),
                            _ => None,
                        });
                        match (ev.verdict, staged) {
                            (Verdict::Verified, Some(d)) if d == fe.hash => {}
                            (Verdict::Verified, _) => f.fail(Check::HashBinding, loc, "verified plaintext does not hash to the file record"),
                            (Verdict::HashMismatch, None) => {}
                            (Verdict::HashMismatch, Some(_)) => f.fail(Check::HashBinding, loc, "mismatching plaintext was kept"),
                            (Verdict::Pending, _) => f.fail(Check::PhaseOrder, loc, "decrypted without a verdict"),
                        }
                    }
                    Phase::Requested => {}
                }
                events.insert(ev.id.clone(), ev);
            }
            if relevant {
                timeline.push(entry);
            }
        }
    }
    if file.is_none() {
        f.fail(Check::Completeness, None, format!("file {file_id} is not registered on this chain"));
    }
    timeline
}
