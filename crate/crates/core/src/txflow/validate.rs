// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, HashSet};

use super::policy::resolve_policy_with;
use super::Transaction;
use crate::config::ChannelConfig;
use crate::ledger::{Block, Digest, StateKey, Validity, Version, WorldState};
use crate::par;
use crate::pdc;

/// What a committing peer validates a block against.
#[derive(Clone, Copy)]
pub struct ValidationContext<'a> {
    pub config: &'a ChannelConfig,
    /// Committed state before the block.
    pub state: &'a WorldState,
    /// Transaction ids already committed (valid or not) on this chain.
    pub seen_tx_ids: &'a HashSet<Digest>,
}

/// Outcome of the stateless checks, which run independently per transaction.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Stateless {
    Ok,
    Fail(Validity),
}

fn stateless(ctx: &ValidationContext<'_>, tx: &Transaction) -> Stateless {
    let registry = &ctx.config.registry;
    if !tx.proposal.creator_ok(registry) || !tx.rwset.is_well_formed() {
        return Stateless::Fail(Validity::InvalidOther);
    }
    let tx_id = tx.tx_id();
    let expected = tx.rwset.result_hash();
    if tx.endorsements.is_empty()
        || tx
            .endorsements
            .iter()
            .any(|e| e.result_hash != expected || !e.verifies(registry, &tx_id))
    {
        return Stateless::Fail(Validity::InvalidEndorsement);
    }
    Stateless::Ok
}

/// Every key the transaction writes to world state, private-data hash keys
/// included.
fn written_keys(tx: &Transaction) -> impl Iterator<Item = StateKey> + '_ {
    tx.rwset.writes.iter().map(|(k, _)| k.clone()).chain(
        tx.rwset
            .private_writes
            .iter()
            .map(|pw| pdc::hash_key(&pw.collection, &pw.key)),
    )
}

/// Assigns a validity flag to each transaction of a block at `height`.
///
/// Signature checks run first for all transactions at once; policy and MVCC
/// checks then run in block order, since each depends on which earlier
/// transactions turned out valid.
pub fn validate_transactions(ctx: &ValidationContext<'_>, height: u64, txs: &[Transaction]) -> Vec<Validity> {
    let first_pass = par::map(txs, |tx| stateless(ctx, tx));

    // Writes of earlier VALID transactions in this block.
    let mut overlay: BTreeMap<StateKey, (Version, Option<&[u8]>)> = BTreeMap::new();
    let mut ids_in_block: HashSet<Digest> = HashSet::new();
    let mut flags = Vec::with_capacity(txs.len());

    for (idx, (tx, pre)) in txs.iter().zip(first_pass).enumerate() {
        let tx_id = tx.tx_id();
        let fresh = !ctx.seen_tx_ids.contains(&tx_id) && ids_in_block.insert(tx_id);
        let flag = match pre {
            Stateless::Fail(Validity::InvalidOther) => Validity::InvalidOther,
            _ if !fresh => Validity::InvalidOther,
            Stateless::Fail(v) => v,
            Stateless::Ok => check_stateful(ctx, tx, &overlay),
        };
        if flag == Validity::Valid {
            let version = Version::new(height, idx as u32);
            for (k, v) in &tx.rwset.writes {
                overlay.insert(k.clone(), (version, Some(v.as_slice())));
            }
            for pw in &tx.rwset.private_writes {
                overlay.insert(pdc::hash_key(&pw.collection, &pw.key), (version, None));
            }
        }
        flags.push(flag);
    }
    flags
}

fn check_stateful(
    ctx: &ValidationContext<'_>,
    tx: &Transaction,
    overlay: &BTreeMap<StateKey, (Version, Option<&[u8]>)>,
) -> Validity {
    let lookup = |k: &StateKey| -> Option<Vec<u8>> {
        match overlay.get(k) {
            Some((_, Some(v))) => Some(v.to_vec()),
            Some((_, None)) => None,
            None => ctx.state.get(k).map(|v| v.value.clone()),
        }
    };
    let policy = match resolve_policy_with(&tx.rwset, &ctx.config.chaincode_policy, &lookup) {
        Ok(p) => p,
        Err(_) => return Validity::InvalidEndorsement,
    };
    if !policy.satisfied_by(&tx.endorsing_orgs()) {
        return Validity::InvalidEndorsement;
    }

    let current = |k: &StateKey| overlay.get(k).map(|(v, _)| *v).or_else(|| ctx.state.version(k));
    if tx.rwset.reads.iter().any(|(k, v)| current(k) != *v) {
        return Validity::InvalidMvcc;
    }
    if written_keys(tx).any(|k| overlay.contains_key(&k)) {
        return Validity::InvalidMvcc;
    }
    Validity::Valid
}

pub fn validate_block(ctx: &ValidationContext<'_>, block: &Block) -> Vec<Validity> {
    validate_transactions(ctx, block.header.height, block.transactions())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::Namespace;
    use crate::testkit::Consortium;
    use crate::txflow::{ReadWriteSet, SignedProposal};

    fn key(id: &str) -> StateKey {
        StateKey::new(Namespace::File, id).unwrap()
    }

    fn rw_write(id: &str, reads: Vec<(StateKey, Option<Version>)>) -> ReadWriteSet {
        ReadWriteSet {
            reads,
            writes: vec![(key(id), id.as_bytes().to_vec())],
            ..Default::default()
        }
    }

    fn run(c: &Consortium, state: &WorldState, txs: &[Transaction]) -> Vec<Validity> {
        let seen = HashSet::new();
        let ctx = ValidationContext {
            config: &c.config,
            state,
            seen_tx_ids: &seen,
        };
        validate_transactions(&ctx, 1, txs)
    }

    #[test]
    fn flags_in_order() {
        let c = Consortium::three_org(3);
        let both = ["peer0.org1", "peer0.org2", "peer0.org3"];
        let good = c.endorse_with("client.org1", &both, rw_write("a", vec![(key("a"), None)]), 1);
        let conflict = c.endorse_with("client.org1", &both, rw_write("a", vec![]), 2);
        let stale = c.endorse_with("client.org1", &both, rw_write("b", vec![(key("a"), None)]), 3);
        let underendorsed = c.endorse_with("client.org1", &["peer0.org1"], rw_write("c", vec![]), 4);
        let mut forged = c.endorse_with("client.org1", &both, rw_write("d", vec![]), 5);
        forged.proposal.proposal.args.push("x".into());
        let flags = run(
            &c,
            &WorldState::new(),
            &[good.clone(), conflict, stale, underendorsed, forged, good],
        );
        assert_eq!(
            flags,
            vec![
                Validity::Valid,
                Validity::InvalidMvcc,
                Validity::InvalidMvcc,
                Validity::InvalidEndorsement,
                Validity::InvalidOther,
                Validity::InvalidOther,
            ]
        );
    }

    #[test]
    fn tampered_rwset_is_endorsement_failure() {
        let c = Consortium::three_org(4);
        let mut tx = c.endorse_with(
            "client.org2",
            &["peer0.org1", "peer0.org2", "peer0.org3"],
            rw_write("a", vec![]),
            1,
        );
        tx.rwset.writes[0].1 = b"evil".to_vec();
        assert_eq!(run(&c, &WorldState::new(), &[tx]), vec![Validity::InvalidEndorsement]);
    }

    #[test]
    fn replayed_tx_id_is_rejected() {
        let c = Consortium::three_org(5);
        let tx = c.endorse_with(
            "client.org2",
            &["peer0.org1", "peer0.org2", "peer0.org3"],
            rw_write("a", vec![]),
            1,
        );
        let seen: HashSet<Digest> = [tx.tx_id()].into_iter().collect();
        let state = WorldState::new();
        let ctx = ValidationContext {
            config: &c.config,
            state: &state,
            seen_tx_ids: &seen,
        };
        assert_eq!(validate_transactions(&ctx, 2, &[tx]), vec![Validity::InvalidOther]);
    }

    #[test]
    fn non_peer_endorser_rejected() {
        let c = Consortium::three_org(6);
        let sp: SignedProposal = c.proposal("client.org1", "x", &[], 1);
        let rw = rw_write("a", vec![]);
        let (client, ck) = c.member("client.org1");
        let e = crate::txflow::Endorsement::sign(client, ck, &sp.tx_id(), &rw);
        let tx = Transaction {
            proposal: sp,
            rwset: rw,
            endorsements: vec![e],
        };
        assert_eq!(run(&c, &WorldState::new(), &[tx]), vec![Validity::InvalidEndorsement]);
    }
}
