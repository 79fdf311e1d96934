// SPDX-License-Identifier: Apache-2.0

//! Execute-order-validate transaction pipeline.
//!
//! Clients sign a [`Proposal`]; endorsing peers execute the contract against
//! their committed state and sign the hash of the resulting
//! [`ReadWriteSet`]; the client [`assemble`]s matching endorsements into a
//! [`Transaction`]; the orderer batches transactions into blocks; every peer
//! then runs [`validate_block`] (policy check followed by the MVCC check)
//! before committing.

mod orderer;
mod policy;
mod validate;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use orderer::{order, Batcher};
pub use policy::{
    collection_policy, find_collection, resolve_policy, resolve_policy_with, EndorsementPolicy, PolicyError,
    PolicyExpr, PolicyLevel,
};
pub use validate::{validate_block, validate_transactions, ValidationContext};

use crate::codec;
use crate::identity::{self, ConsortiumRegistry, Identity, OrgId, Role, Signature, SigningKey};
use crate::ledger::{hash, Digest, StateKey, Version};
use crate::pdc::CollectionId;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TxFlowError {
    #[error("no endorsement responses")]
    NoResponses,
    #[error("endorsers returned different execution results")]
    MismatchedEndorsements,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposal {
    pub proposer: Identity,
    pub channel: String,
    pub function: String,
    pub args: Vec<String>,
    /// Milliseconds, chosen by the proposer. The only clock contract code
    /// may read.
    pub timestamp_ms: u64,
    pub nonce: [u8; 16],
}

impl Proposal {
    pub fn tx_id(&self) -> Digest {
        hash(&codec::signing_bytes("proposal", self))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedProposal {
    pub proposal: Proposal,
    pub signature: Signature,
}

impl SignedProposal {
    pub fn sign(proposal: Proposal, key: &SigningKey) -> Self {
        let signature = identity::sign(&proposal.proposer, key, &codec::signing_bytes("proposal", &proposal));
        SignedProposal { proposal, signature }
    }

    pub fn tx_id(&self) -> Digest {
        self.proposal.tx_id()
    }

    /// The proposer is an admitted client and really signed this proposal.
    pub fn creator_ok(&self, registry: &ConsortiumRegistry) -> bool {
        let p = &self.proposal;
        p.proposer.role == Role::Client
            && p.channel == registry.channel()
            && registry.admit(&p.proposer)
            && identity::verify(&p.proposer, &codec::signing_bytes("proposal", p), &self.signature)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PrivateWrite {
    pub collection: CollectionId,
    pub key: StateKey,
    pub value_hash: Digest,
}

/// Off-ledger actions a contract performed during execution, recorded so the
/// ledger shows what was claimed to have happened.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SideEffect {
    /// Pushed an off-state entry to a peer of `to`.
    FileSent {
        to: OrgId,
        name: String,
        length: u64,
        digest: Digest,
    },
    /// Wrote an off-state entry that becomes visible at commit.
    PlaintextStaged { name: String, length: u64, digest: Digest },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadWriteSet {
    /// `None` records a read of an absent key.
    pub reads: Vec<(StateKey, Option<Version>)>,
    pub writes: Vec<(StateKey, Vec<u8>)>,
    /// Hashes only; private values travel separately.
    pub private_writes: Vec<PrivateWrite>,
    /// Key-level endorsement policies the contract attaches to its writes.
    pub key_policies: Vec<(StateKey, PolicyExpr)>,
    pub events: Vec<SideEffect>,
}

impl ReadWriteSet {
    pub fn result_hash(&self) -> Digest {
        hash(&codec::encode(self))
    }

    /// No duplicate keys among reads, writes or private writes.
    pub fn is_well_formed(&self) -> bool {
        fn unique<T: Ord>(it: impl Iterator<Item = T>) -> bool {
            let mut seen = BTreeSet::new();
            it.into_iter().all(|x| seen.insert(x))
        }
        unique(self.reads.iter().map(|(k, _)| k))
            && unique(self.writes.iter().map(|(k, _)| k))
            && unique(self.private_writes.iter().map(|pw| (&pw.collection, &pw.key)))
            && unique(self.key_policies.iter().map(|(k, _)| k))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endorsement {
    pub endorser: Identity,
    pub result_hash: Digest,
    pub signature: Signature,
}

pub fn endorsement_message(tx_id: &Digest, result_hash: &Digest) -> Vec<u8> {
    codec::signing_bytes("endorsement", &(tx_id, result_hash))
}

impl Endorsement {
    pub fn sign(endorser: &Identity, key: &SigningKey, tx_id: &Digest, rwset: &ReadWriteSet) -> Self {
        let result_hash = rwset.result_hash();
        Endorsement {
            endorser: endorser.clone(),
            signature: identity::sign(endorser, key, &endorsement_message(tx_id, &result_hash)),
            result_hash,
        }
    }

    pub fn verifies(&self, registry: &ConsortiumRegistry, tx_id: &Digest) -> bool {
        self.endorser.role == Role::Peer
            && registry.admit(&self.endorser)
            && identity::verify(&self.endorser, &endorsement_message(tx_id, &self.result_hash), &self.signature)
    }
}

/// An endorser's answer to a proposal.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposalResponse {
    pub rwset: ReadWriteSet,
    /// Contract return value. Not part of the endorsed result.
    pub payload: Vec<u8>,
    pub endorsement: Endorsement,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub proposal: SignedProposal,
    pub rwset: ReadWriteSet,
    pub endorsements: Vec<Endorsement>,
}

impl Transaction {
    pub fn tx_id(&self) -> Digest {
        self.proposal.tx_id()
    }

    pub fn function(&self) -> &str {
        &self.proposal.proposal.function
    }

    pub fn endorsing_orgs(&self) -> BTreeSet<OrgId> {
        self.endorsements.iter().map(|e| e.endorser.org.clone()).collect()
    }
}

/// Builds a transaction iff every response carries the same result hash.
/// Policy satisfaction is left to validation.
pub fn assemble(proposal: SignedProposal, responses: Vec<ProposalResponse>) -> Result<Transaction, TxFlowError> {
    let first = responses.first().ok_or(TxFlowError::NoResponses)?;
    let expected = first.rwset.result_hash();
    if responses
        .iter()
        .any(|r| r.endorsement.result_hash != expected || r.rwset.result_hash() != expected)
    {
        return Err(TxFlowError::MismatchedEndorsements);
    }
    let rwset = first.rwset.clone();
    let endorsements = responses.into_iter().map(|r| r.endorsement).collect();
    Ok(Transaction {
        proposal,
        rwset,
        endorsements,
    })
}
