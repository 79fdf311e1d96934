// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use crate::identity::{ConsortiumRegistry, Identity};
use crate::ledger::{hash, Digest, StateKey, Version, WorldState};
use crate::offstate::OffStateStore;
use crate::pdc::{CollectionId, PrivateStore};
use crate::txflow::{PolicyExpr, PrivateWrite, Proposal, ReadWriteSet, SideEffect};

/// Everything a contract may touch on the executing peer. Read-only: all
/// effects are captured by [`ExecCtx`].
pub struct PeerEnv<'a> {
    pub identity: &'a Identity,
    /// Peer-local secret seeding per-transaction key material.
    pub secret: [u8; 32],
    pub registry: &'a ConsortiumRegistry,
    pub state: &'a WorldState,
    pub private: &'a PrivateStore,
    pub offstate: &'a OffStateStore,
}

/// Deferred off-state push requested by a contract. The endorsement is only
/// released once the push succeeds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FileSend {
    pub to: crate::identity::OrgId,
    /// Local entry to send.
    pub entry: String,
    pub dest_name: String,
    pub length: u64,
    pub digest: Digest,
}

/// Plaintext written to the hidden staging area; it becomes a visible
/// entry only if the transaction commits VALID.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StagedPlain {
    pub tag: String,
    pub name: String,
}

/// Result of one contract invocation.
#[derive(Debug)]
pub struct Execution {
    pub rwset: ReadWriteSet,
    pub payload: Vec<u8>,
    pub send: Option<FileSend>,
    pub private_staged: Vec<(CollectionId, StateKey, Vec<u8>)>,
    pub staged_plain: Option<StagedPlain>,
    /// Bytes hashed, encrypted or decrypted, for cost accounting.
    pub crypto_bytes: u64,
}

/// Execution context: committed-state reads with version tracking and a
/// buffered write set.
pub struct ExecCtx<'a> {
    env: &'a PeerEnv<'a>,
    proposal: &'a Proposal,
    tx_id: Digest,
    reads: BTreeMap<StateKey, Option<Version>>,
    writes: BTreeMap<StateKey, Vec<u8>>,
    private_writes: BTreeMap<(CollectionId, StateKey), Digest>,
    private_values: BTreeMap<(CollectionId, StateKey), Vec<u8>>,
    key_policies: BTreeMap<StateKey, PolicyExpr>,
    events: Vec<SideEffect>,
    pub(crate) send: Option<FileSend>,
    pub(crate) staged_plain: Option<StagedPlain>,
    crypto_bytes: u64,
}

impl<'a> ExecCtx<'a> {
    pub fn new(env: &'a PeerEnv<'a>, proposal: &'a Proposal) -> Self {
        ExecCtx {
            env,
            proposal,
            tx_id: proposal.tx_id(),
            reads: BTreeMap::new(),
            writes: BTreeMap::new(),
            private_writes: BTreeMap::new(),
            private_values: BTreeMap::new(),
            key_policies: BTreeMap::new(),
            events: Vec::new(),
            send: None,
            staged_plain: None,
            crypto_bytes: 0,
        }
    }

    pub fn env(&self) -> &'a PeerEnv<'a> {
        self.env
    }

    pub fn executor(&self) -> &'a Identity {
        self.env.identity
    }

    pub fn proposal(&self) -> &'a Proposal {
        self.proposal
    }

    pub fn tx_id(&self) -> Digest {
        self.tx_id
    }

    pub fn private(&self) -> &'a PrivateStore {
        self.env.private
    }

    pub fn offstate(&self) -> &'a OffStateStore {
        self.env.offstate
    }

    /// Reads `key`. Own buffered writes are returned as-is; committed
    /// values are recorded in the read set with their version.
    pub fn get(&mut self, key: &StateKey) -> Option<Vec<u8>> {
        if let Some(v) = self.writes.get(key) {
            return Some(v.clone());
        }
        let committed = self.env.state.get(key);
        self.reads
            .entry(key.clone())
            .or_insert_with(|| committed.map(|v| v.version));
        committed.map(|v| v.value.clone())
    }

    pub fn put(&mut self, key: StateKey, value: Vec<u8>) {
        self.writes.insert(key, value);
    }

    pub fn put_private(&mut self, collection: CollectionId, key: StateKey, value: Vec<u8>) {
        self.private_writes.insert((collection, key.clone()), hash(&value));
        self.private_values.insert((collection, key), value);
    }

    pub fn set_key_policy(&mut self, key: StateKey, policy: PolicyExpr) {
        self.key_policies.insert(key, policy);
    }

    pub fn emit(&mut self, effect: SideEffect) {
        self.events.push(effect);
    }

    pub fn charge_crypto(&mut self, bytes: u64) {
        self.crypto_bytes += bytes;
    }

    /// Seeded per-transaction randomness: unique per (peer, transaction,
    /// purpose) and reproducible on re-execution.
    pub fn derive_secret(&self, purpose: &str) -> [u8; 32] {
        hash(&crate::codec::encode(&("contract-rand", purpose, self.env.secret, self.tx_id))).0
    }

    pub fn finish(self, payload: Vec<u8>) -> Execution {
        let rwset = ReadWriteSet {
            reads: self.reads.into_iter().collect(),
            writes: self.writes.into_iter().collect(),
            private_writes: self
                .private_writes
                .into_iter()
                .map(|((collection, key), value_hash)| PrivateWrite {
                    collection,
                    key,
                    value_hash,
                })
                .collect(),
            key_policies: self.key_policies.into_iter().collect(),
            events: self.events,
        };
        Execution {
            rwset,
            payload,
            send: self.send,
            private_staged: self.private_values.into_iter().map(|((c, k), v)| (c, k, v)).collect(),
            staged_plain: self.staged_plain,
            crypto_bytes: self.crypto_bytes,
        }
    }
}
