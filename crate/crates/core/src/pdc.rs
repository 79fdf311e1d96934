// SPDX-License-Identifier: Apache-2.0

//! Private data collections.
//!
//! A collection is identified by the hash of the key it protects and its
//! sorted member orgs, so resharing a value to a wider membership creates a
//! new collection. Member peers hold values in a [`PrivateStore`]; every peer
//! holds only the value hash in world state, under the `pvt-hash` namespace.
//!
//! Values written during endorsement are staged under the transaction id and
//! become committed only when that transaction is flagged VALID. Staged and
//! committed entries are journaled so a restart loses neither.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, CodecError};
use crate::contract::ExecCtx;
use crate::identity::OrgId;
use crate::ledger::{hash, Digest, Namespace, StateKey};
use crate::txflow::{collection_policy, PolicyExpr};

#[derive(Debug, Error)]
pub enum PdcError {
    #[error("{org} is not a member of collection {collection}")]
    NotAMember { org: OrgId, collection: CollectionId },
    #[error("no committed private value for {0}")]
    NotFound(StateKey),
    #[error("collection {0} is not defined")]
    UnknownCollection(CollectionId),
    #[error("new membership must include every current member")]
    ShrinkingMembership,
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CollectionId(pub Digest);

impl CollectionId {
    pub fn derive(key: &StateKey, members: &BTreeSet<OrgId>) -> Self {
        CollectionId(hash(&codec::encode(&("collection", key, members))))
    }

    /// Where the public definition is recorded.
    pub fn state_key(&self) -> StateKey {
        StateKey {
            namespace: Namespace::Collection,
            id: self.0.to_hex(),
        }
    }
}

impl fmt::Display for CollectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.short())
    }
}

impl fmt::Debug for CollectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CollectionId({})", self.0.short())
    }
}

/// Public record of a collection, written to world state when created.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectionDef {
    pub id: CollectionId,
    pub key: StateKey,
    pub members: BTreeSet<OrgId>,
    /// Collection-level endorsement policy: the orgs that already held the
    /// value when the collection was created.
    pub endorsers: PolicyExpr,
}

impl CollectionDef {
    pub fn new(key: &StateKey, members: BTreeSet<OrgId>, holders: BTreeSet<OrgId>) -> Self {
        CollectionDef {
            id: CollectionId::derive(key, &members),
            key: key.clone(),
            endorsers: collection_policy(&holders),
            members,
        }
    }

    pub fn is_member(&self, org: &OrgId) -> bool {
        self.members.contains(org)
    }
}

/// World-state key holding the public hash of a private value.
pub fn hash_key(collection: &CollectionId, key: &StateKey) -> StateKey {
    StateKey {
        namespace: Namespace::PvtHash,
        id: format!("{}/{}", collection.0.to_hex(), key),
    }
}

/// A private value pushed to a member peer after its transaction commits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrivatePayload {
    pub collection: CollectionId,
    pub key: StateKey,
    pub value: Vec<u8>,
    pub tx_id: Digest,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AcceptStatus {
    Accepted,
    Duplicate,
    /// The referenced transaction is not in this peer's chain yet.
    NotYetCommitted,
    Rejected(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrivateEntry {
    pub value: Vec<u8>,
    pub tx_id: Digest,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
enum Journal {
    Staged {
        tx_id: Digest,
        collection: CollectionId,
        key: StateKey,
        value: Vec<u8>,
    },
    Committed(Digest),
    Discarded(Digest),
    Accepted(PrivatePayload),
}

type Slot = (CollectionId, StateKey);

#[derive(Debug, Default)]
pub struct PrivateStore {
    journal: Option<(PathBuf, BufWriter<File>)>,
    committed: BTreeMap<Slot, PrivateEntry>,
    staged: BTreeMap<Digest, Vec<(CollectionId, StateKey, Vec<u8>)>>,
}

impl PrivateStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) the journal in `dir` and replays it.
    pub fn open(dir: &Path) -> Result<Self, PdcError> {
        fs::create_dir_all(dir)?;
        let path = dir.join("private.wal");
        let mut store = PrivateStore::default();
        if path.exists() {
            let mut r = BufReader::new(File::open(&path)?);
            // A torn final record from a crash is ignored.
            while let Ok(Some(frame)) = codec::read_frame(&mut r) {
                let Ok(rec) = codec::decode::<Journal>(&frame) else { break };
                store.apply(rec);
            }
        }
        let w = BufWriter::new(OpenOptions::new().create(true).append(true).open(&path)?);
        store.journal = Some((path, w));
        Ok(store)
    }

    fn apply(&mut self, rec: Journal) {
        match rec {
            Journal::Staged {
                tx_id,
                collection,
                key,
                value,
            } => self.staged.entry(tx_id).or_default().push((collection, key, value)),
            Journal::Committed(tx_id) => {
                for (c, k, value) in self.staged.remove(&tx_id).unwrap_or_default() {
                    self.committed.insert((c, k), PrivateEntry { value, tx_id });
                }
            }
            Journal::Discarded(tx_id) => {
                self.staged.remove(&tx_id);
            }
            Journal::Accepted(p) => {
                self.committed.insert(
                    (p.collection, p.key),
                    PrivateEntry {
                        value: p.value,
                        tx_id: p.tx_id,
                    },
                );
            }
        }
    }

    fn record(&mut self, rec: Journal) -> Result<(), PdcError> {
        if let Some((_, w)) = &mut self.journal {
            codec::write_frame(w, &codec::encode(&rec))?;
            w.flush()?;
        }
        self.apply(rec);
        Ok(())
    }

    pub fn stage(&mut self, tx_id: Digest, collection: CollectionId, key: StateKey, value: Vec<u8>) -> Result<(), PdcError> {
        self.record(Journal::Staged {
            tx_id,
            collection,
            key,
            value,
        })
    }

    pub fn staged(&self, tx_id: &Digest) -> &[(CollectionId, StateKey, Vec<u8>)] {
        self.staged.get(tx_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn has_staged(&self, tx_id: &Digest) -> bool {
        self.staged.contains_key(tx_id)
    }

    /// Promotes the values staged by `tx_id`. Returns what was promoted.
    pub fn commit_tx(&mut self, tx_id: Digest) -> Result<Vec<PrivatePayload>, PdcError> {
        let Some(entries) = self.staged.get(&tx_id) else {
            return Ok(Vec::new());
        };
        let out = entries
            .iter()
            .map(|(c, k, v)| PrivatePayload {
                collection: *c,
                key: k.clone(),
                value: v.clone(),
                tx_id,
            })
            .collect();
        self.record(Journal::Committed(tx_id))?;
        Ok(out)
    }

    pub fn discard_tx(&mut self, tx_id: Digest) -> Result<(), PdcError> {
        if self.staged.contains_key(&tx_id) {
            self.record(Journal::Discarded(tx_id))?;
        }
        Ok(())
    }

    pub fn get(&self, collection: &CollectionId, key: &StateKey) -> Option<&PrivateEntry> {
        self.committed.get(&(*collection, key.clone()))
    }

    /// Stores a pushed value that the caller has already checked against
    /// the committed transaction. Idempotent.
    pub fn insert_accepted(&mut self, payload: PrivatePayload) -> Result<AcceptStatus, PdcError> {
        if let Some(existing) = self.get(&payload.collection, &payload.key) {
            if existing.value == payload.value {
                return Ok(AcceptStatus::Duplicate);
            }
        }
        self.record(Journal::Accepted(payload))?;
        Ok(AcceptStatus::Accepted)
    }

    pub fn committed(&self) -> impl Iterator<Item = (&CollectionId, &StateKey, &PrivateEntry)> {
        self.committed.iter().map(|((c, k), e)| (c, k, e))
    }

    pub fn flush(&mut self) -> Result<(), PdcError> {
        if let Some((_, w)) = &mut self.journal {
            w.flush()?;
            w.get_ref().sync_all()?;
        }
        Ok(())
    }
}

/// Records a private write of `value` under `key` in `def`. The public
/// footprint is the value hash; the value itself is staged for commit.
pub fn private_put(ctx: &mut ExecCtx<'_>, def: &CollectionDef, key: &StateKey, value: Vec<u8>) -> Result<(), PdcError> {
    let org = &ctx.executor().org;
    if !def.is_member(org) {
        return Err(PdcError::NotAMember {
            org: org.clone(),
            collection: def.id,
        });
    }
    let def_key = def.id.state_key();
    if ctx.get(&def_key).is_none() {
        ctx.put(def_key, codec::encode(def));
    }
    ctx.put_private(def.id, key.clone(), value);
    Ok(())
}

/// Returns the committed value of `key` in `collection`, recording a read of
/// its public hash.
pub fn private_get(ctx: &mut ExecCtx<'_>, collection: &CollectionId, key: &StateKey) -> Result<Vec<u8>, PdcError> {
    let def: CollectionDef = match ctx.get(&collection.state_key()) {
        Some(bytes) => codec::decode(&bytes)?,
        None => return Err(PdcError::UnknownCollection(*collection)),
    };
    let org = ctx.executor().org.clone();
    if !def.is_member(&org) {
        return Err(PdcError::NotAMember {
            org,
            collection: *collection,
        });
    }
    let expected = ctx.get(&hash_key(collection, key)).ok_or_else(|| PdcError::NotFound(key.clone()))?;
    match ctx.private().get(collection, key) {
        Some(e) if hash(&e.value).0.as_slice() == expected.as_slice() => {
            let value = e.value.clone();
            Ok(value)
        }
        _ => Err(PdcError::NotFound(key.clone())),
    }
}

/// Copies `key` from `old` into the collection with `new_members`, which
/// must contain every old member. Returns the new definition.
pub fn reshare(
    ctx: &mut ExecCtx<'_>,
    old: &CollectionDef,
    new_members: BTreeSet<OrgId>,
    key: &StateKey,
) -> Result<CollectionDef, PdcError> {
    let org = ctx.executor().org.clone();
    if !old.is_member(&org) {
        return Err(PdcError::NotAMember {
            org,
            collection: old.id,
        });
    }
    if !new_members.is_superset(&old.members) {
        return Err(PdcError::ShrinkingMembership);
    }
    let value = private_get(ctx, &old.id, key)?;
    let new = CollectionDef::new(key, new_members, old.members.clone());
    private_put(ctx, &new, key, value)?;
    Ok(new)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orgs(xs: &[&str]) -> BTreeSet<OrgId> {
        xs.iter().map(|s| OrgId::new(*s).unwrap()).collect()
    }

    fn key() -> StateKey {
        StateKey::new(Namespace::KeyPriv, "k1").unwrap()
    }

    #[test]
    fn collection_id_depends_on_members() {
        let a = CollectionId::derive(&key(), &orgs(&["Org1"]));
        let b = CollectionId::derive(&key(), &orgs(&["Org1", "Org2"]));
        assert_ne!(a, b);
        assert_eq!(a, CollectionId::derive(&key(), &orgs(&["Org1"])));
    }

    #[test]
    fn stage_commit_discard() {
        let mut s = PrivateStore::in_memory();
        let c = CollectionId::derive(&key(), &orgs(&["Org1"]));
        let t1 = hash(b"t1");
        let t2 = hash(b"t2");
        s.stage(t1, c, key(), b"v1".to_vec()).unwrap();
        s.stage(t2, c, key(), b"v2".to_vec()).unwrap();
        assert!(s.get(&c, &key()).is_none());
        s.discard_tx(t2).unwrap();
        let pushed = s.commit_tx(t1).unwrap();
        assert_eq!(pushed.len(), 1);
        assert_eq!(s.get(&c, &key()).unwrap().value, b"v1");
        assert!(!s.has_staged(&t2));
    }

    #[test]
    fn journal_survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        let c = CollectionId::derive(&key(), &orgs(&["Org1"]));
        let t1 = hash(b"t1");
        let t2 = hash(b"t2");
        {
            let mut s = PrivateStore::open(dir.path()).unwrap();
            s.stage(t1, c, key(), b"v1".to_vec()).unwrap();
            s.commit_tx(t1).unwrap();
            s.stage(t2, c, key(), b"v2".to_vec()).unwrap();
        }
        let s = PrivateStore::open(dir.path()).unwrap();
        assert_eq!(s.get(&c, &key()).unwrap().value, b"v1");
        assert_eq!(s.staged(&t2).len(), 1);
    }

    #[test]
    fn accept_is_idempotent() {
        let mut s = PrivateStore::in_memory();
        let p = PrivatePayload {
            collection: CollectionId::derive(&key(), &orgs(&["Org1", "Org2"])),
            key: key(),
            value: vec![7; 32],
            tx_id: hash(b"t"),
        };
        assert_eq!(s.insert_accepted(p.clone()).unwrap(), AcceptStatus::Accepted);
        let once: Vec<_> = s.committed().map(|(c, k, e)| (*c, k.clone(), e.clone())).collect();
        for _ in 0..5 {
            assert_eq!(s.insert_accepted(p.clone()).unwrap(), AcceptStatus::Duplicate);
        }
        let many: Vec<_> = s.committed().map(|(c, k, e)| (*c, k.clone(), e.clone())).collect();
        assert_eq!(once, many);
    }
}
