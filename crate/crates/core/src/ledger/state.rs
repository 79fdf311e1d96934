// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::block::{Block, Validity};
use super::digest::{hash, Digest};
use super::LedgerError;
use crate::codec;
use crate::pdc;

/// The fixed set of world-state namespaces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Namespace {
    File,
    Event,
    KeyPub,
    /// Private key material; values live only in private collections.
    KeyPriv,
    Collection,
    /// Public hashes of private values.
    PvtHash,
}

impl Namespace {
    pub const ALL: [Namespace; 6] = [
        Namespace::File,
        Namespace::Event,
        Namespace::KeyPub,
        Namespace::KeyPriv,
        Namespace::Collection,
        Namespace::PvtHash,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Namespace::File => "file",
            Namespace::Event => "event",
            Namespace::KeyPub => "key-pub",
            Namespace::KeyPriv => "key-priv",
            Namespace::Collection => "collection",
            Namespace::PvtHash => "pvt-hash",
        }
    }
}

impl FromStr for Namespace {
    type Err = LedgerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Namespace::ALL
            .into_iter()
            .find(|ns| ns.as_str() == s)
            .ok_or_else(|| LedgerError::BadKey(format!("unknown namespace {s:?}")))
    }
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StateKey {
    pub namespace: Namespace,
    pub id: String,
}

impl StateKey {
    pub fn new(namespace: Namespace, id: impl Into<String>) -> Result<Self, LedgerError> {
        let id = id.into();
        if id.is_empty() {
            return Err(LedgerError::BadKey("empty key id".into()));
        }
        Ok(StateKey { namespace, id })
    }
}

impl fmt::Display for StateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.namespace.as_str(), self.id)
    }
}

impl fmt::Debug for StateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for StateKey {
    type Err = LedgerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (ns, id) = s
            .split_once(':')
            .ok_or_else(|| LedgerError::BadKey(format!("expected namespace:id, got {s:?}")))?;
        StateKey::new(ns.parse()?, id)
    }
}

/// Commit position of a write; ordered lexicographically.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Version {
    pub height: u64,
    pub tx_index: u32,
}

impl Version {
    pub fn new(height: u64, tx_index: u32) -> Self {
        Version { height, tx_index }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionedValue {
    pub value: Vec<u8>,
    pub version: Version,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldState {
    entries: BTreeMap<StateKey, VersionedValue>,
}

impl WorldState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &StateKey) -> Option<&VersionedValue> {
        self.entries.get(key)
    }

    pub fn version(&self, key: &StateKey) -> Option<Version> {
        self.entries.get(key).map(|v| v.version)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&StateKey, &VersionedValue)> {
        self.entries.iter()
    }

    pub fn namespace(&self, ns: Namespace) -> impl Iterator<Item = (&StateKey, &VersionedValue)> {
        self.entries.iter().filter(move |(k, _)| k.namespace == ns)
    }

    /// Writes `value` at `version`, which must be newer than the current one.
    pub fn put(&mut self, key: StateKey, value: Vec<u8>, version: Version) -> Result<(), LedgerError> {
        if let Some(existing) = self.entries.get(&key) {
            if existing.version >= version {
                return Err(LedgerError::VersionRegression {
                    key: key.to_string(),
                    current: existing.version,
                    attempted: version,
                });
            }
        }
        self.entries.insert(key, VersionedValue { value, version });
        Ok(())
    }

    /// Applies the write sets of the VALID transactions of an already
    /// validated block, atomically for the whole block.
    pub fn apply_block(&mut self, block: &Block) -> Result<(), LedgerError> {
        let height = block.header.height;
        let mut next = self.clone();
        for (idx, (tx, flag)) in block.transactions().iter().zip(&block.flags).enumerate() {
            if *flag != Validity::Valid {
                continue;
            }
            let version = Version::new(height, idx as u32);
            for (key, value) in &tx.rwset.writes {
                next.put(key.clone(), value.clone(), version)?;
            }
            for pw in &tx.rwset.private_writes {
                next.put(
                    pdc::hash_key(&pw.collection, &pw.key),
                    pw.value_hash.0.to_vec(),
                    version,
                )?;
            }
        }
        *self = next;
        Ok(())
    }

    /// Digest over the canonical encoding of every key, value and version.
    pub fn digest(&self) -> Digest {
        hash(&codec::encode(&self.entries))
    }

    pub fn save_snapshot(&self, path: &Path) -> Result<(), LedgerError> {
        let tmp = path.with_extension("snap.partial");
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            codec::write_frame(&mut w, &codec::encode(&self.entries))?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load_snapshot(path: &Path) -> Result<Self, LedgerError> {
        let mut r = BufReader::new(fs::File::open(path)?);
        let bytes = codec::read_frame(&mut r)?.ok_or(codec::CodecError::Truncated)?;
        Ok(WorldState {
            entries: codec::decode(&bytes)?,
        })
    }
}
