// SPDX-License-Identifier: Apache-2.0

use std::fmt;

use serde::{Deserialize, Serialize};

use super::digest::{hash, Digest};
use crate::codec;
use crate::config::ChannelConfig;
use crate::identity::{self, Identity, Role, Signature, SigningKey};
use crate::txflow::Transaction;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockHeader {
    pub height: u64,
    pub prev_hash: Digest,
    pub data_hash: Digest,
}

impl BlockHeader {
    pub fn hash(&self) -> Digest {
        hash(&codec::encode(self))
    }

    pub fn signing_bytes(&self) -> Vec<u8> {
        codec::signing_bytes("block-header", self)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockBody {
    /// Height 0 carries the channel configuration that anchors every
    /// later signature check.
    Genesis(Box<ChannelConfig>),
    Transactions(Vec<Transaction>),
}

impl BlockBody {
    pub fn data_hash(&self) -> Digest {
        hash(&codec::encode(self))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Validity {
    Valid,
    InvalidEndorsement,
    InvalidMvcc,
    InvalidOther,
}

impl fmt::Display for Validity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Validity::Valid => "VALID",
            Validity::InvalidEndorsement => "INVALID_ENDORSEMENT",
            Validity::InvalidMvcc => "INVALID_MVCC",
            Validity::InvalidOther => "INVALID_OTHER",
        })
    }
}

/// An ordered batch. `flags` and `commit_hash` are filled in by the
/// committing peer; the commit hash chains the validity flags so the peer's
/// verdicts are as tamper-evident as the orderer's header.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub header: BlockHeader,
    pub body: BlockBody,
    pub orderer_signature: Option<Signature>,
    pub flags: Vec<Validity>,
    pub commit_hash: Digest,
}

pub fn commit_hash(prev_commit: &Digest, header: &BlockHeader, flags: &[Validity]) -> Digest {
    hash(&codec::encode(&("commit", prev_commit, header.hash(), flags)))
}

impl Block {
    pub fn genesis(config: ChannelConfig) -> Block {
        let body = BlockBody::Genesis(Box::new(config));
        let header = BlockHeader {
            height: 0,
            prev_hash: Digest::ZERO,
            data_hash: body.data_hash(),
        };
        let commit_hash = commit_hash(&Digest::ZERO, &header, &[]);
        Block {
            header,
            body,
            orderer_signature: None,
            flags: Vec::new(),
            commit_hash,
        }
    }

    /// Builds and signs an uncommitted block following `prev`.
    pub fn cut(prev: &BlockHeader, txs: Vec<Transaction>, orderer: &Identity, key: &SigningKey) -> Block {
        let body = BlockBody::Transactions(txs);
        let header = BlockHeader {
            height: prev.height + 1,
            prev_hash: prev.hash(),
            data_hash: body.data_hash(),
        };
        let sig = identity::sign(orderer, key, &header.signing_bytes());
        Block {
            header,
            body,
            orderer_signature: Some(sig),
            flags: Vec::new(),
            commit_hash: Digest::ZERO,
        }
    }

    pub fn transactions(&self) -> &[Transaction] {
        match &self.body {
            BlockBody::Transactions(txs) => txs,
            BlockBody::Genesis(_) => &[],
        }
    }

    pub fn config(&self) -> Option<&ChannelConfig> {
        match &self.body {
            BlockBody::Genesis(c) => Some(c),
            BlockBody::Transactions(_) => None,
        }
    }

    /// Records the validation verdicts and seals them into the commit hash.
    pub fn seal(&mut self, flags: Vec<Validity>, prev_commit: &Digest) {
        self.commit_hash = commit_hash(prev_commit, &self.header, &flags);
        self.flags = flags;
    }

    pub fn is_signed_by_orderer(&self, config: &ChannelConfig) -> bool {
        let Some(sig) = &self.orderer_signature else {
            return false;
        };
        config
            .registry
            .verify_signed(&self.header.signing_bytes(), sig)
            .is_some_and(|id| id.role == Role::Orderer)
    }
}
