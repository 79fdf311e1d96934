// SPDX-License-Identifier: Apache-2.0

//! Per-peer ledger: the versioned world state, the hash-chained block log and
//! the digest primitive used everywhere else.

mod block;
mod chain;
mod digest;
mod state;

use std::io;

use thiserror::Error;

pub use block::{commit_hash, Block, BlockBody, BlockHeader, Validity};
pub use chain::{verify_chain, verify_chain_detailed, Chain, ChainFault, ChainFaultKind, ChainFile};
pub use digest::{hash, hash_reader, Digest, Hasher};
pub use state::{Namespace, StateKey, Version, VersionedValue, WorldState};

use crate::codec::CodecError;

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("chain mismatch at {0}")]
    ChainMismatch(ChainFault),
    #[error("stored chain does not start with the configured genesis block")]
    GenesisMismatch,
    #[error("corrupt chain log at block {index}: {reason}")]
    CorruptChain { index: u64, reason: String },
    #[error("invalid state key: {0}")]
    BadKey(String),
    #[error("version regression on {key}: {current:?} -> {attempted:?}")]
    VersionRegression {
        key: String,
        current: Version,
        attempted: Version,
    },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Rebuilds world state from a chain by applying every block in order.
pub fn replay(blocks: &[Block]) -> Result<WorldState, LedgerError> {
    let mut state = WorldState::new();
    for block in blocks.iter().skip(1) {
        state.apply_block(block)?;
    }
    Ok(state)
}
