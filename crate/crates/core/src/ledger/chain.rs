// SPDX-License-Identifier: Apache-2.0

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::block::{commit_hash, Block, BlockBody};
use super::digest::Digest;
use super::LedgerError;
use crate::codec;
use crate::config::ChannelConfig;
use crate::par;

/// Why a chain failed verification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChainFaultKind {
    MissingGenesis,
    MalformedGenesis,
    HeightGap,
    PrevHash,
    DataHash,
    OrdererSignature,
    FlagCount,
    CommitHash,
}

impl fmt::Display for ChainFaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChainFaultKind::MissingGenesis => "missing genesis block",
            ChainFaultKind::MalformedGenesis => "malformed genesis block",
            ChainFaultKind::HeightGap => "non-contiguous height",
            ChainFaultKind::PrevHash => "previous-hash link broken",
            ChainFaultKind::DataHash => "data hash mismatch",
            ChainFaultKind::OrdererSignature => "orderer signature invalid",
            ChainFaultKind::FlagCount => "validity flag count mismatch",
            ChainFaultKind::CommitHash => "commit hash mismatch",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainFault {
    /// Position in the chain (equals the expected height).
    pub index: u64,
    pub kind: ChainFaultKind,
}

impl fmt::Display for ChainFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "block {}: {}", self.index, self.kind)
    }
}

fn check_genesis(block: &Block) -> Result<&ChannelConfig, ChainFaultKind> {
    let config = match (&block.body, block.header.height) {
        (BlockBody::Genesis(c), 0) => c,
        _ => return Err(ChainFaultKind::MalformedGenesis),
    };
    if block.header.prev_hash != Digest::ZERO || !block.flags.is_empty() {
        return Err(ChainFaultKind::MalformedGenesis);
    }
    if block.header.data_hash != block.body.data_hash() {
        return Err(ChainFaultKind::DataHash);
    }
    if block.commit_hash != commit_hash(&Digest::ZERO, &block.header, &[]) {
        return Err(ChainFaultKind::CommitHash);
    }
    Ok(config)
}

fn check_block(config: &ChannelConfig, prev: &Block, block: &Block, index: u64) -> Result<(), ChainFaultKind> {
    if block.header.height != index || matches!(block.body, BlockBody::Genesis(_)) {
        return Err(ChainFaultKind::HeightGap);
    }
    if block.header.prev_hash != prev.header.hash() {
        return Err(ChainFaultKind::PrevHash);
    }
    if block.header.data_hash != block.body.data_hash() {
        return Err(ChainFaultKind::DataHash);
    }
    if !block.is_signed_by_orderer(config) {
        return Err(ChainFaultKind::OrdererSignature);
    }
    if block.flags.len() != block.transactions().len() {
        return Err(ChainFaultKind::FlagCount);
    }
    if block.commit_hash != commit_hash(&prev.commit_hash, &block.header, &block.flags) {
        return Err(ChainFaultKind::CommitHash);
    }
    Ok(())
}

/// Checks header links, data hashes, orderer signatures and the commit-hash
/// chain. Returns the lowest failing block.
pub fn verify_chain_detailed(blocks: &[Block]) -> Result<(), ChainFault> {
    let genesis = blocks.first().ok_or(ChainFault {
        index: 0,
        kind: ChainFaultKind::MissingGenesis,
    })?;
    let config = check_genesis(genesis).map_err(|kind| ChainFault { index: 0, kind })?;
    // Each block's checks only read stored fields of itself and its
    // predecessor, so they run independently.
    let indices: Vec<usize> = (1..blocks.len()).collect();
    let faults = par::map(&indices, |&i| {
        check_block(config, &blocks[i - 1], &blocks[i], i as u64)
            .err()
            .map(|kind| ChainFault { index: i as u64, kind })
    });
    match faults.into_iter().flatten().next() {
        Some(fault) => Err(fault),
        None => Ok(()),
    }
}

pub fn verify_chain(blocks: &[Block]) -> bool {
    verify_chain_detailed(blocks).is_ok()
}

/// Append-only length-prefixed block log, `<channel>.chain`.
#[derive(Debug)]
pub struct ChainFile {
    path: PathBuf,
    writer: BufWriter<File>,
}

impl ChainFile {
    pub fn file_name(channel: &str) -> String {
        format!("{channel}.chain")
    }

    pub fn open_append(path: &Path) -> Result<Self, LedgerError> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(ChainFile {
            path: path.to_path_buf(),
            writer: BufWriter::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, block: &Block) -> Result<(), LedgerError> {
        codec::write_frame(&mut self.writer, &codec::encode(block))?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn read_all(path: &Path) -> Result<Vec<Block>, LedgerError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Vec<Block>, LedgerError> {
        let mut blocks = Vec::new();
        loop {
            let frame = codec::read_frame(&mut r).map_err(|e| LedgerError::CorruptChain {
                index: blocks.len() as u64,
                reason: e.to_string(),
            })?;
            let Some(frame) = frame else { break };
            let block: Block = codec::decode(&frame).map_err(|e| LedgerError::CorruptChain {
                index: blocks.len() as u64,
                reason: e.to_string(),
            })?;
            blocks.push(block);
        }
        Ok(blocks)
    }

    pub fn write_all(path: &Path, blocks: &[Block]) -> Result<(), LedgerError> {
        let tmp = path.with_extension("chain.partial");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            for b in blocks {
                codec::write_frame(&mut w, &codec::encode(b))?;
            }
            w.flush()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }
}

/// The peer-local blockchain.
#[derive(Debug)]
pub struct Chain {
    blocks: Vec<Block>,
    sink: Option<ChainFile>,
}

impl Chain {
    pub fn new(genesis: Block) -> Result<Self, LedgerError> {
        check_genesis(&genesis).map_err(|kind| LedgerError::ChainMismatch(ChainFault { index: 0, kind }))?;
        Ok(Chain {
            blocks: vec![genesis],
            sink: None,
        })
    }

    /// Loads an existing log (verifying it) or starts a new one from
    /// `genesis`.
    pub fn open(path: &Path, genesis: Block) -> Result<Self, LedgerError> {
        let mut chain = if path.exists() {
            let blocks = ChainFile::read_all(path)?;
            verify_chain_detailed(&blocks).map_err(LedgerError::ChainMismatch)?;
            if blocks[0] != genesis {
                return Err(LedgerError::GenesisMismatch);
            }
            Chain { blocks, sink: None }
        } else {
            let mut file = ChainFile::open_append(path)?;
            file.append(&genesis)?;
            Chain::new(genesis)?
        };
        chain.sink = Some(ChainFile::open_append(path)?);
        Ok(chain)
    }

    pub fn tip(&self) -> &Block {
        self.blocks.last().expect("chain always holds genesis")
    }

    pub fn height(&self) -> u64 {
        self.tip().header.height
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn config(&self) -> &ChannelConfig {
        self.blocks[0].config().expect("genesis carries config")
    }

    /// Appends a validated, sealed block as the new tip.
    pub fn append_block(&mut self, block: Block) -> Result<(), LedgerError> {
        let index = self.blocks.len() as u64;
        check_block(self.config(), self.tip(), &block, index)
            .map_err(|kind| LedgerError::ChainMismatch(ChainFault { index, kind }))?;
        if let Some(sink) = &mut self.sink {
            sink.append(&block)?;
        }
        self.blocks.push(block);
        Ok(())
    }
}
