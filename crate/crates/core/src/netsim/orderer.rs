// SPDX-License-Identifier: Apache-2.0

use std::any::Any;
use std::time::Duration;

use log::debug;

use super::{Message, Node, NodeIo};
use crate::config::ChannelConfig;
use crate::identity::{Identity, Role, SigningKey};
use crate::ledger::{Block, BlockHeader};
use crate::txflow::{Batcher, Transaction};

/// Single ordering node: batches submitted transactions into signed blocks
/// and delivers each block to every peer.
pub struct OrdererNode {
    identity: Identity,
    key: SigningKey,
    config: ChannelConfig,
    batcher: Batcher,
    last: BlockHeader,
    peers: Vec<String>,
    /// Deadline of the currently armed batch timer.
    armed: Option<u64>,
    pub blocks_cut: u64,
}

impl OrdererNode {
    pub fn new(identity: Identity, key: SigningKey, config: ChannelConfig) -> Self {
        let peers = config.registry.with_role(Role::Peer).map(|i| i.label.clone()).collect();
        let last = Block::genesis(config.clone()).header;
        OrdererNode {
            batcher: Batcher::new(config.batch_size, Duration::from_millis(config.batch_timeout_ms)),
            identity,
            key,
            config,
            last,
            peers,
            armed: None,
            blocks_cut: 0,
        }
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.config
    }

    fn cut(&mut self, txs: Vec<Transaction>, io: &mut dyn NodeIo) {
        let block = Block::cut(&self.last, txs, &self.identity, &self.key);
        self.last = block.header.clone();
        self.blocks_cut += 1;
        debug!("orderer: block {} with {} txs", block.header.height, block.transactions().len());
        for p in &self.peers {
            io.send(p, Message::Deliver(Box::new(block.clone())));
        }
    }

    fn arm(&mut self, io: &mut dyn NodeIo) {
        if let Some(d) = self.batcher.deadline() {
            if self.armed != Some(d) {
                self.armed = Some(d);
                io.set_timer(d, d);
            }
        }
    }
}

impl Node for OrdererNode {
    fn label(&self) -> &str {
        &self.identity.label
    }

    fn on_message(&mut self, from: &str, msg: Message, io: &mut dyn NodeIo) {
        let Message::Submit(tx) = msg else {
            debug!("orderer: ignoring {} from {from}", msg.kind());
            return;
        };
        if !tx.proposal.creator_ok(&self.config.registry) {
            debug!("orderer: refusing submission from {from}");
            return;
        }
        if let Some(batch) = self.batcher.push(*tx, io.now()) {
            self.cut(batch, io);
        }
        self.arm(io);
    }

    fn on_timer(&mut self, token: u64, io: &mut dyn NodeIo) {
        if self.armed == Some(token) {
            self.armed = None;
        }
        if let Some(batch) = self.batcher.poll(io.now()) {
            self.cut(batch, io);
        }
        self.arm(io);
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}
