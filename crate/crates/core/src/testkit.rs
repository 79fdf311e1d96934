// SPDX-License-Identifier: Apache-2.0

//! Fixtures shared by unit and integration tests.

use std::collections::BTreeMap;

use std::collections::HashSet;
use std::path::Path;

use crate::config::{peer_label, ChannelConfig, GenesisFile, NetworkConfig, Testbed, TransportKind};
use crate::identity::{self, Identity, OrgId, Role, SigningKey};
use crate::ledger::{hash, Block, Digest, Validity, WorldState};
use crate::txflow::{validate_block, Endorsement, Proposal, ReadWriteSet, SignedProposal, Transaction, ValidationContext};

/// A generated consortium with every node's key at hand.
pub struct Consortium {
    pub genesis: GenesisFile,
    pub network: NetworkConfig,
    pub config: ChannelConfig,
    pub keys: BTreeMap<String, SigningKey>,
}

impl Consortium {
    pub fn new(testbed: Testbed, seed: u64) -> Self {
        let (genesis, keys) = testbed.generate(seed, TransportKind::Sim, 0);
        let network = genesis.validate().expect("generated genesis validates");
        Consortium {
            config: network.channel.clone(),
            genesis,
            network,
            keys,
        }
    }

    /// Org1/Org2 with clients, Org3 with the orderer.
    pub fn three_org(seed: u64) -> Self {
        Self::new(Testbed::ThreeOrg, seed)
    }

    pub fn member(&self, label: &str) -> (&Identity, &SigningKey) {
        let id = self.network.identity(label).unwrap_or_else(|| panic!("no node {label}"));
        (id, &self.keys[label])
    }

    pub fn unsigned_proposal(&self, label: &str, function: &str, args: &[&str], nonce_seed: u64) -> Proposal {
        let (id, _) = self.member(label);
        let mut nonce = [0u8; 16];
        nonce.copy_from_slice(&hash(&nonce_seed.to_be_bytes()).0[..16]);
        Proposal {
            proposer: id.clone(),
            channel: self.config.registry.channel().to_string(),
            function: function.to_string(),
            args: args.iter().map(|s| s.to_string()).collect(),
            timestamp_ms: 1_000 + nonce_seed,
            nonce,
        }
    }

    pub fn proposal(&self, label: &str, function: &str, args: &[&str], nonce_seed: u64) -> SignedProposal {
        let p = self.unsigned_proposal(label, function, args, nonce_seed);
        SignedProposal::sign(p, self.member(label).1)
    }

    /// A transaction carrying `rwset`, endorsed by each of `peers`.
    pub fn endorse_with(&self, client: &str, peers: &[&str], rwset: ReadWriteSet, nonce_seed: u64) -> Transaction {
        let proposal = self.proposal(client, "test", &[], nonce_seed);
        let tx_id = proposal.tx_id();
        let endorsements = peers
            .iter()
            .map(|p| {
                let (id, key) = self.member(p);
                Endorsement::sign(id, key, &tx_id, &rwset)
            })
            .collect();
        Transaction {
            proposal,
            rwset,
            endorsements,
        }
    }
}

/// How [`Forger::recut`] assigns validity flags.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flags {
    /// Keep each block's recorded flags, as a lying committer would.
    Recorded,
    /// Validate the rewritten blocks honestly.
    Revalidate,
}

/// Rewrites chains the way an insider holding every key could, to exercise
/// the auditor.
pub struct Forger<'a> {
    pub c: &'a Consortium,
}

impl<'a> Forger<'a> {
    pub fn new(c: &'a Consortium) -> Self {
        Forger { c }
    }

    /// Inverts the low bit of the byte at `offset`.
    pub fn flip_byte(path: &Path, offset: u64) -> std::io::Result<()> {
        let mut bytes = std::fs::read(path)?;
        bytes[offset as usize] ^= 1;
        std::fs::write(path, bytes)
    }

    /// Byte range of each block's frame in an exported chain.
    pub fn frame_offsets(blocks: &[Block]) -> Vec<(u64, u64)> {
        let mut at = 0;
        blocks
            .iter()
            .map(|b| {
                let len = 4 + crate::codec::encoded_len(b);
                let r = (at, at + len);
                at += len;
                r
            })
            .collect()
    }

    /// Replaces the orderer signature of block `index` with one by `impostor`.
    pub fn forge_orderer_signature(&self, blocks: &mut [Block], index: usize, impostor: &str) {
        let (id, key) = self.c.member(impostor);
        let b = &mut blocks[index];
        b.orderer_signature = Some(identity::sign(id, key, &b.header.signing_bytes()));
    }

    fn orderer(&self) -> &str {
        let id = self
            .c
            .config
            .registry
            .with_role(Role::Orderer)
            .next()
            .expect("consortium has an orderer");
        &id.label
    }

    /// Replaces the endorsements of `tx` with fresh ones from the peers of
    /// `orgs`, matching its current read-write set.
    pub fn endorse(&self, tx: &mut Transaction, orgs: &[OrgId]) {
        let tx_id = tx.tx_id();
        tx.endorsements = orgs
            .iter()
            .map(|o| {
                let (id, key) = self.c.member(&peer_label(o.as_str()));
                Endorsement::sign(id, key, &tx_id, &tx.rwset)
            })
            .collect();
    }

    /// Re-cuts every block after genesis from `txs`, signing with the real
    /// orderer key. Transactions listed in `refresh` get their read versions
    /// set to the state they now follow and are re-endorsed by their
    /// original endorsing orgs.
    pub fn recut(&self, blocks: &[Block], mut txs: Vec<Vec<Transaction>>, refresh: &[Digest], flags: Flags) -> Vec<Block> {
        let genesis = blocks[0].clone();
        let config = genesis.config().expect("genesis").clone();
        let (oid, okey) = self.c.member(self.orderer());
        let refresh: HashSet<Digest> = refresh.iter().copied().collect();
        let mut out = vec![genesis];
        let mut state = WorldState::new();
        let mut seen = HashSet::new();
        for (i, batch) in txs.iter_mut().enumerate() {
            for tx in batch.iter_mut().filter(|t| refresh.contains(&t.tx_id())) {
                for (k, v) in tx.rwset.reads.iter_mut() {
                    *v = state.version(k);
                }
                let orgs: Vec<OrgId> = tx.endorsing_orgs().into_iter().collect();
                self.endorse(tx, &orgs);
            }
            let prev = out.last().expect("genesis");
            let mut block = Block::cut(&prev.header, batch.clone(), oid, okey);
            let recorded = blocks.get(i + 1).map(|b| b.flags.clone());
            let f = match (flags, recorded) {
                (Flags::Recorded, Some(r)) if r.len() == batch.len() => r,
                _ => validate_block(
                    &ValidationContext {
                        config: &config,
                        state: &state,
                        seen_tx_ids: &seen,
                    },
                    &block,
                ),
            };
            block.seal(f, &prev.commit_hash);
            state.apply_block(&block).expect("forged block applies");
            seen.extend(block.transactions().iter().map(Transaction::tx_id));
            out.push(block);
        }
        out
    }

    /// Transactions of every block after genesis.
    pub fn batches(blocks: &[Block]) -> Vec<Vec<Transaction>> {
        blocks[1..].iter().map(|b| b.transactions().to_vec()).collect()
    }

    /// Flags of every block after genesis.
    pub fn flags(blocks: &[Block]) -> Vec<Vec<Validity>> {
        blocks[1..].iter().map(|b| b.flags.clone()).collect()
    }
}
