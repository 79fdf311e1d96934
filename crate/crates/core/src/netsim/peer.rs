// SPDX-License-Identifier: Apache-2.0

use std::any::Any;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};

use log::{debug, warn};

use super::{Message, Node, NodeError, NodeIo, MS};
use crate::codec;
use crate::config::{ChannelConfig, CostSpec, PeerSection};
use crate::contract::{self, ContractError, FileSend, PeerEnv, StagedPlain};
use crate::identity::{Identity, OrgId, Role, SigningKey};
use crate::ledger::{hash, Block, Chain, ChainFile, Digest, Validity, WorldState};
use crate::offstate::{OffStateStore, SenderStep, TransferFrame, TransferReceiver, TransferSender};
use crate::pdc::{hash_key, AcceptStatus, CollectionDef, PrivatePayload, PrivateStore};
use crate::txflow::{validate_block, Endorsement, ProposalResponse, SignedProposal, ValidationContext};

/// A peer's durable state and the endorse/commit logic, independent of any
/// transport.
pub struct PeerState {
    pub identity: Identity,
    key: SigningKey,
    secret: [u8; 32],
    pub config: ChannelConfig,
    pub chain: Chain,
    pub state: WorldState,
    pub private: PrivateStore,
    pub offstate: OffStateStore,
    dir: PathBuf,
    seen: HashSet<Digest>,
    staged_plain: HashMap<Digest, StagedPlain>,
}

/// A successful endorsement, before any deferred file push.
#[derive(Debug)]
pub struct Endorsed {
    pub response: ProposalResponse,
    pub send: Option<FileSend>,
    pub crypto_bytes: u64,
}

/// What committing one block produced.
#[derive(Debug, Default)]
pub struct Committed {
    pub height: u64,
    pub flags: Vec<(Digest, Validity)>,
    /// Private values to push, with the org that should receive each.
    pub pushes: Vec<(OrgId, PrivatePayload)>,
}

impl PeerState {
    /// Opens (or resumes) a peer in `dir`: the chain log, the private-data
    /// journal and the off-state store all live there.
    pub fn open(identity: Identity, key: SigningKey, config: ChannelConfig, dir: &Path) -> Result<Self, NodeError> {
        if identity.role != Role::Peer || identity.verification_key != key.verification_key() {
            return Err(NodeError::Config(format!("{} is not a peer with this key", identity.label)));
        }
        let chain_path = dir.join(ChainFile::file_name(config.registry.channel()));
        std::fs::create_dir_all(dir).map_err(crate::ledger::LedgerError::from)?;
        let chain = Chain::open(&chain_path, Block::genesis(config.clone()))?;
        let state = crate::ledger::replay(chain.blocks())?;
        let seen = chain.blocks().iter().flat_map(|b| b.transactions()).map(|t| t.tx_id()).collect();
        let secret = hash(&codec::encode(&("peer-secret", key.seed()))).0;
        Ok(PeerState {
            private: PrivateStore::open(&dir.join("private"))?,
            offstate: OffStateStore::open(dir.join("offstate"))?,
            identity,
            key,
            secret,
            config,
            chain,
            state,
            dir: dir.to_path_buf(),
            seen,
            staged_plain: HashMap::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn chain_path(&self) -> PathBuf {
        self.dir.join(ChainFile::file_name(self.config.registry.channel()))
    }

    pub fn org(&self) -> &OrgId {
        &self.identity.org
    }

    fn env(&self) -> PeerEnv<'_> {
        PeerEnv {
            identity: &self.identity,
            secret: self.secret,
            registry: &self.config.registry,
            state: &self.state,
            private: &self.private,
            offstate: &self.offstate,
        }
    }

    /// Executes a proposal and signs the result. Private values and staged
    /// plaintext are held until the transaction's fate is known.
    pub fn endorse(&mut self, sp: &SignedProposal) -> Result<Endorsed, ContractError> {
        if !sp.creator_ok(&self.config.registry) {
            return Err(ContractError::AccessDenied);
        }
        let tx_id = sp.tx_id();
        if self.seen.contains(&tx_id) {
            return Err(ContractError::DuplicateId(tx_id.to_hex()));
        }
        let exec = contract::execute(&self.env(), &sp.proposal)?;
        for (c, k, v) in exec.private_staged {
            self.private.stage(tx_id, c, k, v)?;
        }
        if let Some(sp) = exec.staged_plain {
            self.staged_plain.insert(tx_id, sp);
        }
        let endorsement = Endorsement::sign(&self.identity, &self.key, &tx_id, &exec.rwset);
        Ok(Endorsed {
            response: ProposalResponse {
                rwset: exec.rwset,
                payload: exec.payload,
                endorsement,
            },
            send: exec.send,
            crypto_bytes: exec.crypto_bytes,
        })
    }

    /// Drops what an endorsement staged, e.g. after its file push failed.
    pub fn abandon(&mut self, tx_id: Digest) {
        if let Err(e) = self.private.discard_tx(tx_id) {
            warn!("{}: discarding staged private data: {e}", self.identity.label);
        }
        if let Some(sp) = self.staged_plain.remove(&tx_id) {
            let _ = self.offstate.discard_staged(&sp.tag);
        }
    }

    pub fn query(&self, sp: &SignedProposal) -> Result<contract::QueryOutput, ContractError> {
        if !sp.creator_ok(&self.config.registry) {
            return Err(ContractError::AccessDenied);
        }
        contract::query(&self.env(), &sp.proposal)
    }

    /// Validates, seals and applies an ordered block, then settles private
    /// data and staged plaintext for each of its transactions.
    pub fn commit(&mut self, mut block: Block) -> Result<Committed, NodeError> {
        let flags = {
            let ctx = ValidationContext {
                config: &self.config,
                state: &self.state,
                seen_tx_ids: &self.seen,
            };
            validate_block(&ctx, &block)
        };
        let prev_commit = self.chain.tip().commit_hash;
        block.seal(flags.clone(), &prev_commit);
        let mut next = self.state.clone();
        next.apply_block(&block)?;
        self.chain.append_block(block.clone())?;
        self.state = next;

        let mut out = Committed {
            height: block.header.height,
            ..Default::default()
        };
        let now_ms = block.transactions().iter().map(|t| t.proposal.proposal.timestamp_ms).max().unwrap_or(0);
        for (tx, flag) in block.transactions().iter().zip(flags) {
            let tx_id = tx.tx_id();
            self.seen.insert(tx_id);
            out.flags.push((tx_id, flag));
            if flag != Validity::Valid {
                self.abandon(tx_id);
                continue;
            }
            for payload in self.private.commit_tx(tx_id)? {
                let def: Option<CollectionDef> = self
                    .state
                    .get(&payload.collection.state_key())
                    .and_then(|v| codec::decode(&v.value).ok());
                let Some(def) = def else { continue };
                for org in def.members.iter().filter(|o| *o != self.org()) {
                    out.pushes.push((org.clone(), payload.clone()));
                }
            }
            if let Some(sp) = self.staged_plain.remove(&tx_id) {
                if let Err(e) = self.offstate.promote_staged(&sp.tag, &sp.name, now_ms) {
                    warn!("{}: promoting decrypted file: {e}", self.identity.label);
                }
            }
        }
        Ok(out)
    }

    /// Checks a pushed private value against committed state and stores it.
    pub fn accept_private(&mut self, from: &OrgId, payload: PrivatePayload) -> AcceptStatus {
        let def: Option<CollectionDef> = self
            .state
            .get(&payload.collection.state_key())
            .and_then(|v| codec::decode(&v.value).ok());
        let Some(def) = def else {
            return AcceptStatus::NotYetCommitted;
        };
        if !def.is_member(self.org()) {
            return AcceptStatus::Rejected(format!("{} is not a member", self.org()));
        }
        if !def.is_member(from) {
            return AcceptStatus::Rejected(format!("{from} is not a member"));
        }
        match self.state.get(&hash_key(&payload.collection, &payload.key)) {
            None => AcceptStatus::NotYetCommitted,
            Some(v) if v.value.as_slice() == hash(&payload.value).0.as_slice() => {
                match self.private.insert_accepted(payload) {
                    Ok(s) => s,
                    Err(e) => AcceptStatus::Rejected(e.to_string()),
                }
            }
            Some(_) => AcceptStatus::Rejected("value does not match the committed hash".into()),
        }
    }

    /// Where [`flush`](Self::flush) records the world state.
    pub fn snapshot_path(&self) -> PathBuf {
        self.dir.join("state.snapshot")
    }

    /// Persists private data and a snapshot of the world state.
    pub fn flush(&mut self) {
        if let Err(e) = self.private.flush() {
            warn!("{}: flushing private data: {e}", self.identity.label);
        }
        if let Err(e) = self.state.save_snapshot(&self.snapshot_path()) {
            warn!("{}: saving state snapshot: {e}", self.identity.label);
        }
    }
}

/// Work whose result is held back until the simulated CPU finishes it.
enum Output {
    Endorse {
        client: String,
        req: u64,
        tx_id: Digest,
        result: Result<Endorsed, ContractError>,
    },
    Query {
        client: String,
        req: u64,
        result: Result<Vec<u8>, ContractError>,
    },
    Commit(Committed),
}

enum Timer {
    Output(Output),
    TransferTimeout { job: u64, awaiting: u64 },
    PdcRetry(u64),
}

struct OutTransfer {
    sender: TransferSender,
    to: String,
    client: String,
    req: u64,
    tx_id: Digest,
    response: ProposalResponse,
}

struct Push {
    to: String,
    payload: PrivatePayload,
    attempts: u32,
}

/// A peer runtime: endorses proposals, commits delivered blocks, pushes
/// files and private data, and notifies subscribed clients.
pub struct PeerNode {
    pub peer: PeerState,
    params: PeerSection,
    cost: Option<CostSpec>,
    cores: Vec<u64>,
    peers_by_org: BTreeMap<OrgId, String>,
    subscribers: BTreeSet<String>,
    timers: BTreeMap<u64, Timer>,
    next_token: u64,
    next_job: u64,
    outgoing: BTreeMap<u64, OutTransfer>,
    incoming: BTreeMap<(String, u64), TransferReceiver>,
    pushes: BTreeMap<u64, Push>,
    next_push: u64,
    /// Highest block height committed, for idempotent delivery.
    committed_height: u64,
}

impl PeerNode {
    /// `cost` models execution time on a virtual CPU; `None` releases
    /// results immediately (real time already elapsed).
    pub fn new(peer: PeerState, params: PeerSection, cost: Option<CostSpec>) -> Self {
        let peers_by_org = peer
            .config
            .registry
            .with_role(Role::Peer)
            .map(|i| (i.org.clone(), i.label.clone()))
            .collect();
        let cores = vec![0; cost.map_or(1, |c| c.cores.max(1) as usize)];
        let committed_height = peer.chain.height();
        PeerNode {
            peer,
            params,
            cost,
            cores,
            peers_by_org,
            subscribers: BTreeSet::new(),
            timers: BTreeMap::new(),
            next_token: 0,
            next_job: 0,
            outgoing: BTreeMap::new(),
            incoming: BTreeMap::new(),
            pushes: BTreeMap::new(),
            next_push: 0,
            committed_height,
        }
    }

    fn timer(&mut self, io: &mut dyn NodeIo, at: u64, t: Timer) {
        let token = self.next_token;
        self.next_token += 1;
        self.timers.insert(token, t);
        io.set_timer(at, token);
    }

    /// Occupies the earliest free core for `cost_ns`; returns completion.
    fn schedule(&mut self, now: u64, cost_ns: u64) -> u64 {
        let core = self
            .cores
            .iter_mut()
            .min()
            .expect("at least one core");
        let done = (*core).max(now) + cost_ns;
        *core = done;
        done
    }

    fn exec_cost(&self, crypto_bytes: u64) -> u64 {
        self.cost.map_or(0, |c| {
            c.exec_overhead_us * 1_000 + crypto_bytes * 1_000 / c.crypto_mb_per_s.max(1)
        })
    }

    fn finish_later(&mut self, io: &mut dyn NodeIo, cost_ns: u64, out: Output) {
        if self.cost.is_none() {
            self.emit(io, out);
            return;
        }
        let at = self.schedule(io.now(), cost_ns);
        self.timer(io, at, Timer::Output(out));
    }

    fn emit(&mut self, io: &mut dyn NodeIo, out: Output) {
        match out {
            Output::Query { client, req, result } => io.send(&client, Message::QueryResult { req, result }),
            Output::Endorse {
                client,
                req,
                tx_id,
                result,
            } => match result {
                Ok(Endorsed {
                    response,
                    send: Some(send),
                    ..
                }) => self.start_push(io, client, req, tx_id, response, send),
                Ok(e) => io.send(
                    &client,
                    Message::Endorsed {
                        req,
                        result: Ok(e.response),
                    },
                ),
                Err(e) => io.send(&client, Message::Endorsed { req, result: Err(e) }),
            },
            Output::Commit(c) => {
                for (tx_id, flag) in &c.flags {
                    for s in &self.subscribers {
                        io.send(
                            s,
                            Message::Committed {
                                tx_id: *tx_id,
                                height: c.height,
                                flag: *flag,
                            },
                        );
                    }
                }
                for (org, payload) in c.pushes {
                    let Some(to) = self.peers_by_org.get(&org).cloned() else {
                        warn!("{}: no peer for org {org}", self.peer.identity.label);
                        continue;
                    };
                    let id = self.next_push;
                    self.next_push += 1;
                    self.pushes.insert(id, Push { to, payload, attempts: 0 });
                    self.send_push(io, id);
                }
            }
        }
    }

    fn send_push(&mut self, io: &mut dyn NodeIo, id: u64) {
        let Some(p) = self.pushes.get_mut(&id) else { return };
        if p.attempts >= self.params.pdc_max_attempts {
            warn!("{}: giving up pushing private data to {}", self.peer.identity.label, p.to);
            self.pushes.remove(&id);
            return;
        }
        let delay = self.params.pdc_retry_ms.max(1) * MS << p.attempts.min(16);
        p.attempts += 1;
        let (to, msg) = (p.to.clone(), Message::Private(p.payload.clone()));
        io.send(&to, msg);
        let at = io.now() + delay;
        self.timer(io, at, Timer::PdcRetry(id));
    }

    fn start_push(
        &mut self,
        io: &mut dyn NodeIo,
        client: String,
        req: u64,
        tx_id: Digest,
        response: ProposalResponse,
        send: FileSend,
    ) {
        let fail = |this: &mut Self, io: &mut dyn NodeIo, reason: String| {
            this.peer.abandon(tx_id);
            io.send(
                &client,
                Message::Endorsed {
                    req,
                    result: Err(ContractError::TransferFailed(reason)),
                },
            );
        };
        let Some(to) = self.peers_by_org.get(&send.to).cloned() else {
            return fail(self, io, format!("no peer for {}", send.to));
        };
        let job = self.next_job;
        self.next_job += 1;
        let (sender, open) =
            match TransferSender::start(&self.peer.offstate, &send.entry, &send.dest_name, job, self.params.buffer_size) {
                Ok(x) => x,
                Err(e) => return fail(self, io, e.to_string()),
            };
        debug!("{}: pushing {} to {to}", self.peer.identity.label, send.dest_name);
        io.send(&to, Message::Transfer(open));
        self.arm_transfer_timeout(io, job, 0);
        self.outgoing.insert(
            job,
            OutTransfer {
                sender,
                to,
                client: client.clone(),
                req,
                tx_id,
                response,
            },
        );
    }

    fn arm_transfer_timeout(&mut self, io: &mut dyn NodeIo, job: u64, awaiting: u64) {
        let at = io.now() + self.params.transfer_timeout_ms * MS;
        self.timer(io, at, Timer::TransferTimeout { job, awaiting });
    }

    fn finish_transfer(&mut self, io: &mut dyn NodeIo, job: u64, result: Result<(), String>) {
        let Some(t) = self.outgoing.remove(&job) else { return };
        let result = match result {
            Ok(()) => Ok(t.response),
            Err(reason) => {
                self.peer.abandon(t.tx_id);
                Err(ContractError::TransferFailed(reason))
            }
        };
        io.send(&t.client, Message::Endorsed { req: t.req, result });
    }

    fn on_transfer(&mut self, from: &str, frame: TransferFrame, io: &mut dyn NodeIo) {
        if frame.is_forward() {
            let key = (from.to_string(), frame.job());
            let now_ms = io.now() / MS;
            if let Some(r) = self.incoming.get_mut(&key) {
                let (reply, done) = r.on_frame(&self.peer.offstate, frame, now_ms);
                if let Some(reply) = reply {
                    io.send(from, Message::Transfer(reply));
                }
                if let Some(done) = done {
                    self.incoming.remove(&key);
                    match done {
                        Ok(rec) => debug!("{}: received {} from {from}", self.peer.identity.label, rec.name),
                        Err(e) => warn!("{}: inbound transfer from {from} failed: {e}", self.peer.identity.label),
                    }
                }
                return;
            }
            if !matches!(frame, TransferFrame::Open { .. }) {
                return;
            }
            if self.peer.config.registry.by_label(from).is_none() {
                io.send(
                    from,
                    Message::Transfer(TransferFrame::Done {
                        job: frame.job(),
                        result: Err("unknown sender".into()),
                    }),
                );
                return;
            }
            match TransferReceiver::open(&self.peer.offstate, from, frame) {
                Ok((r, ack)) => {
                    self.incoming.insert(key, r);
                    io.send(from, Message::Transfer(ack));
                }
                Err(reply) => io.send(from, Message::Transfer(reply)),
            }
            return;
        }
        let job = frame.job();
        let Some(t) = self.outgoing.get_mut(&job) else { return };
        if t.to != from {
            return;
        }
        match t.sender.on_frame(frame) {
            SenderStep::Send(f) => {
                let to = t.to.clone();
                let awaiting = t.sender.awaiting().unwrap_or(u64::MAX);
                io.send(&to, Message::Transfer(f));
                self.arm_transfer_timeout(io, job, awaiting);
            }
            SenderStep::Complete(r) => self.finish_transfer(io, job, r.map(|_| ()).map_err(|e| e.to_string())),
            SenderStep::Ignore => {}
        }
    }

    fn on_deliver(&mut self, block: Block, io: &mut dyn NodeIo) {
        if block.header.height <= self.committed_height {
            return;
        }
        let n = block.transactions().len() as u64;
        match self.peer.commit(block) {
            Ok(c) => {
                self.committed_height = c.height;
                let cost = self.cost.map_or(0, |k| k.validate_per_tx_us * 1_000 * n);
                self.finish_later(io, cost, Output::Commit(c));
            }
            Err(e) => warn!("{}: rejecting block: {e}", self.peer.identity.label),
        }
    }
}

impl Node for PeerNode {
    fn label(&self) -> &str {
        &self.peer.identity.label
    }

    fn on_message(&mut self, from: &str, msg: Message, io: &mut dyn NodeIo) {
        match msg {
            Message::Propose { req, proposal } => {
                let tx_id = proposal.tx_id();
                let result = self.peer.endorse(&proposal);
                let bytes = result.as_ref().map_or(0, |e| e.crypto_bytes);
                let cost = self.exec_cost(bytes);
                self.finish_later(
                    io,
                    cost,
                    Output::Endorse {
                        client: from.to_string(),
                        req,
                        tx_id,
                        result,
                    },
                );
            }
            Message::Query { req, proposal } => {
                let result = self.peer.query(&proposal);
                let cost = self.exec_cost(result.as_ref().map_or(0, |q| q.crypto_bytes));
                self.finish_later(
                    io,
                    cost,
                    Output::Query {
                        client: from.to_string(),
                        req,
                        result: result.map(|q| q.payload),
                    },
                );
            }
            Message::Subscribe => {
                self.subscribers.insert(from.to_string());
            }
            Message::Deliver(block) => self.on_deliver(*block, io),
            Message::Transfer(frame) => self.on_transfer(from, frame, io),
            Message::Private(payload) => {
                let Some(org) = self.peer.config.registry.by_label(from).map(|i| i.org.clone()) else {
                    return;
                };
                let (collection, key, tx_id) = (payload.collection, payload.key.clone(), payload.tx_id);
                let status = self.peer.accept_private(&org, payload);
                io.send(
                    from,
                    Message::PrivateAck {
                        collection,
                        key,
                        tx_id,
                        status,
                    },
                );
            }
            Message::PrivateAck {
                collection,
                key,
                tx_id,
                status,
            } => {
                if status == AcceptStatus::NotYetCommitted {
                    return;
                }
                if let AcceptStatus::Rejected(reason) = &status {
                    warn!("{}: {from} rejected private data: {reason}", self.peer.identity.label);
                }
                self.pushes.retain(|_, p| {
                    !(p.to == from && p.payload.collection == collection && p.payload.key == key && p.payload.tx_id == tx_id)
                });
            }
            Message::SendFailed { to, reason } => {
                let jobs: Vec<u64> = self.outgoing.iter().filter(|(_, t)| t.to == to).map(|(j, _)| *j).collect();
                for job in jobs {
                    self.finish_transfer(io, job, Err(format!("{to} unreachable: {reason}")));
                }
                let stale: Vec<(String, u64)> = self.incoming.keys().filter(|(f, _)| *f == to).cloned().collect();
                for k in stale {
                    if let Some(mut r) = self.incoming.remove(&k) {
                        r.abandon();
                    }
                }
            }
            other => debug!("{}: ignoring {} from {from}", self.peer.identity.label, other.kind()),
        }
    }

    fn on_timer(&mut self, token: u64, io: &mut dyn NodeIo) {
        match self.timers.remove(&token) {
            Some(Timer::Output(out)) => self.emit(io, out),
            Some(Timer::TransferTimeout { job, awaiting }) => {
                let Some(t) = self.outgoing.get_mut(&job) else { return };
                if t.sender.awaiting() != Some(awaiting) {
                    return;
                }
                let abort = t.sender.abort("timed out");
                let to = t.to.clone();
                io.send(&to, Message::Transfer(abort));
                self.finish_transfer(io, job, Err(format!("no progress from {to}")));
            }
            Some(Timer::PdcRetry(id)) => self.send_push(io, id),
            None => {}
        }
    }

    fn busy(&self) -> bool {
        !self.outgoing.is_empty() || !self.pushes.is_empty()
    }

    fn shutdown(&mut self) {
        self.peer.flush();
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}
