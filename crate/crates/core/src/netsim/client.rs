// SPDX-License-Identifier: Apache-2.0

use std::any::Any;
use std::collections::BTreeMap;
use std::fmt;
use std::fs::OpenOptions;
use std::io::{Read, Seek, SeekFrom, Write};

use log::{debug, warn};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Message, Node, NodeIo, MS};
use crate::codec;
use crate::config::ChannelConfig;
use crate::contract::{self, ContractError, DecryptResult, EventEntity, FileEntity, Verdict};
use crate::identity::{Identity, OrgId, Role, SigningKey};
use crate::ledger::{hash, Digest, Validity};
use crate::offstate::{OffStateStore, SenderStep, TransferFrame, TransferSender};
use crate::txflow::{assemble, Proposal, ProposalResponse, SignedProposal};

/// The four sharing transactions, in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Step {
    Request,
    Transfer,
    KeyAccess,
    Decrypt,
}

impl Step {
    pub const ALL: [Step; 4] = [Step::Request, Step::Transfer, Step::KeyAccess, Step::Decrypt];

    pub fn function(self) -> &'static str {
        match self {
            Step::Request => contract::REQUEST,
            Step::Transfer => contract::TRANSFER,
            Step::KeyAccess => contract::KEYACCESS,
            Step::Decrypt => contract::DECRYPT,
        }
    }

    pub fn next(self) -> Option<Step> {
        match self {
            Step::Request => Some(Step::Transfer),
            Step::Transfer => Some(Step::KeyAccess),
            Step::KeyAccess => Some(Step::Decrypt),
            Step::Decrypt => None,
        }
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.function())
    }
}

/// How the receiving client behaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// All four phases, each started once the previous one committed.
    Auto,
    /// Only the named phase; `event_id` must be set for later phases.
    Manual(Step),
    /// Obtains the endorsement for the named phase, then never submits it.
    DishonestDrop(Step),
    /// Corrupts the delivered ciphertext in the receiver's own off-state
    /// before asking for decryption.
    TamperFile,
    /// Requests a file whose access rule excludes the receiver, then tries
    /// to push on to the transfer anyway.
    WrongReceiver,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionPlan {
    pub file_id: String,
    pub sender: OrgId,
    pub receiver: OrgId,
    pub mode: Mode,
    #[serde(default = "one")]
    pub parallelism: u32,
    #[serde(default)]
    pub event_id: Option<String>,
}

fn one() -> u32 {
    1
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClientCommand {
    /// Streams `source` from the client workspace to its own peer and
    /// registers it.
    Upload {
        req: u64,
        source: String,
        name: String,
        rule: String,
        description: String,
    },
    Share {
        req: u64,
        plan: SessionPlan,
    },
    Query {
        req: u64,
        function: String,
        args: Vec<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSample {
    pub step: Step,
    pub tx_id: Digest,
    pub height: u64,
    pub flag: Validity,
    /// From first proposal to commit notice. The transfer runs on until the
    /// receiver has verified the delivered file.
    pub latency_ns: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SessionOutcome {
    Completed { verdict: Verdict, digest: Option<Digest> },
    /// The request committed with Flag=false.
    Denied,
    /// Endorsement for `after` obtained and withheld.
    Dropped { after: Step },
    /// Manual mode finished its one phase.
    Stopped { after: Step },
    Failed { step: Step, reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionReport {
    pub req: u64,
    pub index: u32,
    pub mode: Mode,
    pub file_id: String,
    pub event_id: Option<String>,
    pub phases: Vec<PhaseSample>,
    /// Result of the receipt check run after the transfer committed.
    pub verified: Option<bool>,
    pub outcome: SessionOutcome,
    pub started_ns: u64,
    pub finished_ns: u64,
}

impl SessionReport {
    pub fn latency_ns(&self) -> u64 {
        self.finished_ns - self.started_ns
    }

    pub fn phase(&self, step: Step) -> Option<&PhaseSample> {
        self.phases.iter().find(|p| p.step == step)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadReport {
    pub req: u64,
    pub result: Result<FileEntity, String>,
    pub latency_ns: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClientReport {
    Upload(UploadReport),
    Session(SessionReport),
    Query { req: u64, result: Result<Vec<u8>, ContractError> },
}

impl ClientReport {
    pub fn req(&self) -> u64 {
        match self {
            ClientReport::Upload(u) => u.req,
            ClientReport::Session(s) => s.req,
            ClientReport::Query { req, .. } => *req,
        }
    }
}

/// Collecting endorsements, then waiting for the commit notice.
#[derive(Debug)]
enum Stage {
    Idle,
    Endorsing {
        proposal: SignedProposal,
        waiting: BTreeMap<String, Option<ProposalResponse>>,
    },
    Committing,
    Verifying,
}

#[derive(Debug)]
struct Session {
    req: u64,
    index: u32,
    plan: SessionPlan,
    event_id: Option<String>,
    step: Step,
    stage: Stage,
    started_ns: u64,
    step_started_ns: u64,
    phases: Vec<PhaseSample>,
    flag: Option<bool>,
    verified: Option<bool>,
    decrypted: Option<DecryptResult>,
    retries: u32,
    /// Set when probing a transfer that must be refused.
    probing: bool,
}

#[derive(Debug)]
enum UploadStage {
    Pushing(TransferSender),
    Endorsing(SignedProposal),
    Committing(FileEntity),
}

#[derive(Debug)]
struct Upload {
    req: u64,
    name: String,
    rule: String,
    description: String,
    started_ns: u64,
    stage: UploadStage,
}

/// What an outbound request id belongs to.
#[derive(Debug, Clone, Copy)]
enum Pending {
    Session(u64),
    Upload(u64),
    Query(u64),
}

/// A client runtime. Clients hold no ledger; they drive sessions through
/// proposals, submissions and commit notices.
pub struct ClientNode {
    identity: Identity,
    key: SigningKey,
    config: ChannelConfig,
    workspace: OffStateStore,
    /// Direct access to the off-state of the client's own org peer.
    org_store: Option<OffStateStore>,
    own_peer: String,
    peers_by_org: BTreeMap<OrgId, String>,
    orderer: String,
    rng: ChaCha8Rng,
    retry_ms: u64,
    max_retries: u32,
    next_req: u64,
    next_sid: u64,
    requests: BTreeMap<u64, (Pending, String)>,
    sessions: BTreeMap<u64, Session>,
    uploads: BTreeMap<u64, Upload>,
    /// Transfer job ids of uploads.
    upload_jobs: BTreeMap<u64, u64>,
    awaiting_commit: BTreeMap<Digest, Pending>,
    timers: BTreeMap<u64, u64>,
    next_token: u64,
    reports: Vec<ClientReport>,
    buffer_size: u32,
}

impl ClientNode {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        identity: Identity,
        key: SigningKey,
        config: ChannelConfig,
        workspace: OffStateStore,
        org_store: Option<OffStateStore>,
        seed: u64,
        retry_ms: u64,
        max_retries: u32,
        buffer_size: u32,
    ) -> Result<Self, super::NodeError> {
        let peers_by_org: BTreeMap<OrgId, String> = config
            .registry
            .with_role(Role::Peer)
            .map(|i| (i.org.clone(), i.label.clone()))
            .collect();
        let own_peer = peers_by_org
            .get(&identity.org)
            .cloned()
            .ok_or_else(|| super::NodeError::Config(format!("no peer in {}", identity.org)))?;
        let orderer = config
            .registry
            .with_role(Role::Orderer)
            .map(|i| i.label.clone())
            .next()
            .ok_or_else(|| super::NodeError::Config("no orderer".into()))?;
        let rng_seed = hash(&codec::encode(&("client-rng", seed, &identity.label))).0;
        Ok(ClientNode {
            identity,
            key,
            config,
            workspace,
            org_store,
            own_peer,
            peers_by_org,
            orderer,
            rng: ChaCha8Rng::from_seed(rng_seed),
            retry_ms,
            max_retries,
            next_req: 0,
            next_sid: 0,
            requests: BTreeMap::new(),
            sessions: BTreeMap::new(),
            uploads: BTreeMap::new(),
            upload_jobs: BTreeMap::new(),
            awaiting_commit: BTreeMap::new(),
            timers: BTreeMap::new(),
            next_token: 0,
            reports: Vec::new(),
            buffer_size,
        })
    }

    pub fn workspace(&self) -> &OffStateStore {
        &self.workspace
    }

    pub fn identity(&self) -> &Identity {
        &self.identity
    }

    fn proposal(&mut self, function: &str, args: Vec<String>, now: u64) -> SignedProposal {
        let mut nonce = [0u8; 16];
        self.rng.fill_bytes(&mut nonce);
        let p = Proposal {
            proposer: self.identity.clone(),
            channel: self.config.registry.channel().to_string(),
            function: function.to_string(),
            args,
            timestamp_ms: now / MS,
            nonce,
        };
        SignedProposal::sign(p, &self.key)
    }

    fn request(&mut self, io: &mut dyn NodeIo, to: &str, owner: Pending, msg: impl FnOnce(u64) -> Message) -> u64 {
        let req = self.next_req;
        self.next_req += 1;
        self.requests.insert(req, (owner, to.to_string()));
        io.send(to, msg(req));
        req
    }

    fn peer_of(&self, org: &OrgId) -> Option<String> {
        self.peers_by_org.get(org).cloned()
    }

    // ---- sessions ----

    fn start_share(&mut self, io: &mut dyn NodeIo, req: u64, plan: SessionPlan) {
        let first = match plan.mode {
            Mode::Manual(step) => step,
            _ => Step::Request,
        };
        for index in 0..plan.parallelism.max(1) {
            let sid = self.next_sid;
            self.next_sid += 1;
            let now = io.now();
            self.sessions.insert(
                sid,
                Session {
                    req,
                    index,
                    event_id: plan.event_id.clone(),
                    plan: plan.clone(),
                    step: first,
                    stage: Stage::Idle,
                    started_ns: now,
                    step_started_ns: now,
                    phases: Vec::new(),
                    flag: None,
                    verified: None,
                    decrypted: None,
                    retries: 0,
                    probing: false,
                },
            );
            let check = if plan.receiver != self.identity.org {
                Some(format!("this client belongs to {}, not {}", self.identity.org, plan.receiver))
            } else if first != Step::Request && plan.event_id.is_none() {
                Some("manual phases after the request need an event id".to_string())
            } else {
                None
            };
            match check {
                Some(reason) => self.finish(sid, io.now(), SessionOutcome::Failed { step: first, reason }),
                None => self.start_step(io, sid, first),
            }
        }
    }

    fn start_step(&mut self, io: &mut dyn NodeIo, sid: u64, step: Step) {
        let now = io.now();
        let Some(s) = self.sessions.get(&sid) else { return };
        let args = match step {
            Step::Request => vec![s.plan.file_id.clone(), s.plan.sender.to_string()],
            _ => vec![s.event_id.clone().unwrap_or_default()],
        };
        let orgs: Vec<OrgId> = match step {
            Step::Request => vec![s.plan.sender.clone(), s.plan.receiver.clone()],
            Step::Transfer | Step::KeyAccess => vec![s.plan.sender.clone()],
            Step::Decrypt => vec![s.plan.receiver.clone()],
        };
        let mut targets = Vec::new();
        for org in &orgs {
            match self.peer_of(org) {
                Some(p) if !targets.contains(&p) => targets.push(p),
                Some(_) => {}
                None => {
                    return self.finish(
                        sid,
                        now,
                        SessionOutcome::Failed {
                            step,
                            reason: format!("no peer for {org}"),
                        },
                    )
                }
            }
        }
        let proposal = self.proposal(step.function(), args, now);
        let s = self.sessions.get_mut(&sid).expect("checked");
        s.step = step;
        s.stage = Stage::Endorsing {
            proposal: proposal.clone(),
            waiting: targets.iter().map(|t| (t.clone(), None)).collect(),
        };
        for t in targets {
            let p = proposal.clone();
            self.request(io, &t, Pending::Session(sid), |req| Message::Propose { req, proposal: p });
        }
    }

    fn finish(&mut self, sid: u64, now: u64, outcome: SessionOutcome) {
        let Some(s) = self.sessions.remove(&sid) else { return };
        self.requests.retain(|_, (p, _)| !matches!(p, Pending::Session(x) if *x == sid));
        self.awaiting_commit.retain(|_, p| !matches!(p, Pending::Session(x) if *x == sid));
        debug!("{}: session {sid} finished: {outcome:?}", self.identity.label);
        self.reports.push(ClientReport::Session(SessionReport {
            req: s.req,
            index: s.index,
            mode: s.plan.mode,
            file_id: s.plan.file_id,
            event_id: s.event_id,
            phases: s.phases,
            verified: s.verified,
            outcome,
            started_ns: s.started_ns,
            finished_ns: now,
        }));
    }

    fn on_session_endorsed(
        &mut self,
        io: &mut dyn NodeIo,
        sid: u64,
        from: &str,
        result: Result<ProposalResponse, ContractError>,
    ) {
        let now = io.now();
        let Some(s) = self.sessions.get_mut(&sid) else { return };
        let step = s.step;
        let response = match result {
            Ok(r) => r,
            Err(ContractError::FlagFalse) if s.probing => return self.finish(sid, now, SessionOutcome::Denied),
            Err(ContractError::KeyMissing) if step == Step::Decrypt && s.retries < self.max_retries => {
                // The key may still be on its way from the sender's peer.
                let delay = self.retry_ms.max(1) * MS << s.retries.min(16);
                s.retries += 1;
                s.stage = Stage::Idle;
                let token = self.next_token;
                self.next_token += 1;
                self.timers.insert(token, sid);
                io.set_timer(now + delay, token);
                return;
            }
            Err(e) => {
                return self.finish(
                    sid,
                    now,
                    SessionOutcome::Failed {
                        step,
                        reason: e.to_string(),
                    },
                )
            }
        };
        if s.probing {
            return self.finish(
                sid,
                now,
                SessionOutcome::Failed {
                    step,
                    reason: "transfer endorsed although the request was denied".into(),
                },
            );
        }
        let Stage::Endorsing { waiting, proposal } = &mut s.stage else { return };
        match waiting.get_mut(from) {
            Some(slot @ None) => *slot = Some(response),
            _ => return,
        }
        if waiting.values().any(Option::is_none) {
            return;
        }
        let responses: Vec<ProposalResponse> = waiting.values_mut().map(|r| r.take().expect("all present")).collect();
        let payload = responses[0].payload.clone();
        let tx = match assemble(proposal.clone(), responses) {
            Ok(tx) => tx,
            Err(e) => {
                return self.finish(
                    sid,
                    now,
                    SessionOutcome::Failed {
                        step,
                        reason: e.to_string(),
                    },
                )
            }
        };
        match step {
            Step::Request => match codec::decode::<EventEntity>(&payload) {
                Ok(ev) => {
                    s.event_id = Some(ev.id);
                    s.flag = Some(ev.flag);
                }
                Err(e) => {
                    return self.finish(
                        sid,
                        now,
                        SessionOutcome::Failed {
                            step,
                            reason: format!("bad event payload: {e}"),
                        },
                    )
                }
            },
            Step::Decrypt => s.decrypted = codec::decode(&payload).ok(),
            _ => {}
        }
        if s.plan.mode == Mode::DishonestDrop(step) {
            return self.finish(sid, now, SessionOutcome::Dropped { after: step });
        }
        let tx_id = tx.tx_id();
        s.stage = Stage::Committing;
        self.awaiting_commit.insert(tx_id, Pending::Session(sid));
        io.send(&self.orderer, Message::Submit(Box::new(tx)));
    }

    fn on_session_committed(&mut self, io: &mut dyn NodeIo, sid: u64, tx_id: Digest, height: u64, flag: Validity) {
        let now = io.now();
        let Some(s) = self.sessions.get_mut(&sid) else { return };
        let step = s.step;
        s.phases.push(PhaseSample {
            step,
            tx_id,
            height,
            flag,
            latency_ns: now - s.step_started_ns,
        });
        if flag != Validity::Valid {
            return self.finish(
                sid,
                now,
                SessionOutcome::Failed {
                    step,
                    reason: format!("committed as {flag}"),
                },
            );
        }
        if s.plan.mode == Mode::Manual(step) && step != Step::Decrypt {
            return self.finish(sid, now, SessionOutcome::Stopped { after: step });
        }
        match step {
            Step::Request => {
                let flag = s.flag.unwrap_or(false);
                match (s.plan.mode, flag) {
                    (Mode::WrongReceiver, false) => {
                        s.probing = true;
                        s.step_started_ns = now;
                        self.start_step(io, sid, Step::Transfer);
                    }
                    (Mode::WrongReceiver, true) => self.finish(
                        sid,
                        now,
                        SessionOutcome::Failed {
                            step,
                            reason: "receiver is in the access rule".into(),
                        },
                    ),
                    (_, false) => self.finish(sid, now, SessionOutcome::Denied),
                    (_, true) => {
                        s.step_started_ns = now;
                        self.start_step(io, sid, Step::Transfer);
                    }
                }
            }
            Step::Transfer => {
                s.stage = Stage::Verifying;
                let event_id = s.event_id.clone().unwrap_or_default();
                let p = self.proposal(contract::VERIFY, vec![event_id], now);
                let own = self.own_peer.clone();
                self.request(io, &own, Pending::Session(sid), |req| Message::Query { req, proposal: p });
            }
            Step::KeyAccess => {
                if s.plan.mode == Mode::TamperFile {
                    let name = contract::cipher_name(s.event_id.as_deref().unwrap_or_default());
                    if let Err(e) = self.tamper(&name) {
                        return self.finish(
                            sid,
                            now,
                            SessionOutcome::Failed {
                                step: Step::Decrypt,
                                reason: format!("tampering failed: {e}"),
                            },
                        );
                    }
                }
                let s = self.sessions.get_mut(&sid).expect("present");
                s.step_started_ns = now;
                self.start_step(io, sid, Step::Decrypt);
            }
            Step::Decrypt => {
                let outcome = match s.decrypted.take() {
                    Some(d) => SessionOutcome::Completed {
                        verdict: d.verdict,
                        digest: d.digest,
                    },
                    None => SessionOutcome::Failed {
                        step,
                        reason: "missing decrypt result".into(),
                    },
                };
                self.finish(sid, now, outcome);
            }
        }
    }

    fn on_session_query(&mut self, io: &mut dyn NodeIo, sid: u64, result: Result<Vec<u8>, ContractError>) {
        let now = io.now();
        let Some(s) = self.sessions.get_mut(&sid) else { return };
        if !matches!(s.stage, Stage::Verifying) {
            return;
        }
        let ok = result.ok().and_then(|b| codec::decode::<bool>(&b).ok()).unwrap_or(false);
        s.verified = Some(ok);
        if let Some(p) = s.phases.iter_mut().find(|p| p.step == Step::Transfer) {
            p.latency_ns = now - s.step_started_ns;
        }
        if !ok {
            return self.finish(
                sid,
                now,
                SessionOutcome::Failed {
                    step: Step::Transfer,
                    reason: "received file failed verification".into(),
                },
            );
        }
        s.step_started_ns = now;
        self.start_step(io, sid, Step::KeyAccess);
    }

    /// Flips one byte in the middle of an entry of the org peer's store.
    fn tamper(&self, name: &str) -> Result<(), String> {
        let store = self.org_store.as_ref().ok_or("no access to the org peer's off-state")?;
        let path = store.path_of(name).map_err(|e| e.to_string())?;
        let mut f = OpenOptions::new().read(true).write(true).open(path).map_err(|e| e.to_string())?;
        let len = f.metadata().map_err(|e| e.to_string())?.len();
        let at = len / 2;
        let mut b = [0u8];
        f.seek(SeekFrom::Start(at)).and_then(|_| f.read_exact(&mut b)).map_err(|e| e.to_string())?;
        b[0] ^= 0x5a;
        f.seek(SeekFrom::Start(at)).and_then(|_| f.write_all(&b)).map_err(|e| e.to_string())?;
        Ok(())
    }

    // ---- uploads ----

    fn start_upload(&mut self, io: &mut dyn NodeIo, req: u64, source: String, name: String, rule: String, description: String) {
        let now = io.now();
        let uid = self.next_sid;
        self.next_sid += 1;
        let job = uid;
        match TransferSender::start(&self.workspace, &source, &source, job, self.buffer_size) {
            Ok((sender, open)) => {
                self.upload_jobs.insert(job, uid);
                self.uploads.insert(
                    uid,
                    Upload {
                        req,
                        name,
                        rule,
                        description,
                        started_ns: now,
                        stage: UploadStage::Pushing(sender),
                    },
                );
                let own = self.own_peer.clone();
                io.send(&own, Message::Transfer(open));
            }
            Err(e) => self.reports.push(ClientReport::Upload(UploadReport {
                req,
                result: Err(e.to_string()),
                latency_ns: 0,
            })),
        }
    }

    fn finish_upload(&mut self, uid: u64, now: u64, result: Result<FileEntity, String>) {
        let Some(u) = self.uploads.remove(&uid) else { return };
        self.upload_jobs.retain(|_, x| *x != uid);
        self.awaiting_commit.retain(|_, p| !matches!(p, Pending::Upload(x) if *x == uid));
        self.reports.push(ClientReport::Upload(UploadReport {
            req: u.req,
            result,
            latency_ns: now - u.started_ns,
        }));
    }

    fn on_upload_frame(&mut self, io: &mut dyn NodeIo, frame: TransferFrame) {
        let now = io.now();
        let Some(&uid) = self.upload_jobs.get(&frame.job()) else { return };
        let Some(u) = self.uploads.get_mut(&uid) else { return };
        let UploadStage::Pushing(sender) = &mut u.stage else { return };
        match sender.on_frame(frame) {
            SenderStep::Send(f) => {
                let own = self.own_peer.clone();
                io.send(&own, Message::Transfer(f));
            }
            SenderStep::Complete(Ok(stored)) => {
                let args = vec![stored, u.name.clone(), u.rule.clone(), u.description.clone()];
                let p = self.proposal(contract::UPLOAD, args, now);
                let u = self.uploads.get_mut(&uid).expect("present");
                u.stage = UploadStage::Endorsing(p.clone());
                let own = self.own_peer.clone();
                self.request(io, &own, Pending::Upload(uid), |req| Message::Propose { req, proposal: p });
            }
            SenderStep::Complete(Err(e)) => self.finish_upload(uid, now, Err(e.to_string())),
            SenderStep::Ignore => {}
        }
    }

    fn on_upload_endorsed(&mut self, io: &mut dyn NodeIo, uid: u64, result: Result<ProposalResponse, ContractError>) {
        let now = io.now();
        let Some(u) = self.uploads.get_mut(&uid) else { return };
        let UploadStage::Endorsing(p) = &u.stage else { return };
        let r = match result {
            Ok(r) => r,
            Err(e) => return self.finish_upload(uid, now, Err(e.to_string())),
        };
        let entity: FileEntity = match codec::decode(&r.payload) {
            Ok(f) => f,
            Err(e) => return self.finish_upload(uid, now, Err(e.to_string())),
        };
        let tx = match assemble(p.clone(), vec![r]) {
            Ok(tx) => tx,
            Err(e) => return self.finish_upload(uid, now, Err(e.to_string())),
        };
        let tx_id = tx.tx_id();
        u.stage = UploadStage::Committing(entity);
        self.awaiting_commit.insert(tx_id, Pending::Upload(uid));
        io.send(&self.orderer, Message::Submit(Box::new(tx)));
    }

    fn on_committed(&mut self, io: &mut dyn NodeIo, tx_id: Digest, height: u64, flag: Validity) {
        match self.awaiting_commit.remove(&tx_id) {
            Some(Pending::Session(sid)) => self.on_session_committed(io, sid, tx_id, height, flag),
            Some(Pending::Upload(uid)) => {
                let now = io.now();
                let entity = match self.uploads.get(&uid).map(|u| &u.stage) {
                    Some(UploadStage::Committing(e)) => e.clone(),
                    _ => return,
                };
                let result = if flag == Validity::Valid { Ok(entity) } else { Err(format!("committed as {flag}")) };
                self.finish_upload(uid, now, result);
            }
            _ => {}
        }
    }
}

impl Node for ClientNode {
    fn label(&self) -> &str {
        &self.identity.label
    }

    fn on_start(&mut self, io: &mut dyn NodeIo) {
        let own = self.own_peer.clone();
        io.send(&own, Message::Subscribe);
    }

    fn on_message(&mut self, from: &str, msg: Message, io: &mut dyn NodeIo) {
        match msg {
            Message::Command(cmd) => match cmd {
                ClientCommand::Upload {
                    req,
                    source,
                    name,
                    rule,
                    description,
                } => self.start_upload(io, req, source, name, rule, description),
                ClientCommand::Share { req, plan } => self.start_share(io, req, plan),
                ClientCommand::Query { req, function, args } => {
                    let now = io.now();
                    let p = self.proposal(&function, args, now);
                    let own = self.own_peer.clone();
                    self.request(io, &own, Pending::Query(req), |r| Message::Query { req: r, proposal: p });
                }
            },
            Message::Endorsed { req, result } => {
                let Some((owner, peer)) = self.requests.remove(&req) else { return };
                if peer != from {
                    return;
                }
                match owner {
                    Pending::Session(sid) => self.on_session_endorsed(io, sid, from, result),
                    Pending::Upload(uid) => self.on_upload_endorsed(io, uid, result),
                    Pending::Query(_) => {}
                }
            }
            Message::QueryResult { req, result } => {
                let Some((owner, _)) = self.requests.remove(&req) else { return };
                match owner {
                    Pending::Session(sid) => self.on_session_query(io, sid, result),
                    Pending::Query(user_req) => self.reports.push(ClientReport::Query { req: user_req, result }),
                    Pending::Upload(_) => {}
                }
            }
            Message::Committed { tx_id, height, flag } => {
                if from == self.own_peer {
                    self.on_committed(io, tx_id, height, flag);
                }
            }
            Message::Transfer(frame) if !frame.is_forward() => self.on_upload_frame(io, frame),
            Message::SendFailed { to, reason } => {
                let now = io.now();
                warn!("{}: cannot reach {to}: {reason}", self.identity.label);
                let failed: Vec<u64> = self
                    .requests
                    .values()
                    .filter(|(_, p)| *p == to)
                    .filter_map(|(o, _)| match o {
                        Pending::Session(sid) => Some(*sid),
                        _ => None,
                    })
                    .collect();
                for sid in failed {
                    let step = self.sessions.get(&sid).map_or(Step::Request, |s| s.step);
                    self.finish(
                        sid,
                        now,
                        SessionOutcome::Failed {
                            step,
                            reason: format!("{to} unreachable"),
                        },
                    );
                }
                if to == self.own_peer {
                    let uids: Vec<u64> = self.uploads.keys().copied().collect();
                    for uid in uids {
                        self.finish_upload(uid, now, Err(format!("{to} unreachable")));
                    }
                }
                if to == self.orderer {
                    let sids: Vec<u64> = self
                        .sessions
                        .iter()
                        .filter(|(_, s)| matches!(s.stage, Stage::Committing))
                        .map(|(k, _)| *k)
                        .collect();
                    for sid in sids {
                        let step = self.sessions[&sid].step;
                        self.finish(
                            sid,
                            now,
                            SessionOutcome::Failed {
                                step,
                                reason: "orderer unreachable".into(),
                            },
                        );
                    }
                }
            }
            other => debug!("{}: ignoring {} from {from}", self.identity.label, other.kind()),
        }
    }

    fn on_timer(&mut self, token: u64, io: &mut dyn NodeIo) {
        if let Some(sid) = self.timers.remove(&token) {
            if self.sessions.contains_key(&sid) {
                self.start_step(io, sid, Step::Decrypt);
            }
        }
    }

    fn busy(&self) -> bool {
        !self.sessions.is_empty() || !self.uploads.is_empty()
    }

    fn drain_reports(&mut self) -> Vec<ClientReport> {
        std::mem::take(&mut self.reports)
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}
