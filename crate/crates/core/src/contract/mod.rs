// SPDX-License-Identifier: Apache-2.0

//! The off-state sharing contract.
//!
//! World state holds three record kinds: [`FileEntity`] (registered
//! plaintext), [`EventEntity`] (one sharing session) and [`KeyEntity`] (the
//! public half of the cryptographic lock; the AES key itself lives in a
//! private collection).
//!
//! | function    | proposer | endorser | args                         |
//! |-------------|----------|----------|------------------------------|
//! | `upload`    | owner    | owner    | path, name, rule, description|
//! | `request`   | receiver | S and R  | file id, sender org          |
//! | `transfer`  | receiver | S        | event id                     |
//! | `keyaccess` | receiver | S        | event id                     |
//! | `decrypt`   | receiver | R        | event id                     |
//! | `verify`    | any      | local    | event id (query)             |
//! | `list`      | any      | local    | `owner=..`, `name=..` (query)|

mod ctx;

use std::collections::BTreeSet;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ctx::{ExecCtx, Execution, FileSend, PeerEnv, StagedPlain};

use crate::codec;
use crate::identity::{OrgId, SigningKey, VerificationKey};
use crate::ledger::{hash, Digest, Namespace, StateKey};
use crate::offstate::{self, EntryKind, OffStateError};
use crate::pdc::{self, CollectionDef, CollectionId, PdcError};
use crate::txflow::{PolicyExpr, Proposal, SideEffect};

pub const UPLOAD: &str = "upload";
pub const REQUEST: &str = "request";
pub const TRANSFER: &str = "transfer";
pub const KEYACCESS: &str = "keyaccess";
pub const DECRYPT: &str = "decrypt";
pub const VERIFY: &str = "verify";
pub const LIST: &str = "list";

pub const TX_FUNCTIONS: [&str; 5] = [UPLOAD, REQUEST, TRANSFER, KEYACCESS, DECRYPT];

pub fn is_query(function: &str) -> bool {
    matches!(function, VERIFY | LIST)
}

#[derive(Clone, Debug, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum ContractError {
    #[error("proposer is not admitted to the channel")]
    AccessDenied,
    #[error("unknown function {0:?}")]
    UnknownFunction(String),
    #[error("bad arguments: {0}")]
    BadArgs(String),
    #[error("off-state file {0:?} not found")]
    FileMissing(String),
    #[error("id {0} already exists")]
    DuplicateId(String),
    #[error("unknown file {0}")]
    UnknownFile(String),
    #[error("unknown event {0}")]
    UnknownEvent(String),
    #[error("only the owning org may do this")]
    NotOwner,
    #[error("must be executed by the sender's peer")]
    NotSender,
    #[error("proposer is not the event's receiver")]
    NotReceiver,
    #[error("event is in phase {found}, expected {expected}")]
    WrongPhase { expected: Phase, found: Phase },
    #[error("access rule does not permit this transfer")]
    FlagFalse,
    #[error("file transfer failed: {0}")]
    TransferFailed(String),
    #[error("decryption key not yet available on this peer")]
    KeyMissing,
    #[error("encrypted file not present in off-state")]
    CipherMissing,
    #[error("randomized function requires a single-org endorsement policy, got {0}")]
    NondeterministicPolicy(String),
    #[error("private data: {0}")]
    Pdc(String),
    #[error("off-state: {0}")]
    OffState(String),
}

impl From<OffStateError> for ContractError {
    fn from(e: OffStateError) -> Self {
        ContractError::OffState(e.to_string())
    }
}

impl From<PdcError> for ContractError {
    fn from(e: PdcError) -> Self {
        ContractError::Pdc(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntity {
    pub id: String,
    pub name: String,
    /// Hash of the plaintext.
    pub hash: Digest,
    pub access_rule: BTreeSet<OrgId>,
    pub description: String,
    pub owner: OrgId,
    /// Off-state entry name on the owner's peer.
    pub location: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Requested,
    Transferred,
    KeyReleased,
    Decrypted,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Outcome of the receiver's check of the decrypted bytes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Pending,
    Verified,
    HashMismatch,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventEntity {
    pub id: String,
    pub file_id: String,
    /// Empty until the transfer transaction sets it.
    pub key_id: String,
    /// Whether the access rule permits the receiver.
    pub flag: bool,
    pub sender: OrgId,
    pub receiver: OrgId,
    pub time_ms: u64,
    pub phase: Phase,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyEntity {
    pub id: String,
    /// Hash of the encrypted file, nonce included.
    pub hash_enc_file: Digest,
    pub public_key: VerificationKey,
    /// Signature over the encrypted file under `public_key`.
    pub signature: Vec<u8>,
    /// Hash of the AES key held in the private collection.
    pub key_hash: Digest,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecryptResult {
    pub verdict: Verdict,
    /// Hash of the decrypted plaintext, when decryption authenticated.
    pub digest: Option<Digest>,
}

fn id_from(d: Digest) -> String {
    d.to_hex()[..32].to_string()
}

pub fn file_key(id: &str) -> StateKey {
    StateKey {
        namespace: Namespace::File,
        id: id.to_string(),
    }
}

pub fn event_key(id: &str) -> StateKey {
    StateKey {
        namespace: Namespace::Event,
        id: id.to_string(),
    }
}

pub fn key_pub_key(id: &str) -> StateKey {
    StateKey {
        namespace: Namespace::KeyPub,
        id: id.to_string(),
    }
}

pub fn key_priv_key(id: &str) -> StateKey {
    StateKey {
        namespace: Namespace::KeyPriv,
        id: id.to_string(),
    }
}

/// The sender-only collection holding an event's AES key.
pub fn sender_collection(key_id: &str, sender: &OrgId) -> CollectionDef {
    let members: BTreeSet<OrgId> = [sender.clone()].into();
    CollectionDef::new(&key_priv_key(key_id), members.clone(), members)
}

/// The collection created when the key is released to the receiver.
pub fn shared_collection_id(key_id: &str, sender: &OrgId, receiver: &OrgId) -> CollectionId {
    let members: BTreeSet<OrgId> = [sender.clone(), receiver.clone()].into();
    CollectionId::derive(&key_priv_key(key_id), &members)
}

pub fn file_id(owner: &OrgId, path: &str) -> String {
    id_from(hash(&codec::encode(&("file-id", owner, path))))
}

pub fn event_id(file_id: &str, receiver: &OrgId, nonce: &[u8; 16]) -> String {
    id_from(hash(&codec::encode(&("event-id", file_id, receiver, nonce))))
}

pub fn key_id(event_id: &str) -> String {
    id_from(hash(&codec::encode(&("key-id", event_id))))
}

/// Name of the ciphertext entry delivered to the receiver.
pub fn cipher_name(event_id: &str) -> String {
    format!("{event_id}.enc")
}

/// Off-state name for a decrypted file.
pub fn plaintext_name(file: &FileEntity) -> String {
    let mut s: String = file
        .name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' })
        .collect();
    if s.is_empty() || s.starts_with('.') || s.ends_with(".meta") {
        s = format!("file-{}", file.id);
    }
    s
}

fn decode<T: serde::de::DeserializeOwned>(bytes: &[u8], what: &str) -> Result<T, ContractError> {
    codec::decode(bytes).map_err(|e| ContractError::OffState(format!("corrupt {what} record: {e}")))
}

fn args<'p, const N: usize>(p: &'p Proposal) -> Result<[&'p str; N], ContractError> {
    if p.args.len() != N {
        return Err(ContractError::BadArgs(format!(
            "{} takes {N} arguments, got {}",
            p.function,
            p.args.len()
        )));
    }
    Ok(std::array::from_fn(|i| p.args[i].as_str()))
}

fn load_file(ctx: &mut ExecCtx<'_>, id: &str) -> Result<FileEntity, ContractError> {
    let bytes = ctx.get(&file_key(id)).ok_or_else(|| ContractError::UnknownFile(id.to_string()))?;
    decode(&bytes, "file")
}

fn load_event(ctx: &mut ExecCtx<'_>, id: &str) -> Result<EventEntity, ContractError> {
    let bytes = ctx.get(&event_key(id)).ok_or_else(|| ContractError::UnknownEvent(id.to_string()))?;
    decode(&bytes, "event")
}

fn expect_phase(event: &EventEntity, expected: Phase) -> Result<(), ContractError> {
    if event.phase != expected {
        return Err(ContractError::WrongPhase {
            expected,
            found: event.phase,
        });
    }
    Ok(())
}

pub fn parse_rule(rule: &str, known: &BTreeSet<OrgId>) -> Result<BTreeSet<OrgId>, ContractError> {
    let mut out = BTreeSet::new();
    for part in rule.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let org: OrgId = part.parse().map_err(|_| ContractError::BadArgs(format!("bad org {part:?}")))?;
        if !known.contains(&org) {
            return Err(ContractError::BadArgs(format!("{org} is not a consortium org")));
        }
        out.insert(org);
    }
    Ok(out)
}

static EXECUTIONS: AtomicU64 = AtomicU64::new(0);

/// Number of [`execute`] calls made by this process.
pub fn executions() -> u64 {
    EXECUTIONS.load(Ordering::Relaxed)
}

/// Executes a transaction function against the peer's committed state.
/// Nothing on the peer changes; effects are returned in the [`Execution`].
pub fn execute(env: &PeerEnv<'_>, proposal: &Proposal) -> Result<Execution, ContractError> {
    EXECUTIONS.fetch_add(1, Ordering::Relaxed);
    let mut ctx = ExecCtx::new(env, proposal);
    let payload = match proposal.function.as_str() {
        UPLOAD => upload(&mut ctx)?,
        REQUEST => request(&mut ctx)?,
        TRANSFER => transfer(&mut ctx)?,
        KEYACCESS => key_access(&mut ctx)?,
        DECRYPT => decrypt(&mut ctx)?,
        other => return Err(ContractError::UnknownFunction(other.to_string())),
    };
    Ok(ctx.finish(payload))
}

/// Answer to a query, with the bytes it had to hash.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryOutput {
    pub payload: Vec<u8>,
    pub crypto_bytes: u64,
}

/// Runs a query function. Produces no transaction.
pub fn query(env: &PeerEnv<'_>, proposal: &Proposal) -> Result<QueryOutput, ContractError> {
    let mut ctx = ExecCtx::new(env, proposal);
    let payload = match proposal.function.as_str() {
        VERIFY => {
            let [event_id] = args::<1>(proposal)?;
            codec::encode(&verify_received(&mut ctx, event_id))
        }
        LIST => codec::encode(&list_files(env, &proposal.args)?),
        other => return Err(ContractError::UnknownFunction(other.to_string())),
    };
    Ok(QueryOutput {
        crypto_bytes: ctx.finish(Vec::new()).crypto_bytes,
        payload,
    })
}

fn upload(ctx: &mut ExecCtx<'_>) -> Result<Vec<u8>, ContractError> {
    let p = ctx.proposal();
    let [path, name, rule, description] = args::<4>(p)?;
    let owner = p.proposer.org.clone();
    if ctx.executor().org != owner {
        return Err(ContractError::NotOwner);
    }
    let store = ctx.offstate();
    let meta = store.meta(path).map_err(|_| ContractError::FileMissing(path.to_string()))?;
    if meta.kind != EntryKind::Plain {
        return Err(ContractError::BadArgs(format!("{path} is not a plaintext entry")));
    }
    let digest = store.hash_of(path)?;
    ctx.charge_crypto(meta.length);
    let access_rule = parse_rule(rule, ctx.env().registry.orgs())?;
    let id = file_id(&owner, path);
    let key = file_key(&id);
    if ctx.get(&key).is_some() {
        return Err(ContractError::DuplicateId(id));
    }
    let entity = FileEntity {
        id,
        name: name.to_string(),
        hash: digest,
        access_rule,
        description: description.to_string(),
        owner: owner.clone(),
        location: path.to_string(),
    };
    let bytes = codec::encode(&entity);
    ctx.put(key.clone(), bytes.clone());
    ctx.set_key_policy(key, PolicyExpr::and_of([&owner]));
    Ok(bytes)
}

fn request(ctx: &mut ExecCtx<'_>) -> Result<Vec<u8>, ContractError> {
    let p = ctx.proposal();
    let [fid, sender] = args::<2>(p)?;
    let sender: OrgId = sender.parse().map_err(|_| ContractError::BadArgs("bad sender org".into()))?;
    let file = load_file(ctx, fid)?;
    if file.owner != sender {
        return Err(ContractError::NotOwner);
    }
    let receiver = p.proposer.org.clone();
    let id = event_id(fid, &receiver, &p.nonce);
    let key = event_key(&id);
    if ctx.get(&key).is_some() {
        return Err(ContractError::DuplicateId(id));
    }
    let event = EventEntity {
        flag: file.access_rule.contains(&receiver),
        id,
        file_id: fid.to_string(),
        key_id: String::new(),
        sender: sender.clone(),
        receiver: receiver.clone(),
        time_ms: p.timestamp_ms,
        phase: Phase::Requested,
        verdict: Verdict::Pending,
    };
    let bytes = codec::encode(&event);
    ctx.put(key.clone(), bytes.clone());
    ctx.set_key_policy(key, PolicyExpr::and_of([&sender, &receiver]));
    Ok(bytes)
}

/// Randomized functions must not be endorsed by more than one org, since
/// endorsers would disagree on the random values.
fn single_org_guard(policy: &PolicyExpr) -> Result<(), ContractError> {
    if policy.orgs().len() != 1 {
        return Err(ContractError::NondeterministicPolicy(policy.to_string()));
    }
    Ok(())
}

fn transfer(ctx: &mut ExecCtx<'_>) -> Result<Vec<u8>, ContractError> {
    let p = ctx.proposal();
    let [eid] = args::<1>(p)?;
    let mut event = load_event(ctx, eid)?;
    if p.proposer.org != event.receiver {
        return Err(ContractError::NotReceiver);
    }
    if ctx.executor().org != event.sender {
        return Err(ContractError::NotSender);
    }
    expect_phase(&event, Phase::Requested)?;
    if !event.flag {
        return Err(ContractError::FlagFalse);
    }
    let policy = PolicyExpr::and_of([&event.sender]);
    single_org_guard(&policy)?;
    let file = load_file(ctx, &event.file_id)?;

    let aes_key = ctx.derive_secret("aes-key");
    let sign_key = SigningKey::from_seed(ctx.derive_secret("file-sign-key"));
    let mut nonce = [0u8; offstate::NONCE_LEN];
    nonce.copy_from_slice(&ctx.derive_secret("aes-nonce")[..offstate::NONCE_LEN]);

    let store = ctx.offstate();
    let plain = store
        .meta(&file.location)
        .map_err(|_| ContractError::FileMissing(file.location.clone()))?;
    let dest_name = cipher_name(eid);
    let (local, meta) = offstate::encrypt_entry(store, &file.location, &dest_name, &aes_key, nonce, p.timestamp_ms)?;
    let signature = offstate::sign_file(store, &local, &sign_key)?;
    ctx.charge_crypto(plain.length + 2 * meta.length);
    // The signing key is used once and dropped here.
    let public_key = sign_key.verification_key();
    drop(sign_key);

    let kid = key_id(eid);
    let key_entity = KeyEntity {
        id: kid.clone(),
        hash_enc_file: meta.hash,
        public_key,
        signature,
        key_hash: hash(&aes_key),
    };
    let key_bytes = codec::encode(&key_entity);
    let kpub = key_pub_key(&kid);
    if ctx.get(&kpub).is_some() {
        return Err(ContractError::DuplicateId(kid));
    }
    ctx.put(kpub.clone(), key_bytes.clone());
    ctx.set_key_policy(kpub, policy.clone());
    pdc::private_put(ctx, &sender_collection(&kid, &event.sender), &key_priv_key(&kid), aes_key.to_vec())?;

    event.phase = Phase::Transferred;
    event.key_id = kid;
    let ekey = event_key(eid);
    ctx.put(ekey.clone(), codec::encode(&event));
    ctx.set_key_policy(ekey, policy);

    ctx.emit(SideEffect::FileSent {
        to: event.receiver.clone(),
        name: dest_name.clone(),
        length: meta.length,
        digest: meta.hash,
    });
    ctx.send = Some(FileSend {
        to: event.receiver,
        entry: local,
        dest_name,
        length: meta.length,
        digest: meta.hash,
    });
    Ok(key_bytes)
}

fn key_access(ctx: &mut ExecCtx<'_>) -> Result<Vec<u8>, ContractError> {
    let p = ctx.proposal();
    let [eid] = args::<1>(p)?;
    let mut event = load_event(ctx, eid)?;
    if p.proposer.org != event.receiver {
        return Err(ContractError::NotReceiver);
    }
    if ctx.executor().org != event.sender {
        return Err(ContractError::NotSender);
    }
    expect_phase(&event, Phase::Transferred)?;
    let old = sender_collection(&event.key_id, &event.sender);
    let members: BTreeSet<OrgId> = [event.sender.clone(), event.receiver.clone()].into();
    pdc::reshare(ctx, &old, members, &key_priv_key(&event.key_id)).map_err(|e| match e {
        PdcError::NotFound(_) => ContractError::KeyMissing,
        other => other.into(),
    })?;
    event.phase = Phase::KeyReleased;
    let bytes = codec::encode(&event);
    let ekey = event_key(eid);
    ctx.put(ekey.clone(), bytes.clone());
    ctx.set_key_policy(ekey, PolicyExpr::and_of([&event.sender]));
    Ok(bytes)
}

/// Finds the delivered ciphertext: by verified content hash first, then by
/// recorded hash (a corrupted copy still gets a decryption attempt so the
/// failure is recorded).
fn locate_cipher(store: &offstate::OffStateStore, digest: &Digest) -> Result<Option<String>, ContractError> {
    if let Some(n) = store.find_by_hash(digest)? {
        return Ok(Some(n));
    }
    Ok(store
        .list()?
        .into_iter()
        .find(|(_, m)| m.hash == *digest && m.kind == EntryKind::Cipher)
        .map(|(n, _)| n))
}

fn decrypt(ctx: &mut ExecCtx<'_>) -> Result<Vec<u8>, ContractError> {
    let p = ctx.proposal();
    let [eid] = args::<1>(p)?;
    let mut event = load_event(ctx, eid)?;
    if p.proposer.org != event.receiver {
        return Err(ContractError::NotReceiver);
    }
    if ctx.executor().org != event.receiver {
        return Err(ContractError::NotReceiver);
    }
    expect_phase(&event, Phase::KeyReleased)?;
    let key_entity: KeyEntity = {
        let bytes = ctx
            .get(&key_pub_key(&event.key_id))
            .ok_or_else(|| ContractError::UnknownEvent(eid.to_string()))?;
        decode(&bytes, "key")?
    };
    let coll = shared_collection_id(&event.key_id, &event.sender, &event.receiver);
    let k = pdc::private_get(ctx, &coll, &key_priv_key(&event.key_id)).map_err(|e| match e {
        PdcError::NotFound(_) => ContractError::KeyMissing,
        other => other.into(),
    })?;
    let aes_key: [u8; 32] = k.as_slice().try_into().map_err(|_| ContractError::KeyMissing)?;
    let file = load_file(ctx, &event.file_id)?;

    let store = ctx.offstate();
    let cipher = locate_cipher(store, &key_entity.hash_enc_file)?.ok_or(ContractError::CipherMissing)?;
    let cipher_meta = store.meta(&cipher)?;
    let tag = format!("decrypt-{}", ctx.tx_id().short());
    let result = match offstate::decrypt_entry_staged(store, &cipher, &tag, &aes_key) {
        Ok((digest, length)) => {
            ctx.charge_crypto(2 * cipher_meta.length + length);
            if digest == file.hash {
                let name = plaintext_name(&file);
                ctx.emit(SideEffect::PlaintextStaged {
                    name: name.clone(),
                    length,
                    digest,
                });
                ctx.staged_plain = Some(StagedPlain { tag, name });
                DecryptResult {
                    verdict: Verdict::Verified,
                    digest: Some(digest),
                }
            } else {
                store.discard_staged(&tag)?;
                DecryptResult {
                    verdict: Verdict::HashMismatch,
                    digest: Some(digest),
                }
            }
        }
        Err(OffStateError::AuthFailed) => {
            ctx.charge_crypto(cipher_meta.length);
            DecryptResult {
                verdict: Verdict::HashMismatch,
                digest: None,
            }
        }
        Err(e) => return Err(e.into()),
    };
    event.phase = Phase::Decrypted;
    event.verdict = result.verdict;
    let ekey = event_key(eid);
    ctx.put(ekey.clone(), codec::encode(&event));
    ctx.set_key_policy(ekey, PolicyExpr::and_of([&event.receiver]));
    Ok(codec::encode(&result))
}

fn verify_received(ctx: &mut ExecCtx<'_>, eid: &str) -> bool {
    let Ok(event) = load_event(ctx, eid) else { return false };
    if event.key_id.is_empty() {
        return false;
    }
    let Some(bytes) = ctx.get(&key_pub_key(&event.key_id)) else {
        return false;
    };
    let Ok(key) = decode::<KeyEntity>(&bytes, "key") else {
        return false;
    };
    let store = ctx.offstate();
    let Ok(Some(name)) = store.find_by_hash(&key.hash_enc_file) else {
        return false;
    };
    if let Ok(meta) = store.meta(&name) {
        ctx.charge_crypto(2 * meta.length);
    }
    offstate::verify_file(store, &name, &key.public_key, &key.signature).unwrap_or(false)
}

/// Files matching every `owner=<org>` / `name=<name>` filter.
pub fn list_files(env: &PeerEnv<'_>, filters: &[String]) -> Result<Vec<FileEntity>, ContractError> {
    let mut owner = None;
    let mut name = None;
    for f in filters {
        match f.split_once('=') {
            Some(("owner", v)) => owner = Some(v.to_string()),
            Some(("name", v)) => name = Some(v.to_string()),
            _ => return Err(ContractError::BadArgs(format!("unknown filter {f:?}"))),
        }
    }
    let mut out = Vec::new();
    for (_, v) in env.state.namespace(Namespace::File) {
        let f: FileEntity = decode(&v.value, "file")?;
        if owner.as_deref().is_some_and(|o| f.owner.as_str() != o) || name.as_deref().is_some_and(|n| f.name != n) {
            continue;
        }
        out.push(f);
    }
    Ok(out)
}
