// SPDX-License-Identifier: Apache-2.0

//! Off-state: per-node big-file storage outside the ledger, streaming
//! authenticated encryption, file signatures and the chunked transfer
//! protocol.

mod cipher;
mod store;
mod transfer;

use std::io::{self, BufReader, BufWriter};

use thiserror::Error;

pub use cipher::{cipher_len, decrypt_stream, encrypt_stream, CHUNK, NONCE_LEN, TAG_LEN};
pub use store::{validate_name, EntryKind, EntryMeta, GcReport, OffStateStore, PartialWriter, HASH_BUFFER};
pub use transfer::{transfer_local, Received, SenderStep, TransferFrame, TransferReceiver, TransferSender, MAX_BUFFER};

use crate::codec::{self, CodecError};
use crate::identity::{SigningKey, VerificationKey};
use crate::ledger::Digest;

#[derive(Debug, Error)]
pub enum OffStateError {
    #[error("no off-state entry {0}")]
    NotFound(String),
    #[error("invalid entry name {0:?}")]
    BadName(String),
    #[error("authenticated decryption failed")]
    AuthFailed,
    #[error("content does not match the announced digest")]
    IntegrityMismatch,
    #[error("transfer interrupted: {0}")]
    Interrupted(String),
    #[error("destination unreachable: {0}")]
    Unreachable(String),
    #[error("remote: {0}")]
    Remote(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn file_message(digest: &Digest) -> Vec<u8> {
    codec::signing_bytes("file", digest)
}

/// Signs the streamed hash of an entry.
pub fn sign_file(store: &OffStateStore, name: &str, key: &SigningKey) -> Result<Vec<u8>, OffStateError> {
    let digest = store.hash_of(name)?;
    Ok(key.sign_raw(&file_message(&digest)).to_vec())
}

/// True iff the entry's current bytes carry `sig` under `pk`.
pub fn verify_file(store: &OffStateStore, name: &str, pk: &VerificationKey, sig: &[u8]) -> Result<bool, OffStateError> {
    let digest = store.hash_of(name)?;
    Ok(pk.verify_raw(&file_message(&digest), sig))
}

/// Encrypts entry `name` into a new cipher entry. Returns its name and
/// metadata.
pub fn encrypt_entry(
    store: &OffStateStore,
    name: &str,
    out_name: &str,
    key: &[u8; 32],
    nonce: [u8; NONCE_LEN],
    timestamp_ms: u64,
) -> Result<(String, EntryMeta), OffStateError> {
    validate_name(out_name)?;
    let src = BufReader::with_capacity(CHUNK, store.open_read(name)?);
    let mut w = store.begin_partial()?;
    if let Err(e) = encrypt_stream(key, nonce, src, &mut w) {
        w.abandon();
        return Err(e);
    }
    store.finish_partial(w, out_name, EntryKind::Cipher, None, None, timestamp_ms, false)
}

/// Decrypts cipher entry `name` into the staging area under `tag`. Nothing
/// remains staged on failure. Returns the plaintext digest and length.
pub fn decrypt_entry_staged(
    store: &OffStateStore,
    name: &str,
    tag: &str,
    key: &[u8; 32],
) -> Result<(Digest, u64), OffStateError> {
    let src = BufReader::with_capacity(CHUNK + TAG_LEN, store.open_read(name)?);
    let (_, w) = store.begin_staged(tag)?;
    let mut hw = HashingWriter::new(w);
    let res = decrypt_stream(key, src, &mut hw);
    match res {
        Ok(len) => {
            let (digest, inner) = hw.finish();
            drop(inner);
            Ok((digest, len))
        }
        Err(e) => {
            drop(hw);
            store.discard_staged(tag)?;
            Err(e)
        }
    }
}

/// Writer that hashes everything passing through.
pub struct HashingWriter<W: io::Write> {
    inner: W,
    hasher: crate::ledger::Hasher,
}

impl<W: io::Write> HashingWriter<W> {
    pub fn new(inner: W) -> Self {
        HashingWriter {
            inner,
            hasher: crate::ledger::Hasher::new(),
        }
    }

    pub fn finish(self) -> (Digest, W) {
        (self.hasher.finish(), self.inner)
    }
}

impl<W: io::Write> io::Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

/// Convenience for tests and tools: the decrypted bytes of an entry.
pub fn decrypt_entry_to_vec(store: &OffStateStore, name: &str, key: &[u8; 32]) -> Result<Vec<u8>, OffStateError> {
    let mut out = Vec::new();
    decrypt_stream(key, BufReader::new(store.open_read(name)?), BufWriter::new(&mut out))?;
    Ok(out)
}
