// SPDX-License-Identifier: Apache-2.0

//! Stop-and-wait chunked file transfer between two off-state stores.
//!
//! ```text
//! sender                          receiver
//!   Open{name, len, digest}  ->
//!                            <-   Ack{0}
//!   Chunk{1, <= buffer bytes} ->
//!                            <-   Ack{1}
//!   ...
//!   Finish{digest}           ->
//!                            <-   Done{Ok(stored name) | Err}
//! ```
//!
//! Both ends are plain state machines; the caller moves frames between them.
//! The receiver writes into the store's partial area, so nothing is visible
//! until `Finish` has been checked.

use std::fs::File;
use std::io::{BufReader, Read};

use serde::{Deserialize, Serialize};

use super::store::{EntryKind, EntryMeta, OffStateStore, PartialWriter};
use super::OffStateError;
use crate::ledger::Digest;

/// Largest accepted buffer size.
pub const MAX_BUFFER: u32 = 8 << 20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransferFrame {
    Open {
        job: u64,
        name: String,
        total_len: u64,
        digest: Digest,
        kind: EntryKind,
    },
    Chunk {
        job: u64,
        seq: u64,
        data: Vec<u8>,
    },
    Finish {
        job: u64,
        digest: Digest,
    },
    Ack {
        job: u64,
        seq: u64,
    },
    Done {
        job: u64,
        result: Result<String, String>,
    },
    Abort {
        job: u64,
        reason: String,
    },
}

impl TransferFrame {
    pub fn job(&self) -> u64 {
        match self {
            TransferFrame::Open { job, .. }
            | TransferFrame::Chunk { job, .. }
            | TransferFrame::Finish { job, .. }
            | TransferFrame::Ack { job, .. }
            | TransferFrame::Done { job, .. }
            | TransferFrame::Abort { job, .. } => *job,
        }
    }

    /// Frames travelling from sender to receiver.
    pub fn is_forward(&self) -> bool {
        matches!(
            self,
            TransferFrame::Open { .. } | TransferFrame::Chunk { .. } | TransferFrame::Finish { .. } | TransferFrame::Abort { .. }
        )
    }
}

/// What the sender wants to happen next.
#[derive(Debug)]
pub enum SenderStep {
    Send(TransferFrame),
    Complete(Result<String, OffStateError>),
    Ignore,
}

#[derive(Debug, PartialEq, Eq)]
enum SenderState {
    AwaitAck(u64),
    AwaitDone,
    Finished,
}

#[derive(Debug)]
pub struct TransferSender {
    job: u64,
    reader: BufReader<File>,
    buffer: usize,
    digest: Digest,
    total: u64,
    sent: u64,
    state: SenderState,
}

impl TransferSender {
    /// Opens `name` in `store` for sending as `dest_name`. Returns the
    /// sender and the opening frame.
    pub fn start(
        store: &OffStateStore,
        name: &str,
        dest_name: &str,
        job: u64,
        buffer: u32,
    ) -> Result<(Self, TransferFrame), OffStateError> {
        let meta = store.meta(name)?;
        let file = store.open_read(name)?;
        let buffer = buffer.clamp(1, MAX_BUFFER) as usize;
        let open = TransferFrame::Open {
            job,
            name: dest_name.to_string(),
            total_len: meta.length,
            digest: meta.hash,
            kind: meta.kind,
        };
        Ok((
            TransferSender {
                job,
                reader: BufReader::with_capacity(buffer.min(1 << 20), file),
                buffer,
                digest: meta.hash,
                total: meta.length,
                sent: 0,
                state: SenderState::AwaitAck(0),
            },
            open,
        ))
    }

    pub fn job(&self) -> u64 {
        self.job
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn sent(&self) -> u64 {
        self.sent
    }

    pub fn digest(&self) -> Digest {
        self.digest
    }

    pub fn is_finished(&self) -> bool {
        self.state == SenderState::Finished
    }

    /// Sequence number of the frame awaiting acknowledgement, if any.
    pub fn awaiting(&self) -> Option<u64> {
        match self.state {
            SenderState::AwaitAck(s) => Some(s),
            SenderState::AwaitDone => Some(u64::MAX),
            SenderState::Finished => None,
        }
    }

    fn next_chunk(&mut self, seq: u64) -> Result<TransferFrame, OffStateError> {
        let want = (self.total - self.sent).min(self.buffer as u64) as usize;
        if want == 0 {
            self.state = SenderState::AwaitDone;
            return Ok(TransferFrame::Finish {
                job: self.job,
                digest: self.digest,
            });
        }
        let mut data = vec![0u8; want];
        self.reader.read_exact(&mut data)?;
        self.sent += want as u64;
        self.state = SenderState::AwaitAck(seq + 1);
        Ok(TransferFrame::Chunk {
            job: self.job,
            seq: seq + 1,
            data,
        })
    }

    pub fn on_frame(&mut self, frame: TransferFrame) -> SenderStep {
        if frame.job() != self.job || self.state == SenderState::Finished {
            return SenderStep::Ignore;
        }
        match (frame, &self.state) {
            (TransferFrame::Ack { seq, .. }, SenderState::AwaitAck(want)) if seq == *want => match self.next_chunk(seq) {
                Ok(f) => SenderStep::Send(f),
                Err(e) => {
                    self.state = SenderState::Finished;
                    SenderStep::Complete(Err(e))
                }
            },
            (TransferFrame::Done { result, .. }, _) => {
                self.state = SenderState::Finished;
                SenderStep::Complete(result.map_err(OffStateError::Remote))
            }
            _ => SenderStep::Ignore,
        }
    }

    /// Gives up. Returns the frame that tells the receiver to discard.
    pub fn abort(&mut self, reason: &str) -> TransferFrame {
        self.state = SenderState::Finished;
        TransferFrame::Abort {
            job: self.job,
            reason: reason.to_string(),
        }
    }
}

#[derive(Debug)]
pub struct TransferReceiver {
    job: u64,
    from: String,
    name: String,
    kind: EntryKind,
    total: u64,
    digest: Digest,
    next_seq: u64,
    writer: Option<PartialWriter>,
}

/// A completed inbound transfer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Received {
    pub name: String,
    pub meta: EntryMeta,
}

impl TransferReceiver {
    /// Handles `Open`. On success returns the receiver and `Ack{0}`.
    pub fn open(store: &OffStateStore, from: &str, frame: TransferFrame) -> Result<(Self, TransferFrame), TransferFrame> {
        let TransferFrame::Open {
            job,
            name,
            total_len,
            digest,
            kind,
        } = frame
        else {
            return Err(TransferFrame::Done {
                job: frame.job(),
                result: Err("expected Open".into()),
            });
        };
        let refuse = |e: OffStateError| TransferFrame::Done {
            job,
            result: Err(e.to_string()),
        };
        super::store::validate_name(&name).map_err(refuse)?;
        let writer = store.begin_partial().map_err(refuse)?;
        Ok((
            TransferReceiver {
                job,
                from: from.to_string(),
                name,
                kind,
                total: total_len,
                digest,
                next_seq: 1,
                writer: Some(writer),
            },
            TransferFrame::Ack { job, seq: 0 },
        ))
    }

    pub fn job(&self) -> u64 {
        self.job
    }

    pub fn from(&self) -> &str {
        &self.from
    }

    pub fn received(&self) -> u64 {
        self.writer.as_ref().map_or(0, PartialWriter::len)
    }

    fn fail(&mut self, reason: String) -> (Option<TransferFrame>, Option<Result<Received, OffStateError>>) {
        if let Some(w) = self.writer.take() {
            w.abandon();
        }
        (
            Some(TransferFrame::Done {
                job: self.job,
                result: Err(reason.clone()),
            }),
            Some(Err(OffStateError::Remote(reason))),
        )
    }

    /// Handles a forward frame. Returns the reply, if any, and the outcome
    /// once the transfer has ended.
    pub fn on_frame(
        &mut self,
        store: &OffStateStore,
        frame: TransferFrame,
        timestamp_ms: u64,
    ) -> (Option<TransferFrame>, Option<Result<Received, OffStateError>>) {
        if frame.job() != self.job || self.writer.is_none() {
            return (None, None);
        }
        match frame {
            TransferFrame::Chunk { seq, data, .. } => {
                if seq + 1 == self.next_seq {
                    // Retransmission of the chunk just written.
                    return (Some(TransferFrame::Ack { job: self.job, seq }), None);
                }
                if seq != self.next_seq {
                    return self.fail(format!("chunk {seq} out of order, expected {}", self.next_seq));
                }
                let w = self.writer.as_mut().expect("checked above");
                if w.len() + data.len() as u64 > self.total {
                    return self.fail("more bytes than announced".into());
                }
                if let Err(e) = w.write(&data) {
                    return self.fail(e.to_string());
                }
                self.next_seq += 1;
                (Some(TransferFrame::Ack { job: self.job, seq }), None)
            }
            TransferFrame::Finish { digest, .. } => {
                let w = self.writer.take().expect("checked above");
                if w.len() != self.total || digest != self.digest {
                    w.abandon();
                    let reason = OffStateError::IntegrityMismatch.to_string();
                    return (
                        Some(TransferFrame::Done {
                            job: self.job,
                            result: Err(reason),
                        }),
                        Some(Err(OffStateError::IntegrityMismatch)),
                    );
                }
                match store.finish_partial(
                    w,
                    &self.name,
                    self.kind,
                    Some(self.digest),
                    Some(self.from.clone()),
                    timestamp_ms,
                    false,
                ) {
                    Ok((name, meta)) => (
                        Some(TransferFrame::Done {
                            job: self.job,
                            result: Ok(name.clone()),
                        }),
                        Some(Ok(Received { name, meta })),
                    ),
                    Err(e) => {
                        let reason = e.to_string();
                        (
                            Some(TransferFrame::Done {
                                job: self.job,
                                result: Err(reason),
                            }),
                            Some(Err(e)),
                        )
                    }
                }
            }
            TransferFrame::Abort { reason, .. } => {
                if let Some(w) = self.writer.take() {
                    w.abandon();
                }
                (None, Some(Err(OffStateError::Interrupted(reason))))
            }
            _ => (None, None),
        }
    }

    /// Drops the partial file, e.g. when the sender went silent.
    pub fn abandon(&mut self) {
        if let Some(w) = self.writer.take() {
            w.abandon();
        }
    }
}

/// Runs a transfer between two local stores, honoring `buffer` per cycle.
/// Returns the stored name and metadata at the destination.
pub fn transfer_local(
    src: &OffStateStore,
    name: &str,
    dst: &OffStateStore,
    dest_name: &str,
    buffer: u32,
) -> Result<Received, OffStateError> {
    let (mut sender, open) = TransferSender::start(src, name, dest_name, 1, buffer)?;
    let (mut receiver, mut reply) = TransferReceiver::open(dst, "local", open).map_err(|f| match f {
        TransferFrame::Done { result: Err(e), .. } => OffStateError::Remote(e),
        _ => OffStateError::Remote("refused".into()),
    })?;
    let mut outcome = None;
    loop {
        match sender.on_frame(reply) {
            SenderStep::Send(frame) => {
                let (r, done) = receiver.on_frame(dst, frame, 0);
                if done.is_some() {
                    outcome = done;
                }
                match r {
                    Some(r) => reply = r,
                    None => break,
                }
            }
            SenderStep::Complete(res) => {
                res?;
                break;
            }
            SenderStep::Ignore => return Err(OffStateError::Interrupted("protocol stalled".into())),
        }
    }
    outcome.unwrap_or_else(|| Err(OffStateError::Interrupted("no outcome".into())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::hash;

    fn stores() -> (tempfile::TempDir, OffStateStore, OffStateStore) {
        let d = tempfile::tempdir().unwrap();
        let a = OffStateStore::open(d.path().join("a")).unwrap();
        let b = OffStateStore::open(d.path().join("b")).unwrap();
        (d, a, b)
    }

    #[test]
    fn local_transfer_matches() {
        let (_d, a, b) = stores();
        let data: Vec<u8> = (0..1_000_003u32).map(|i| (i % 253) as u8).collect();
        a.put("f", &data, 0).unwrap();
        for buffer in [1, 4096, 1 << 20, 8 << 20] {
            let got = transfer_local(&a, "f", &b, "g", buffer).unwrap();
            assert_eq!(got.meta.hash, hash(&data));
            assert_eq!(b.get(&got.name).unwrap(), data);
        }
    }

    #[test]
    fn empty_file_transfers() {
        let (_d, a, b) = stores();
        a.put("e", b"", 0).unwrap();
        let got = transfer_local(&a, "e", &b, "e", 1024).unwrap();
        assert_eq!(got.meta.length, 0);
    }

    #[test]
    fn abort_leaves_nothing_visible() {
        let (_d, a, b) = stores();
        a.put("f", &[1u8; 10_000], 0).unwrap();
        let (mut s, open) = TransferSender::start(&a, "f", "g", 3, 1000).unwrap();
        let (mut r, ack) = TransferReceiver::open(&b, "peer", open).unwrap();
        let SenderStep::Send(chunk) = s.on_frame(ack) else { panic!() };
        let (ack, _) = r.on_frame(&b, chunk, 0);
        assert!(ack.is_some());
        let abort = s.abort("peer crashed");
        let (_, out) = r.on_frame(&b, abort, 0);
        assert!(matches!(out, Some(Err(OffStateError::Interrupted(_)))));
        assert!(b.list().unwrap().is_empty());
        assert_eq!(b.gc(false).unwrap().partials, 0);
    }

    #[test]
    fn corrupted_chunk_is_integrity_mismatch() {
        let (_d, a, b) = stores();
        a.put("f", &[9u8; 3000], 0).unwrap();
        let (mut s, open) = TransferSender::start(&a, "f", "g", 1, 1000).unwrap();
        let (mut r, mut reply) = TransferReceiver::open(&b, "p", open).unwrap();
        let mut result = None;
        while result.is_none() {
            let SenderStep::Send(mut f) = s.on_frame(reply) else { break };
            if let TransferFrame::Chunk { seq: 2, data, .. } = &mut f {
                data[0] ^= 0xff;
            }
            let (rep, out) = r.on_frame(&b, f, 0);
            result = out;
            reply = rep.unwrap();
        }
        assert!(matches!(result, Some(Err(OffStateError::IntegrityMismatch))));
        assert!(!b.exists("g"));
    }
}
