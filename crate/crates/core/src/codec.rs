// SPDX-License-Identifier: Apache-2.0

//! Canonical byte encoding shared by hashing, signing, persistence and the
//! wire protocol.
//!
//! Values are encoded field by field in declaration order, integers as
//! fixed-width big-endian, and every variable-length sequence carries a u64
//! length prefix. Only ordered collections (`BTreeMap`, `BTreeSet`, `Vec`)
//! appear in encoded types, so equal values always produce identical bytes.

use std::io::{self, Read, Write};

use bincode::Options;
use serde::{de::DeserializeOwned, Serialize};
use thiserror::Error;

/// Upper bound for a single frame or decoded value.
pub const MAX_FRAME_LEN: u32 = 64 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("malformed canonical encoding: {0}")]
    Malformed(String),
    #[error("frame of {0} bytes exceeds limit")]
    FrameTooLarge(u32),
    #[error("truncated frame")]
    Truncated,
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn options() -> impl Options {
    bincode::DefaultOptions::new()
        .with_fixint_encoding()
        .with_big_endian()
        .with_limit(u64::from(MAX_FRAME_LEN))
        .reject_trailing_bytes()
}

pub fn encode<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    // Every encoded type is built from primitives, strings, sequences and
    // enums, none of which can fail to serialize.
    options()
        .serialize(value)
        .expect("canonical encoding is infallible for declared types")
}

pub fn encoded_len<T: Serialize + ?Sized>(value: &T) -> u64 {
    options()
        .serialized_size(value)
        .expect("canonical encoding is infallible for declared types")
}

pub fn decode<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, CodecError> {
    options()
        .deserialize(bytes)
        .map_err(|e| CodecError::Malformed(e.to_string()))
}

/// Writes `payload` behind a 4-byte big-endian length prefix.
pub fn write_frame<W: Write>(w: &mut W, payload: &[u8]) -> Result<(), CodecError> {
    let len = u32::try_from(payload.len()).map_err(|_| CodecError::FrameTooLarge(u32::MAX))?;
    if len > MAX_FRAME_LEN {
        return Err(CodecError::FrameTooLarge(len));
    }
    w.write_all(&len.to_be_bytes())?;
    w.write_all(payload)?;
    Ok(())
}

/// Reads one length-prefixed frame. `Ok(None)` on clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>, CodecError> {
    let mut len = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r.read(&mut len[filled..])?;
        if n == 0 {
            return if filled == 0 {
                Ok(None)
            } else {
                Err(CodecError::Truncated)
            };
        }
        filled += n;
    }
    let len = u32::from_be_bytes(len);
    if len > MAX_FRAME_LEN {
        return Err(CodecError::FrameTooLarge(len));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => CodecError::Truncated,
        _ => CodecError::Io(e),
    })?;
    Ok(Some(buf))
}

/// Domain-separated bytes for signing: the tag keeps signatures for one
/// purpose from being replayed as another.
pub fn signing_bytes<T: Serialize + ?Sized>(domain: &str, value: &T) -> Vec<u8> {
    encode(&(domain, value))
}
