// SPDX-License-Identifier: Apache-2.0

//! Chunked AES-256-GCM.
//!
//! On-disk layout: a 12-byte base nonce followed by chunks of at most
//! [`CHUNK`] plaintext bytes, each sealed with its own 16-byte tag. The nonce
//! of chunk `i` is the base nonce with its last eight bytes XORed with
//! `(i << 1) | last`, so reordering, truncation and extension all fail
//! authentication. An empty plaintext still produces one (empty) final chunk.

use std::io::{self, Read, Write};

use aes_gcm::aead::{AeadInPlace, KeyInit};
use aes_gcm::{Aes256Gcm, Key, Nonce, Tag};

use super::OffStateError;

pub const CHUNK: usize = 1 << 20;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;

fn chunk_nonce(base: &[u8; NONCE_LEN], index: u64, last: bool) -> [u8; NONCE_LEN] {
    let mut n = *base;
    let mix = (index << 1) | u64::from(last);
    for (b, m) in n[4..].iter_mut().zip(mix.to_be_bytes()) {
        *b ^= m;
    }
    n
}

/// Fills `buf` as far as the reader allows. Returns bytes read.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Size of the encrypted representation of `plain_len` bytes.
pub fn cipher_len(plain_len: u64) -> u64 {
    let chunks = plain_len.div_ceil(CHUNK as u64).max(1);
    NONCE_LEN as u64 + plain_len + chunks * TAG_LEN as u64
}

/// Encrypts `r` into `w`. Memory use is two chunks regardless of size.
/// Returns the number of bytes written.
pub fn encrypt_stream<R: Read, W: Write>(key: &[u8; 32], nonce: [u8; NONCE_LEN], mut r: R, mut w: W) -> Result<u64, OffStateError> {
    let aead = Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(key));
    w.write_all(&nonce)?;
    let mut written = NONCE_LEN as u64;
    let mut cur = vec![0u8; CHUNK];
    let mut next = vec![0u8; CHUNK];
    let mut cur_len = read_full(&mut r, &mut cur)?;
    let mut index = 0u64;
    loop {
        // A short chunk is necessarily the last; a full one is last only
        // when nothing follows it.
        let next_len = if cur_len == CHUNK { read_full(&mut r, &mut next)? } else { 0 };
        let last = next_len == 0;
        let n = chunk_nonce(&nonce, index, last);
        let tag = aead
            .encrypt_in_place_detached(Nonce::from_slice(&n), b"", &mut cur[..cur_len])
            .map_err(|_| OffStateError::AuthFailed)?;
        w.write_all(&cur[..cur_len])?;
        w.write_all(&tag)?;
        written += (cur_len + TAG_LEN) as u64;
        if last {
            break;
        }
        std::mem::swap(&mut cur, &mut next);
        cur_len = next_len;
        index += 1;
    }
    w.flush()?;
    Ok(written)
}

/// Decrypts `r` into `w`. Plaintext is written chunk by chunk as each
/// verifies; callers must discard `w` on error. Returns plaintext length.
pub fn decrypt_stream<R: Read, W: Write>(key: &[u8; 32], mut r: R, mut w: W) -> Result<u64, OffStateError> {
    let aead = Aes256Gcm::new(Key::<Aes256Gcm>::from_slice(key));
    let mut nonce = [0u8; NONCE_LEN];
    if read_full(&mut r, &mut nonce)? != NONCE_LEN {
        return Err(OffStateError::AuthFailed);
    }
    let sealed = CHUNK + TAG_LEN;
    let mut cur = vec![0u8; sealed];
    let mut next = vec![0u8; sealed];
    let mut cur_len = read_full(&mut r, &mut cur)?;
    let mut index = 0u64;
    let mut total = 0u64;
    loop {
        if cur_len < TAG_LEN {
            return Err(OffStateError::AuthFailed);
        }
        let next_len = if cur_len == sealed { read_full(&mut r, &mut next)? } else { 0 };
        let last = next_len == 0;
        let body = cur_len - TAG_LEN;
        let tag = Tag::clone_from_slice(&cur[body..cur_len]);
        let n = chunk_nonce(&nonce, index, last);
        aead.decrypt_in_place_detached(Nonce::from_slice(&n), b"", &mut cur[..body], &tag)
            .map_err(|_| OffStateError::AuthFailed)?;
        w.write_all(&cur[..body])?;
        total += body as u64;
        if last {
            break;
        }
        std::mem::swap(&mut cur, &mut next);
        cur_len = next_len;
        index += 1;
    }
    w.flush()?;
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(len: usize) {
        let data: Vec<u8> = (0..len).map(|i| (i * 31 % 251) as u8).collect();
        let key = [7u8; 32];
        let mut ct = Vec::new();
        let written = encrypt_stream(&key, [1; 12], &data[..], &mut ct).unwrap();
        assert_eq!(written, ct.len() as u64);
        assert_eq!(cipher_len(len as u64), ct.len() as u64);
        let mut pt = Vec::new();
        decrypt_stream(&key, &ct[..], &mut pt).unwrap();
        assert_eq!(pt, data);
    }

    #[test]
    fn round_trips_at_chunk_boundaries() {
        for len in [0, 1, CHUNK - 1, CHUNK, CHUNK + 1, 2 * CHUNK] {
            roundtrip(len);
        }
    }

    #[test]
    fn empty_plaintext_is_nonce_plus_tag() {
        let mut ct = Vec::new();
        encrypt_stream(&[0; 32], [0; 12], &b""[..], &mut ct).unwrap();
        assert_eq!(ct.len(), NONCE_LEN + TAG_LEN);
    }

    #[test]
    fn wrong_key_and_tampering_fail() {
        let data = vec![5u8; CHUNK + 10];
        let mut ct = Vec::new();
        encrypt_stream(&[1; 32], [2; 12], &data[..], &mut ct).unwrap();
        let fails = |bytes: &[u8], key: [u8; 32]| {
            matches!(decrypt_stream(&key, bytes, io::sink()), Err(OffStateError::AuthFailed))
        };
        assert!(fails(&ct, [9; 32]));
        let mut flipped = ct.clone();
        flipped[NONCE_LEN + 3] ^= 1;
        assert!(fails(&flipped, [1; 32]));
        // Dropping the final chunk leaves a full chunk not marked last.
        assert!(fails(&ct[..NONCE_LEN + CHUNK + TAG_LEN], [1; 32]));
        assert!(fails(&ct[..ct.len() - 1], [1; 32]));
        assert!(fails(&ct[..5], [1; 32]));
    }
}
