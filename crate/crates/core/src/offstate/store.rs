// SPDX-License-Identifier: Apache-2.0

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::OffStateError;
use crate::codec;
use crate::ledger::{hash_reader, Digest, Hasher};

const PARTIAL_DIR: &str = ".partial";
const STAGED_DIR: &str = ".staged";
const META_SUFFIX: &str = ".meta";

/// Read buffer used when hashing stored entries.
pub const HASH_BUFFER: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntryKind {
    Plain,
    Cipher,
}

/// Sidecar record stored as `<name>.meta`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub length: u64,
    pub hash: Digest,
    pub kind: EntryKind,
    /// Node label of the sender, for entries that arrived by transfer.
    pub received_from: Option<String>,
    pub timestamp_ms: u64,
}

#[derive(Debug, Default, PartialEq, Eq)]
pub struct GcReport {
    pub partials: usize,
    pub staged: usize,
    pub ciphers: usize,
}

/// Per-node file store outside the ledger.
///
/// An entry is visible once its metadata sidecar exists; the data file is
/// always moved into place first, so readers never observe a half-written
/// entry.
#[derive(Debug)]
pub struct OffStateStore {
    root: PathBuf,
    seq: AtomicU64,
}

/// Data being written into the hidden partial area.
#[derive(Debug)]
pub struct PartialWriter {
    path: PathBuf,
    out: BufWriter<File>,
    hasher: Hasher,
    len: u64,
}

impl PartialWriter {
    pub fn write(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.out.write_all(bytes)?;
        self.hasher.update(bytes);
        self.len += bytes.len() as u64;
        Ok(())
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn abandon(self) {
        drop(self.out);
        let _ = fs::remove_file(&self.path);
    }
}

impl Write for PartialWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        PartialWriter::write(self, buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }
}

pub fn validate_name(name: &str) -> Result<(), OffStateError> {
    let ok = !name.is_empty()
        && name.len() <= 200
        && !name.starts_with('.')
        && !name.ends_with(META_SUFFIX)
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_'));
    if ok {
        Ok(())
    } else {
        Err(OffStateError::BadName(name.to_string()))
    }
}

impl OffStateStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, OffStateError> {
        let root = root.into();
        fs::create_dir_all(root.join(PARTIAL_DIR))?;
        fs::create_dir_all(root.join(STAGED_DIR))?;
        Ok(OffStateStore {
            root,
            seq: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn data_path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn meta_path(&self, name: &str) -> PathBuf {
        self.root.join(format!("{name}{META_SUFFIX}"))
    }

    pub fn exists(&self, name: &str) -> bool {
        validate_name(name).is_ok() && self.meta_path(name).is_file() && self.data_path(name).is_file()
    }

    pub fn meta(&self, name: &str) -> Result<EntryMeta, OffStateError> {
        if !self.exists(name) {
            return Err(OffStateError::NotFound(name.to_string()));
        }
        Ok(codec::decode(&fs::read(self.meta_path(name))?)?)
    }

    pub fn get(&self, name: &str) -> Result<Vec<u8>, OffStateError> {
        self.meta(name)?;
        Ok(fs::read(self.data_path(name))?)
    }

    pub fn open_read(&self, name: &str) -> Result<File, OffStateError> {
        self.meta(name)?;
        Ok(File::open(self.data_path(name))?)
    }

    /// Streams SHA-256 over the stored bytes.
    pub fn hash_of(&self, name: &str) -> Result<Digest, OffStateError> {
        let f = self.open_read(name)?;
        Ok(hash_reader(BufReader::new(f), HASH_BUFFER)?.0)
    }

    /// Where a private copy of an entry's bytes lives, for callers that
    /// must operate on the file directly.
    pub fn path_of(&self, name: &str) -> Result<PathBuf, OffStateError> {
        self.meta(name)?;
        Ok(self.data_path(name))
    }

    /// First name not yet taken: `name`, `name.1`, `name.2`, ...
    fn free_name(&self, name: &str) -> String {
        if !self.data_path(name).exists() && !self.meta_path(name).exists() {
            return name.to_string();
        }
        (1u64..)
            .map(|i| format!("{name}.{i}"))
            .find(|n| !self.data_path(n).exists() && !self.meta_path(n).exists())
            .expect("unbounded search")
    }

    pub fn begin_partial(&self) -> Result<PartialWriter, OffStateError> {
        let n = self.seq.fetch_add(1, Ordering::Relaxed);
        let path = self
            .root
            .join(PARTIAL_DIR)
            .join(format!("{}-{n}", std::process::id()));
        Ok(PartialWriter {
            out: BufWriter::new(File::create(&path)?),
            path,
            hasher: Hasher::new(),
            len: 0,
        })
    }

    /// Publishes a partial under `name`, or a versioned variant of it when
    /// `name` is taken and `replace` is false. Fails, removing the partial,
    /// if `expected` is given and does not match.
    pub fn finish_partial(
        &self,
        w: PartialWriter,
        name: &str,
        kind: EntryKind,
        expected: Option<Digest>,
        received_from: Option<String>,
        timestamp_ms: u64,
        replace: bool,
    ) -> Result<(String, EntryMeta), OffStateError> {
        validate_name(name)?;
        let PartialWriter { path, out, hasher, len } = w;
        let file = out.into_inner().map_err(|e| e.into_error())?;
        file.sync_all()?;
        drop(file);
        let digest = hasher.finish();
        if let Some(want) = expected {
            if want != digest {
                let _ = fs::remove_file(&path);
                return Err(OffStateError::IntegrityMismatch);
            }
        }
        let meta = EntryMeta {
            length: len,
            hash: digest,
            kind,
            received_from,
            timestamp_ms,
        };
        let final_name = if replace {
            let _ = fs::remove_file(self.meta_path(name));
            name.to_string()
        } else {
            self.free_name(name)
        };
        let meta_tmp = self
            .root
            .join(PARTIAL_DIR)
            .join(format!("{}.meta", path.file_name().unwrap().to_string_lossy()));
        fs::write(&meta_tmp, codec::encode(&meta))?;
        fs::rename(&path, self.data_path(&final_name))?;
        fs::rename(&meta_tmp, self.meta_path(&final_name))?;
        Ok((final_name, meta))
    }

    pub fn put_reader<R: Read>(
        &self,
        name: &str,
        mut r: R,
        kind: EntryKind,
        received_from: Option<String>,
        timestamp_ms: u64,
    ) -> Result<(String, EntryMeta), OffStateError> {
        validate_name(name)?;
        let mut w = self.begin_partial()?;
        let mut buf = vec![0u8; HASH_BUFFER];
        loop {
            let n = r.read(&mut buf)?;
            if n == 0 {
                break;
            }
            w.write(&buf[..n])?;
        }
        self.finish_partial(w, name, kind, None, received_from, timestamp_ms, false)
    }

    /// Stores `bytes` under `name`, versioning on collision. Returns the
    /// name actually used.
    pub fn put(&self, name: &str, bytes: &[u8], timestamp_ms: u64) -> Result<String, OffStateError> {
        Ok(self.put_reader(name, bytes, EntryKind::Plain, None, timestamp_ms)?.0)
    }

    /// Overwrites an existing entry in place.
    pub fn replace(&self, name: &str, bytes: &[u8], timestamp_ms: u64) -> Result<(), OffStateError> {
        validate_name(name)?;
        let kind = self.meta(name).map(|m| m.kind).unwrap_or(EntryKind::Plain);
        let mut w = self.begin_partial()?;
        w.write(bytes)?;
        self.finish_partial(w, name, kind, None, None, timestamp_ms, true)?;
        Ok(())
    }

    pub fn remove(&self, name: &str) -> Result<(), OffStateError> {
        self.meta(name)?;
        fs::remove_file(self.meta_path(name))?;
        fs::remove_file(self.data_path(name))?;
        Ok(())
    }

    pub fn list(&self) -> Result<Vec<(String, EntryMeta)>, OffStateError> {
        let mut out = Vec::new();
        for e in fs::read_dir(&self.root)? {
            let name = e?.file_name().to_string_lossy().into_owned();
            if let Some(base) = name.strip_suffix(META_SUFFIX) {
                if let Ok(m) = self.meta(base) {
                    out.push((base.to_string(), m));
                }
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(out)
    }

    /// An entry whose recorded hash is `digest` and whose bytes still hash
    /// to it.
    pub fn find_by_hash(&self, digest: &Digest) -> Result<Option<String>, OffStateError> {
        for (name, meta) in self.list()? {
            if meta.hash == *digest && self.hash_of(&name)? == *digest {
                return Ok(Some(name));
            }
        }
        Ok(None)
    }

    fn staged_path(&self, tag: &str) -> PathBuf {
        self.root.join(STAGED_DIR).join(tag)
    }

    /// A writer into the hidden staging area. Nothing written here is
    /// visible until [`promote_staged`](Self::promote_staged).
    pub fn begin_staged(&self, tag: &str) -> Result<(PathBuf, BufWriter<File>), OffStateError> {
        validate_name(tag)?;
        let path = self.staged_path(tag);
        Ok((path.clone(), BufWriter::new(File::create(path)?)))
    }

    pub fn has_staged(&self, tag: &str) -> bool {
        validate_name(tag).is_ok() && self.staged_path(tag).is_file()
    }

    pub fn promote_staged(&self, tag: &str, name: &str, timestamp_ms: u64) -> Result<(String, EntryMeta), OffStateError> {
        validate_name(name)?;
        let staged = self.staged_path(tag);
        if !staged.is_file() {
            return Err(OffStateError::NotFound(tag.to_string()));
        }
        let (digest, length) = hash_reader(BufReader::new(File::open(&staged)?), HASH_BUFFER)?;
        let final_name = self.free_name(name);
        let meta = EntryMeta {
            length,
            hash: digest,
            kind: EntryKind::Plain,
            received_from: None,
            timestamp_ms,
        };
        let meta_tmp = self.root.join(PARTIAL_DIR).join(format!("{tag}.meta"));
        fs::write(&meta_tmp, codec::encode(&meta))?;
        fs::rename(&staged, self.data_path(&final_name))?;
        fs::rename(&meta_tmp, self.meta_path(&final_name))?;
        Ok((final_name, meta))
    }

    pub fn discard_staged(&self, tag: &str) -> Result<(), OffStateError> {
        if self.has_staged(tag) {
            fs::remove_file(self.staged_path(tag))?;
        }
        Ok(())
    }

    /// Removes leftovers of interrupted writes, and received ciphertext
    /// entries when `ciphers` is set.
    pub fn gc(&self, ciphers: bool) -> Result<GcReport, OffStateError> {
        let mut report = GcReport::default();
        for (dir, count) in [(PARTIAL_DIR, &mut report.partials), (STAGED_DIR, &mut report.staged)] {
            for e in fs::read_dir(self.root.join(dir))? {
                let e = e?;
                if e.file_type()?.is_file() {
                    fs::remove_file(e.path())?;
                    *count += 1;
                }
            }
        }
        if ciphers {
            for (name, meta) in self.list()? {
                if meta.kind == EntryKind::Cipher && meta.received_from.is_some() {
                    self.remove(&name)?;
                    report.ciphers += 1;
                }
            }
        }
        Ok(report)
    }
}
