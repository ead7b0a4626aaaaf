//! Append-only queue log.
//!
//! Frame layout, little endian:
//!
//! ```text
//! +------------+-----------+----------------------+
//! | len: u32   | crc: u32  | record: [u8; len]    |
//! +------------+-----------+----------------------+
//! ```
//!
//! `crc` is CRC-32 (IEEE) over the record bytes. A record starts with a tag:
//!
//! * `M` meta: `durable: u8`, `next_id: u64`. Always the first record.
//! * `P` publish: `id: u64`, `enqueued_at_micros: i64`, body bytes.
//! * `A` ack: `id: u64`.
//!
//! On replay a frame that runs past end of file, or a final frame whose CRC
//! does not match, is a torn append and is cut off. A bad frame followed by
//! more data means the log is corrupt.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

const HEADER_LEN: usize = 8;
const TAG_META: u8 = b'M';
const TAG_PUBLISH: u8 = b'P';
const TAG_ACK: u8 = b'A';

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Record {
    Meta { durable: bool, next_id: u64 },
    Publish { id: u64, enqueued_at_micros: i64, body: Vec<u8> },
    Ack { id: u64 },
}

impl Record {
    fn encode_into(&self, out: &mut Vec<u8>) {
        let start = out.len();
        out.extend_from_slice(&[0u8; HEADER_LEN]);
        match self {
            Record::Meta { durable, next_id } => {
                out.push(TAG_META);
                out.push(u8::from(*durable));
                out.extend_from_slice(&next_id.to_le_bytes());
            }
            Record::Publish { id, enqueued_at_micros, body } => {
                out.push(TAG_PUBLISH);
                out.extend_from_slice(&id.to_le_bytes());
                out.extend_from_slice(&enqueued_at_micros.to_le_bytes());
                out.extend_from_slice(body);
            }
            Record::Ack { id } => {
                out.push(TAG_ACK);
                out.extend_from_slice(&id.to_le_bytes());
            }
        }
        let payload = &out[start + HEADER_LEN..];
        let len = u32::try_from(payload.len()).expect("record larger than 4 GiB");
        let crc = crc32fast::hash(payload);
        out[start..start + 4].copy_from_slice(&len.to_le_bytes());
        out[start + 4..start + 8].copy_from_slice(&crc.to_le_bytes());
    }

    fn decode(bytes: &[u8]) -> Option<Record> {
        let (&tag, rest) = bytes.split_first()?;
        let u64_at = |b: &[u8], at: usize| b.get(at..at + 8).map(|s| u64::from_le_bytes(s.try_into().unwrap()));
        match tag {
            TAG_META if rest.len() == 9 => Some(Record::Meta { durable: rest[0] != 0, next_id: u64_at(rest, 1)? }),
            TAG_PUBLISH if rest.len() >= 16 => Some(Record::Publish {
                id: u64_at(rest, 0)?,
                enqueued_at_micros: u64_at(rest, 8)? as i64,
                body: rest[16..].to_vec(),
            }),
            TAG_ACK if rest.len() == 8 => Some(Record::Ack { id: u64_at(rest, 0)? }),
            _ => None,
        }
    }
}

pub(crate) fn encode(records: &[Record]) -> Vec<u8> {
    let mut buf = Vec::new();
    for r in records {
        r.encode_into(&mut buf);
    }
    buf
}

#[derive(Debug)]
pub(crate) enum ReplayError {
    Io(io::Error),
    Corrupt { offset: u64, detail: String },
}

impl From<io::Error> for ReplayError {
    fn from(e: io::Error) -> Self {
        ReplayError::Io(e)
    }
}

#[derive(Debug)]
pub(crate) struct Replay {
    pub records: Vec<Record>,
    /// Bytes of the file that hold whole, verified frames.
    pub valid_len: u64,
    pub torn_tail: bool,
}

/// Decodes every frame in `bytes`.
pub(crate) fn decode_all(bytes: &[u8]) -> Result<Replay, ReplayError> {
    let mut records = Vec::new();
    let mut pos = 0usize;
    let total = bytes.len();
    while pos < total {
        let remaining = total - pos;
        if remaining < HEADER_LEN {
            return Ok(Replay { records, valid_len: pos as u64, torn_tail: true });
        }
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap());
        if len > remaining - HEADER_LEN {
            return Ok(Replay { records, valid_len: pos as u64, torn_tail: true });
        }
        let end = pos + HEADER_LEN + len;
        let payload = &bytes[pos + HEADER_LEN..end];
        if crc32fast::hash(payload) != crc {
            if end == total {
                return Ok(Replay { records, valid_len: pos as u64, torn_tail: true });
            }
            return Err(ReplayError::Corrupt { offset: pos as u64, detail: "checksum mismatch".into() });
        }
        match Record::decode(payload) {
            Some(r) => records.push(r),
            None => return Err(ReplayError::Corrupt { offset: pos as u64, detail: "undecodable record".into() }),
        }
        pos = end;
    }
    Ok(Replay { records, valid_len: total as u64, torn_tail: false })
}

/// Reads a log, cutting a torn tail off the file.
pub(crate) fn replay_file(path: &Path) -> Result<Replay, ReplayError> {
    let bytes = fs::read(path)?;
    let replay = decode_all(&bytes)?;
    if replay.torn_tail {
        log::warn!("{}: truncating torn tail ({} of {} bytes kept)", path.display(), replay.valid_len, bytes.len());
        let f = OpenOptions::new().write(true).open(path)?;
        f.set_len(replay.valid_len)?;
        f.sync_all()?;
    }
    Ok(replay)
}

/// Open handle for appending to one queue's log.
#[derive(Debug)]
pub(crate) struct LogWriter {
    path: PathBuf,
    file: File,
    len: u64,
}

impl LogWriter {
    /// Creates a fresh log holding only `meta`.
    pub fn create(path: &Path, meta: Record) -> io::Result<Self> {
        write_atomically(path, &encode(&[meta]))?;
        Self::open(path)
    }

    pub fn open(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().append(true).open(path)?;
        let len = file.metadata()?.len();
        Ok(Self { path: path.to_path_buf(), file, len })
    }

    /// Appends the records and syncs them to disk before returning.
    pub fn append(&mut self, records: &[Record]) -> io::Result<()> {
        let buf = encode(records);
        let result = self.file.write_all(&buf).and_then(|_| self.file.sync_data());
        match result {
            Ok(()) => {
                self.len += buf.len() as u64;
                Ok(())
            }
            Err(e) => {
                // Drop whatever part of the frame made it out so the next
                // append does not land behind a torn record.
                let _ = self.file.set_len(self.len);
                Err(e)
            }
        }
    }

    /// Replaces the log with exactly `records`.
    pub fn rewrite(&mut self, records: &[Record]) -> io::Result<()> {
        write_atomically(&self.path, &encode(records))?;
        *self = Self::open(&self.path)?;
        Ok(())
    }
}

/// Writes `bytes` to a sibling temp file, syncs it, and renames it over `path`.
pub(crate) fn write_atomically(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    sync_parent(path)
}

pub(crate) fn sync_parent(path: &Path) -> io::Result<()> {
    if let Some(dir) = path.parent() {
        File::open(dir)?.sync_all()?;
    }
    Ok(())
}
