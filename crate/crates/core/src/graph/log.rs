//! Append-only commit log.
//!
//! Layout: the 4-byte magic `HTGL`, a little-endian `u32` format version,
//! then one record per commit: a little-endian `u32` byte length followed by
//! that many bytes of JSON (`{"timepoint":…,"changes":[…]}`).

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Change, GraphError, Timepoint};

pub const LOG_MAGIC: &[u8; 4] = b"HTGL";
pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub timepoint: Timepoint,
    pub changes: Vec<Change>,
}

pub struct CommitLogWriter {
    out: BufWriter<File>,
}

impl CommitLogWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self, GraphError> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(LOG_MAGIC)?;
        out.write_all(&LOG_VERSION.to_le_bytes())?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn append(&mut self, record: &CommitRecord) -> Result<(), GraphError> {
        let body = serde_json::to_vec(record).map_err(|e| GraphError::Schema(e.to_string()))?;
        let len = u32::try_from(body.len()).map_err(|_| GraphError::Schema("commit record too large".into()))?;
        self.out.write_all(&len.to_le_bytes())?;
        self.out.write_all(&body)?;
        self.out.flush()?;
        Ok(())
    }
}

/// Reads every record of the log at `path`.
pub fn read_commit_log(path: impl AsRef<Path>) -> Result<Vec<CommitRecord>, GraphError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    parse_commit_log(&bytes)
}

pub(crate) fn parse_commit_log(bytes: &[u8]) -> Result<Vec<CommitRecord>, GraphError> {
    let corrupt = |offset: usize, message: &str| GraphError::CorruptLog {
        offset: offset as u64,
        message: message.to_string(),
    };
    if bytes.len() < 8 || &bytes[..4] != LOG_MAGIC {
        return Err(corrupt(0, "missing log header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != LOG_VERSION {
        return Err(corrupt(4, &format!("unsupported log version {version}")));
    }
    let mut records = Vec::new();
    let mut pos = 8;
    while pos < bytes.len() {
        let Some(len_bytes) = bytes.get(pos..pos + 4) else {
            return Err(corrupt(pos, "truncated record length"));
        };
        let len = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
        let Some(body) = bytes.get(pos + 4..pos + 4 + len) else {
            return Err(corrupt(pos, "truncated record body"));
        };
        let record: CommitRecord =
            serde_json::from_slice(body).map_err(|e| corrupt(pos, &e.to_string()))?;
        records.push(record);
        pos += 4 + len;
    }
    Ok(records)
}
