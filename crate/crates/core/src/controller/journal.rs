//! Append-only controller journal.
//!
//! File layout: the 8-byte magic `ISJRNL01`, then records of a 4-byte
//! big-endian length followed by that many bytes of JSON. Each record
//! carries `"v": 1`. A torn final record (crash mid-append) is dropped on
//! replay; anything else malformed is an error.

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"ISJRNL01";
pub const RECORD_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum JournalOp {
    Upload {
        tenant_id: String,
        model_id: String,
        /// Manifest in its text document form.
        manifest: String,
    },
    Delete {
        model_id: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Record {
    v: u32,
    #[serde(flatten)]
    op: JournalOp,
}

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("journal i/o: {0}")]
    Io(#[from] io::Error),
    #[error("{path}: not a controller journal")]
    BadMagic { path: PathBuf },
    #[error("record {index}: unsupported version {version}")]
    UnsupportedVersion { index: usize, version: u32 },
    #[error("record {index}: {reason}")]
    Corrupt { index: usize, reason: String },
}

#[derive(Debug)]
pub struct Journal {
    file: File,
}

impl Journal {
    /// Opens (creating if needed) the journal at `path` and returns it with
    /// every intact record in append order.
    pub fn open(path: &Path) -> Result<(Self, Vec<JournalOp>), JournalError> {
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        if bytes.is_empty() {
            file.write_all(MAGIC)?;
            file.sync_data()?;
            return Ok((Self { file }, Vec::new()));
        }
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(JournalError::BadMagic { path: path.into() });
        }
        let (ops, intact) = decode_records(&bytes[MAGIC.len()..])?;
        let intact = (MAGIC.len() + intact) as u64;
        if intact < bytes.len() as u64 {
            file.set_len(intact)?;
        }
        Ok((Self { file }, ops))
    }

    pub fn append(&mut self, op: &JournalOp) -> Result<(), JournalError> {
        let body = serde_json::to_vec(&Record {
            v: RECORD_VERSION,
            op: op.clone(),
        })
        .expect("journal records serialize");
        let mut frame = Vec::with_capacity(4 + body.len());
        frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
        frame.extend_from_slice(&body);
        self.file.write_all(&frame)?;
        self.file.sync_data()?;
        Ok(())
    }
}

/// Decodes records, returning them and the byte length of the intact prefix.
fn decode_records(mut rest: &[u8]) -> Result<(Vec<JournalOp>, usize), JournalError> {
    let total = rest.len();
    let mut ops = Vec::new();
    while rest.len() >= 4 {
        let len = u32::from_be_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
        if rest.len() - 4 < len {
            break;
        }
        let index = ops.len();
        let value: serde_json::Value = serde_json::from_slice(&rest[4..4 + len])
            .map_err(|e| JournalError::Corrupt { index, reason: e.to_string() })?;
        let version = value.get("v").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != RECORD_VERSION {
            return Err(JournalError::UnsupportedVersion { index, version });
        }
        let record: Record = serde_json::from_value(value)
            .map_err(|e| JournalError::Corrupt { index, reason: e.to_string() })?;
        ops.push(record.op);
        rest = &rest[4 + len..];
    }
    Ok((ops, total - rest.len()))
}
