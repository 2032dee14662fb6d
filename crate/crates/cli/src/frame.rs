//! Length-prefixed frames.
//!
//! ```text
//! +----------------+------+---------------------+
//! | len: u32 (BE)  | kind | payload (len-1 B)   |
//! +----------------+------+---------------------+
//! ```
//!
//! `len` counts the kind byte plus the payload. Payloads are JSON documents
//! carrying a schema version field `"v"`.

use thiserror::Error;

pub const HEADER_LEN: usize = 4;
/// Largest accepted value of the length field.
pub const MAX_FRAME: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Kind {
    Ping = 0x01,
    Pong = 0x02,
    UploadModel = 0x10,
    Uploaded = 0x11,
    DeleteModel = 0x12,
    Deleted = 0x13,
    Infer = 0x20,
    InferResult = 0x21,
    StatsRequest = 0x30,
    Stats = 0x31,
    Register = 0x40,
    Heartbeat = 0x41,
    LoadModel = 0x42,
    LoadAck = 0x43,
    EvictModel = 0x44,
    Error = 0x7f,
}

impl Kind {
    pub const ALL: [Kind; 16] = [
        Kind::Ping,
        Kind::Pong,
        Kind::UploadModel,
        Kind::Uploaded,
        Kind::DeleteModel,
        Kind::Deleted,
        Kind::Infer,
        Kind::InferResult,
        Kind::StatsRequest,
        Kind::Stats,
        Kind::Register,
        Kind::Heartbeat,
        Kind::LoadModel,
        Kind::LoadAck,
        Kind::EvictModel,
        Kind::Error,
    ];

    pub fn from_byte(b: u8) -> Option<Kind> {
        Self::ALL.into_iter().find(|k| *k as u8 == b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("need {0} more byte(s)")]
    NeedMoreBytes(usize),
    #[error("frame of {0} bytes exceeds the {MAX_FRAME} byte limit")]
    FrameTooLarge(usize),
    #[error("unknown message kind 0x{0:02x}")]
    UnknownKind(u8),
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error("unsupported schema version {0}")]
    UnsupportedVersion(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: Kind,
    pub payload: Vec<u8>,
}

pub fn encode_frame(kind: Kind, payload: &[u8]) -> Result<Vec<u8>, FrameError> {
    let len = payload.len() + 1;
    if len > MAX_FRAME {
        return Err(FrameError::FrameTooLarge(len));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + len);
    out.extend_from_slice(&(len as u32).to_be_bytes());
    out.push(kind as u8);
    out.extend_from_slice(payload);
    Ok(out)
}

/// Reads the length field, validating it before anything is allocated.
pub fn frame_len(header: [u8; HEADER_LEN]) -> Result<usize, FrameError> {
    let len = u32::from_be_bytes(header) as usize;
    if len == 0 {
        return Err(FrameError::MalformedPayload("zero-length frame has no kind byte".into()));
    }
    if len > MAX_FRAME {
        return Err(FrameError::FrameTooLarge(len));
    }
    Ok(len)
}

/// Decodes the first frame of `buf`, returning it with the bytes consumed.
pub fn decode_frame(buf: &[u8]) -> Result<(Frame, usize), FrameError> {
    if buf.len() < HEADER_LEN {
        return Err(FrameError::NeedMoreBytes(HEADER_LEN - buf.len()));
    }
    let len = frame_len(buf[..HEADER_LEN].try_into().expect("four bytes"))?;
    let total = HEADER_LEN + len;
    if buf.len() < total {
        return Err(FrameError::NeedMoreBytes(total - buf.len()));
    }
    let byte = buf[HEADER_LEN];
    let kind = Kind::from_byte(byte).ok_or(FrameError::UnknownKind(byte))?;
    Ok((
        Frame {
            kind,
            payload: buf[HEADER_LEN + 1..total].to_vec(),
        },
        total,
    ))
}
