//! Framed message I/O over async byte streams.

use thiserror::Error;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

use crate::frame::{frame_len, FrameError, Kind, HEADER_LEN};
use crate::message::Message;

#[derive(Debug, Error)]
pub enum WireError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

impl WireError {
    /// Whether the stream is still aligned on a frame boundary.
    pub fn recoverable(&self) -> bool {
        matches!(
            self,
            WireError::Frame(
                FrameError::UnknownKind(_) | FrameError::MalformedPayload(_) | FrameError::UnsupportedVersion(_)
            )
        )
    }
}

/// Reads one message. `Ok(None)` on a clean end of stream.
pub async fn read_message<R: AsyncRead + Unpin>(r: &mut R) -> Result<Option<Message>, WireError> {
    let mut header = [0u8; HEADER_LEN];
    match r.read_exact(&mut header).await {
        Ok(_) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = frame_len(header)?;
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).await?;
    let kind = Kind::from_byte(body[0]).ok_or(FrameError::UnknownKind(body[0]))?;
    Ok(Some(Message::decode(kind, &body[1..])?))
}

pub async fn write_message<W: AsyncWrite + Unpin>(w: &mut W, msg: &Message) -> Result<(), WireError> {
    let bytes = msg.to_frame()?;
    w.write_all(&bytes).await?;
    w.flush().await?;
    Ok(())
}
