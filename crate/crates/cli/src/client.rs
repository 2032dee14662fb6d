//! Request/response client over one connection.

use tokio::net::TcpStream;

use crate::message::Message;
use crate::wire::{read_message, write_message, WireError};

pub struct Client {
    stream: TcpStream,
}

impl Client {
    pub async fn connect(addr: &str) -> Result<Self, WireError> {
        let stream = TcpStream::connect(addr).await?;
        let _ = stream.set_nodelay(true);
        Ok(Self { stream })
    }

    pub async fn send(&mut self, msg: &Message) -> Result<(), WireError> {
        write_message(&mut self.stream, msg).await
    }

    pub async fn recv(&mut self) -> Result<Message, WireError> {
        read_message(&mut self.stream).await?.ok_or_else(|| {
            WireError::Io(std::io::Error::new(
                std::io::ErrorKind::UnexpectedEof,
                "peer closed the connection",
            ))
        })
    }

    /// Sends `msg` and waits for the reply.
    pub async fn request(&mut self, msg: &Message) -> Result<Message, WireError> {
        self.send(msg).await?;
        self.recv().await
    }
}

/// One-shot request on a fresh connection.
pub async fn request_at(addr: &str, msg: &Message) -> Result<Message, WireError> {
    Client::connect(addr).await?.request(msg).await
}
