//! Wire protocol, networked controller and worker processes, and the pieces
//! behind the `infershare` command line.

pub mod client;
pub mod controller;
pub mod frame;
pub mod message;
pub mod node;
pub mod wire;

pub use frame::{decode_frame, encode_frame, Frame, FrameError, Kind, MAX_FRAME};
pub use message::{ErrorCode, Message, SCHEMA_VERSION};
