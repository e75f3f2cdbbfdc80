//! Streams a live session to browser consoles over web sockets and feeds
//! their handle commands back into it.

pub mod protocol;
mod server;

pub use protocol::{decode, encode, ErrorCode, Message, ProtocolError, Role};
pub use server::{serve, BridgeError, BridgeHandle, ServeConfig, DEFAULT_PORT};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/bridge.md")]
mod book {}
