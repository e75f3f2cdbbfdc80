//! Wire protocol.
//!
//! Each web socket text message carries one frame: the byte length of a JSON
//! document, a colon, then the document, e.g. `17:{"type":"hello",...}`. The
//! JSON object is tagged by its `type` field.

use breathsteer::session::{HandleCommand, StateSnapshot};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Operator,
    Observer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    /// The frame could not be decoded.
    Protocol,
    /// A hello was expected first, or sent twice.
    Handshake,
    SlotTaken,
    InvalidCommand,
    ReadOnly,
    QueueFull,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Hello { role: Role },
    Snapshot(StateSnapshot),
    Command(HandleCommand),
    Error { code: ErrorCode, detail: String },
}

impl Message {
    pub fn error(code: ErrorCode, detail: impl Into<String>) -> Self {
        Message::Error {
            code,
            detail: detail.into(),
        }
    }
}

const TAGS: [&str; 4] = ["hello", "snapshot", "command", "error"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("missing length prefix")]
    MissingLength,
    #[error("invalid length prefix `{0}`")]
    BadLength(String),
    #[error("truncated frame: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("frame longer than its length prefix: expected {expected} bytes, got {got}")]
    Overlong { expected: usize, got: usize },
    #[error("unknown message type `{0}`")]
    UnknownType(String),
    #[error("malformed message: {0}")]
    Malformed(String),
}

pub fn encode(msg: &Message) -> String {
    let body = serde_json::to_string(msg).expect("messages serialize");
    format!("{}:{}", body.len(), body)
}

pub fn decode(frame: &str) -> Result<Message, ProtocolError> {
    let (len, body) = frame.split_once(':').ok_or(ProtocolError::MissingLength)?;
    if len.is_empty() || !len.bytes().all(|b| b.is_ascii_digit()) {
        return Err(ProtocolError::BadLength(len.chars().take(16).collect()));
    }
    let expected: usize = len.parse().map_err(|_| ProtocolError::BadLength(len.to_string()))?;
    let got = body.len();
    if got < expected {
        return Err(ProtocolError::Truncated { expected, got });
    }
    if got > expected {
        return Err(ProtocolError::Overlong { expected, got });
    }
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    let tag = value
        .get("type")
        .ok_or_else(|| ProtocolError::Malformed("missing `type`".into()))?
        .as_str()
        .ok_or_else(|| ProtocolError::Malformed("`type` is not a string".into()))?;
    if !TAGS.contains(&tag) {
        return Err(ProtocolError::UnknownType(tag.to_string()));
    }
    serde_json::from_value(value).map_err(|e| ProtocolError::Malformed(e.to_string()))
}
