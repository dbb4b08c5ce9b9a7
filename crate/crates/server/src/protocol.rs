//! JSON frames exchanged on `/session`.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::session::{ClientCommand, Command, Rejection, SessionInfo, Snapshot};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameType {
    Hello,
    Snapshot,
    Command,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    #[serde(rename = "type")]
    pub kind: FrameType,
    pub seq: u64,
    #[serde(default)]
    pub payload: Value,
}

impl Frame {
    pub fn hello(client: u64, info: &SessionInfo) -> Self {
        let mut payload = serde_json::to_value(info).expect("info serializes");
        payload["client"] = json!(client);
        Self { kind: FrameType::Hello, seq: 0, payload }
    }

    pub fn snapshot(s: &Snapshot) -> Self {
        Self { kind: FrameType::Snapshot, seq: s.seq, payload: serde_json::to_value(s).expect("snapshot serializes") }
    }

    /// Echo of an accepted command under the sender's sequence number.
    pub fn accepted(seq: u64, cmd: &ClientCommand) -> Self {
        Self { kind: FrameType::Command, seq, payload: serde_json::to_value(cmd).expect("command serializes") }
    }

    pub fn error(seq: u64, code: &str, message: impl Into<String>) -> Self {
        Self { kind: FrameType::Error, seq, payload: json!({ "code": code, "message": message.into() }) }
    }

    pub fn rejected(seq: u64, r: &Rejection) -> Self {
        Self::error(seq, r.code(), r.to_string())
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("frame serializes")
    }
}

/// Parses a client frame into its sequence number and command.
pub fn parse_command(text: &str) -> Result<(u64, Command), Frame> {
    let frame: Frame = serde_json::from_str(text).map_err(|e| Frame::error(0, "malformed_frame", e.to_string()))?;
    if frame.kind != FrameType::Command {
        return Err(Frame::error(frame.seq, "unexpected_frame", format!("clients send command frames, got {:?}", frame.kind)));
    }
    let cmd = serde_json::from_value(frame.payload).map_err(|e| Frame::error(frame.seq, "malformed_command", e.to_string()))?;
    Ok((frame.seq, cmd))
}
