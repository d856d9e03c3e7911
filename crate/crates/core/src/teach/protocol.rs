//! Wire protocol: one JSON object per WebSocket text frame.
//!
//! Every message carries `v` (protocol version), `seq` (strictly increasing
//! per direction, starting at 1) and `type`; the remaining fields are the
//! payload of that type.
//!
//! ```json
//! {"v":1,"seq":3,"type":"gaze_update","x":0.1,"y":0.0,"z":0.03}
//! {"v":1,"seq":7,"type":"bbox3d","min":[0.05,-0.04,0.0],"max":[0.15,0.04,0.06]}
//! ```

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::state::SessionState;

pub const PROTOCOL_VERSION: u32 = 1;

pub const CLIENT_TYPES: [&str; 5] = ["gaze_update", "select_object", "provide_class", "cancel", "request_snapshot"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    GazeUpdate { x: f64, y: f64, z: f64 },
    SelectObject {},
    ProvideClass { name: String },
    Cancel {},
    RequestSnapshot {},
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Malformed,
    UnknownType,
    UnsupportedVersion,
    BadSequence,
    InvalidState,
    EmptyName,
    InvalidName,
    OutOfReach,
    Busy,
    Internal,
}

impl ErrorCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorCode::Malformed => "malformed",
            ErrorCode::UnknownType => "unknown_type",
            ErrorCode::UnsupportedVersion => "unsupported_version",
            ErrorCode::BadSequence => "bad_sequence",
            ErrorCode::InvalidState => "invalid_state",
            ErrorCode::EmptyName => "empty_name",
            ErrorCode::InvalidName => "invalid_name",
            ErrorCode::OutOfReach => "out_of_reach",
            ErrorCode::Busy => "busy",
            ErrorCode::Internal => "internal",
        }
    }
}

/// Scene view for the client: color image, depth and the camera that took them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Snapshot {
    pub width: u32,
    pub height: u32,
    pub fx_px: f64,
    pub fy_px: f64,
    pub cx_px: f64,
    pub cy_px: f64,
    /// Camera to world.
    pub translation_m: [f64; 3],
    pub rotation_wxyz: [f64; 4],
    pub rgb_png_base64: String,
    /// Little-endian `u16` millimeters, row-major, `0` = no return.
    pub depth_mm_base64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ServerMessage {
    StateChanged {
        state: SessionState,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
    },
    Bbox3d {
        min: [f64; 3],
        max: [f64; 3],
    },
    NoObject {},
    RecordProgress {
        fraction: f64,
    },
    RecordDone {
        frame_count: usize,
        skipped: usize,
        class: String,
        entity: u32,
    },
    Error {
        code: ErrorCode,
        message: String,
    },
    Snapshot(Box<Snapshot>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope<T> {
    pub v: u32,
    pub seq: u64,
    pub body: T,
}

fn encode<T: Serialize>(v: u32, seq: u64, body: &T) -> String {
    let mut obj = match serde_json::to_value(body).expect("protocol message serializes") {
        Value::Object(m) => m,
        _ => unreachable!("messages are objects"),
    };
    let mut out = Map::new();
    out.insert("v".into(), Value::from(v));
    out.insert("seq".into(), Value::from(seq));
    out.insert("type".into(), obj.shift_remove("type").expect("tagged"));
    out.extend(obj);
    Value::Object(out).to_string()
}

impl<T: Serialize> Envelope<T> {
    pub fn to_json(&self) -> String {
        encode(self.v, self.seq, &self.body)
    }
}

/// Why an incoming frame was rejected before reaching the state machine.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeError {
    pub code: ErrorCode,
    pub message: String,
    /// Sequence number, when it could be read.
    pub seq: Option<u64>,
}

fn split_envelope(text: &str) -> Result<(u32, u64, String, Map<String, Value>), DecodeError> {
    let err = |code, message: String, seq| DecodeError { code, message, seq };
    let value: Value = serde_json::from_str(text).map_err(|e| err(ErrorCode::Malformed, format!("invalid JSON: {e}"), None))?;
    let Value::Object(mut map) = value else {
        return Err(err(ErrorCode::Malformed, "message must be a JSON object".into(), None));
    };
    let seq = map.remove("seq");
    let seq = seq.as_ref().and_then(Value::as_u64).ok_or_else(|| err(ErrorCode::Malformed, "seq must be a non-negative integer".into(), None))?;
    let v = map.remove("v");
    let v = v
        .as_ref()
        .and_then(Value::as_u64)
        .and_then(|v| u32::try_from(v).ok())
        .ok_or_else(|| err(ErrorCode::Malformed, "v must be a non-negative integer".into(), Some(seq)))?;
    let ty = match map.get("type") {
        Some(Value::String(s)) => s.clone(),
        _ => return Err(err(ErrorCode::Malformed, "type must be a string".into(), Some(seq))),
    };
    Ok((v, seq, ty, map))
}

pub fn decode_client(text: &str) -> Result<Envelope<ClientMessage>, DecodeError> {
    let (v, seq, ty, map) = split_envelope(text)?;
    if v != PROTOCOL_VERSION {
        return Err(DecodeError {
            code: ErrorCode::UnsupportedVersion,
            message: format!("protocol version {v} is not supported (expected {PROTOCOL_VERSION})"),
            seq: Some(seq),
        });
    }
    if !CLIENT_TYPES.contains(&ty.as_str()) {
        return Err(DecodeError { code: ErrorCode::UnknownType, message: format!("unknown message type {ty:?}"), seq: Some(seq) });
    }
    let body: ClientMessage = serde_json::from_value(Value::Object(map)).map_err(|e| DecodeError {
        code: ErrorCode::Malformed,
        message: format!("bad {ty} payload: {e}"),
        seq: Some(seq),
    })?;
    if let ClientMessage::GazeUpdate { x, y, z } = body {
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(DecodeError { code: ErrorCode::Malformed, message: "gaze coordinates must be finite".into(), seq: Some(seq) });
        }
    }
    Ok(Envelope { v, seq, body })
}

/// Parses a service message; used by clients and tests.
pub fn decode_server(text: &str) -> Result<Envelope<ServerMessage>, DecodeError> {
    let (v, seq, _, map) = split_envelope(text)?;
    let body = serde_json::from_value(Value::Object(map)).map_err(|e| DecodeError { code: ErrorCode::Malformed, message: e.to_string(), seq: Some(seq) })?;
    Ok(Envelope { v, seq, body })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn client_roundtrip() {
        let msgs = [
            ClientMessage::GazeUpdate { x: 0.1, y: -0.2, z: 0.03 },
            ClientMessage::SelectObject {},
            ClientMessage::ProvideClass { name: "stapler".into() },
            ClientMessage::Cancel {},
            ClientMessage::RequestSnapshot {},
        ];
        for (i, m) in msgs.into_iter().enumerate() {
            let env = Envelope { v: PROTOCOL_VERSION, seq: i as u64 + 1, body: m };
            assert_eq!(decode_client(&env.to_json()).unwrap(), env);
        }
    }

    #[test]
    fn wire_shape() {
        let env = Envelope { v: 1, seq: 2, body: ServerMessage::StateChanged { state: SessionState::GazeTracking, reason: None } };
        assert_eq!(env.to_json(), r#"{"v":1,"seq":2,"type":"state_changed","state":"gaze_tracking"}"#);
        assert_eq!(decode_server(&env.to_json()).unwrap(), env);
        let e = Envelope { v: 1, seq: 3, body: ServerMessage::Error { code: ErrorCode::UnknownType, message: "x".into() } };
        assert_eq!(e.to_json(), r#"{"v":1,"seq":3,"type":"error","code":"unknown_type","message":"x"}"#);
    }

    #[test]
    fn rejections() {
        let code = |s: &str| decode_client(s).unwrap_err().code;
        assert_eq!(code("nope"), ErrorCode::Malformed);
        assert_eq!(code("[1]"), ErrorCode::Malformed);
        assert_eq!(code(r#"{"v":1,"type":"cancel"}"#), ErrorCode::Malformed);
        assert_eq!(code(r#"{"v":2,"seq":1,"type":"cancel"}"#), ErrorCode::UnsupportedVersion);
        assert_eq!(code(r#"{"v":1,"seq":1,"type":"dance"}"#), ErrorCode::UnknownType);
        assert_eq!(code(r#"{"v":1,"seq":1,"type":"gaze_update","x":1}"#), ErrorCode::Malformed);
        assert_eq!(code(r#"{"v":1,"seq":1,"type":"cancel","extra":true}"#), ErrorCode::Malformed);
        assert_eq!(code(r#"{"v":1,"seq":1,"type":"provide_class","name":5}"#), ErrorCode::Malformed);
    }
}
