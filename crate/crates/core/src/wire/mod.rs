//! Message envelope, length-prefixed canonical JSON framing, and the
//! simulated transport.
//!
//! A frame on the wire is a 4-byte big-endian payload length followed by the
//! payload: a UTF-8 JSON object with the keys `body`, `from`, `rid`, `to`,
//! `type` and `v`. Keys are emitted in lexicographic order at every nesting
//! level and no insignificant whitespace is written, so equal envelopes
//! always encode to equal bytes.

mod sim;

pub use sim::{Delivery, SimNet, SimNetConfig};

use alloc::borrow::ToOwned;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Protocol version carried in every envelope.
pub const VERSION: u8 = 1;

/// Bytes in the length prefix.
pub const HEADER_LEN: usize = 4;

/// Network address of a database instance or client.
///
/// Simulated nodes use short names such as `n3`; the socket transport uses
/// `host:port`.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Address(String);

impl Address {
    /// Panics on an empty string; use `TryFrom` for untrusted input.
    pub fn new(value: impl Into<String>) -> Self {
        let value = value.into();
        assert!(!value.is_empty(), "address must be non-empty");
        Address(value)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Address {
    type Error = &'static str;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        if value.is_empty() {
            Err("address must be non-empty")
        } else {
            Ok(Address(value))
        }
    }
}

impl From<Address> for String {
    fn from(addr: Address) -> String {
        addr.0
    }
}

impl From<&str> for Address {
    fn from(s: &str) -> Self {
        Address::new(s)
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// A typed message exchanged between instances.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub version: u8,
    pub msg_type: String,
    pub from: Address,
    pub to: Address,
    /// Request id, strictly increasing per sender.
    pub rid: u64,
    pub body: Map<String, Value>,
}

impl Envelope {
    pub fn new(msg_type: &str, from: Address, to: Address, rid: u64, body: Map<String, Value>) -> Self {
        Envelope { version: VERSION, msg_type: msg_type.to_owned(), from, to, rid, body }
    }

    /// Deserializes the body into a typed message.
    pub fn decode_body<T: DeserializeOwned>(&self) -> Result<T, FrameError> {
        serde_json::from_value(Value::Object(self.body.clone()))
            .map_err(|e| FrameError::Protocol(alloc::format!("{} body: {e}", self.msg_type)))
    }

    /// Request id this envelope answers, if it is a reply.
    pub fn reply_to(&self) -> Option<u64> {
        self.body.get("re").and_then(Value::as_u64)
    }

    fn to_value(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("body".into(), Value::Object(self.body.clone()));
        obj.insert("from".into(), Value::String(self.from.0.clone()));
        obj.insert("rid".into(), Value::from(self.rid));
        obj.insert("to".into(), Value::String(self.to.0.clone()));
        obj.insert("type".into(), Value::String(self.msg_type.clone()));
        obj.insert("v".into(), Value::from(self.version));
        Value::Object(obj)
    }
}

/// Serializes any body type into a JSON object map.
pub fn body_of<T: Serialize>(msg: &T) -> Result<Map<String, Value>, FrameError> {
    match serde_json::to_value(msg) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(Value::Null) => Ok(Map::new()),
        Ok(_) => Err(FrameError::Encode("body must be a JSON object".into())),
        Err(e) => Err(FrameError::Encode(alloc::format!("{e}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FrameError {
    #[error("frame incomplete: need {needed} more bytes")]
    NeedMoreBytes { needed: usize },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u64),
    #[error("encoding error: {0}")]
    Encode(String),
}

/// Canonical JSON text of a value: sorted keys, compact separators.
pub fn canonical_json(value: &Value) -> String {
    // serde_json's map is ordered by key unless `preserve_order` is enabled,
    // which this crate never turns on.
    serde_json::to_string(value).unwrap_or_default()
}

/// Encodes an envelope into a length-prefixed frame.
pub fn encode_frame(env: &Envelope) -> Result<Vec<u8>, FrameError> {
    if env.version != VERSION {
        return Err(FrameError::Encode(alloc::format!("version must be {VERSION}")));
    }
    let payload = serde_json::to_vec(&env.to_value()).map_err(|e| FrameError::Encode(alloc::format!("{e}")))?;
    let len = u32::try_from(payload.len()).map_err(|_| FrameError::Encode("payload exceeds u32 length".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Decodes one frame from the front of `bytes`, returning the envelope and
/// the number of bytes consumed.
pub fn decode_frame(bytes: &[u8]) -> Result<(Envelope, usize), FrameError> {
    if bytes.len() < HEADER_LEN {
        return Err(FrameError::NeedMoreBytes { needed: HEADER_LEN - bytes.len() });
    }
    let len = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    let total = HEADER_LEN + len;
    if bytes.len() < total {
        return Err(FrameError::NeedMoreBytes { needed: total - bytes.len() });
    }
    let payload = &bytes[HEADER_LEN..total];
    let text = core::str::from_utf8(payload).map_err(|e| FrameError::Protocol(alloc::format!("invalid utf-8: {e}")))?;
    let value: Value = serde_json::from_str(text).map_err(|e| FrameError::Protocol(alloc::format!("malformed json: {e}")))?;
    let Value::Object(mut obj) = value else {
        return Err(FrameError::Protocol("frame payload is not an object".into()));
    };
    let version = obj
        .get("v")
        .and_then(Value::as_u64)
        .ok_or_else(|| FrameError::Protocol("missing or invalid field v".into()))?;
    if version != u64::from(VERSION) {
        return Err(FrameError::UnsupportedVersion(version));
    }
    let mut take_str = |key: &str| -> Result<String, FrameError> {
        match obj.remove(key) {
            Some(Value::String(s)) => Ok(s),
            _ => Err(FrameError::Protocol(alloc::format!("missing or invalid field {key}"))),
        }
    };
    let msg_type = take_str("type")?;
    let from = take_str("from")?;
    let to = take_str("to")?;
    if from.is_empty() || to.is_empty() {
        return Err(FrameError::Protocol("empty address".into()));
    }
    let rid = obj
        .get("rid")
        .and_then(Value::as_u64)
        .ok_or_else(|| FrameError::Protocol("missing or invalid field rid".into()))?;
    let body = match obj.remove("body") {
        Some(Value::Object(map)) => map,
        _ => return Err(FrameError::Protocol("missing or invalid field body".into())),
    };
    let env = Envelope { version: VERSION, msg_type, from: Address(from), to: Address(to), rid, body };
    Ok((env, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use serde_json::json;

    fn env(body: Value) -> Envelope {
        let Value::Object(body) = body else { panic!() };
        Envelope::new("PING", "a".into(), "b".into(), 1, body)
    }

    #[test]
    fn ping_round_trips() {
        let e = env(json!({}));
        let frame = encode_frame(&e).unwrap();
        let (back, used) = decode_frame(&frame).unwrap();
        assert_eq!(back, e);
        assert_eq!(used, frame.len());
    }

    #[test]
    fn encoding_is_byte_stable() {
        let e = env(json!({"z": 1, "a": {"y": [1, 2], "b": "x"}}));
        assert_eq!(encode_frame(&e).unwrap(), encode_frame(&e.clone()).unwrap());
    }

    #[test]
    fn payload_is_canonical_text() {
        // Hand-written canonical form: keys sorted, no whitespace.
        let expected = br#"{"body":{"k":1},"from":"a","rid":1,"to":"b","type":"PING","v":1}"#;
        let frame = encode_frame(&env(json!({"k": 1}))).unwrap();
        assert_eq!(&frame[..4], &(expected.len() as u32).to_be_bytes());
        assert_eq!(&frame[4..], &expected[..]);
        assert_eq!(expected.len(), 64);
    }

    #[test]
    fn short_prefix_needs_more_bytes() {
        let frame = encode_frame(&env(json!({}))).unwrap();
        assert!(matches!(decode_frame(&frame[..3]), Err(FrameError::NeedMoreBytes { .. })));
        assert!(matches!(decode_frame(&frame[..frame.len() - 1]), Err(FrameError::NeedMoreBytes { needed: 1 })));
    }

    #[test]
    fn version_two_is_rejected() {
        let payload = br#"{"body":{},"from":"a","rid":1,"to":"b","type":"PING","v":2}"#;
        let mut frame = (payload.len() as u32).to_be_bytes().to_vec();
        frame.extend_from_slice(payload);
        assert_eq!(decode_frame(&frame), Err(FrameError::UnsupportedVersion(2)));
    }

    #[test]
    fn garbage_is_a_protocol_error() {
        let mut frame = vec![0, 0, 0, 3];
        frame.extend_from_slice(&[0xff, 0xfe, 0x00]);
        assert!(matches!(decode_frame(&frame), Err(FrameError::Protocol(_))));
        let mut frame = vec![0, 0, 0, 2];
        frame.extend_from_slice(b"[]");
        assert!(matches!(decode_frame(&frame), Err(FrameError::Protocol(_))));
    }

    #[test]
    fn trailing_bytes_are_not_consumed() {
        let mut frame = encode_frame(&env(json!({"a": "b"}))).unwrap();
        let n = frame.len();
        frame.extend_from_slice(&[9, 9]);
        assert_eq!(decode_frame(&frame).unwrap().1, n);
    }

    #[test]
    fn non_object_body_fails_to_encode() {
        assert!(matches!(body_of(&vec![1, 2]), Err(FrameError::Encode(_))));
    }
}
