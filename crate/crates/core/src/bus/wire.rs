//! Newline-delimited JSON framing.
//!
//! Every envelope is a single UTF-8 JSON object
//! `{"topic":…,"seq":…,"ts":…,"payload":{…}}` followed by `\n`. String
//! contents are JSON-escaped, so a line never contains a raw newline.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{BusError, Envelope, Payload, Topic};

#[derive(Serialize)]
struct WireOut<'a> {
    topic: &'a str,
    seq: u64,
    ts: i64,
    payload: &'a Payload,
}

#[derive(Deserialize)]
struct WireIn {
    topic: String,
    seq: u64,
    ts: i64,
    payload: Value,
}

/// Serialises an envelope into one newline-terminated line.
pub fn encode(envelope: &Envelope) -> Result<Vec<u8>, BusError> {
    envelope.payload.validate_for(&envelope.topic)?;
    let mut line = serde_json::to_vec(&WireOut {
        topic: envelope.topic.as_str(),
        seq: envelope.seq,
        ts: envelope.ts,
        payload: &envelope.payload,
    })
    .map_err(|e| BusError::SchemaViolation(e.to_string()))?;
    line.push(b'\n');
    Ok(line)
}

/// Parses one line (trailing `\n` or `\r\n` optional) into an envelope.
pub fn decode(line: &[u8]) -> Result<Envelope, BusError> {
    let body = line.strip_suffix(b"\n").unwrap_or(line);
    let body = body.strip_suffix(b"\r").unwrap_or(body);
    if let Some(pos) = body.iter().position(|&b| b == b'\n') {
        return Err(BusError::Parse {
            offset: pos,
            message: "embedded newline".into(),
        });
    }
    let value: Value = serde_json::from_slice(body).map_err(|e| BusError::Parse {
        offset: e.column().saturating_sub(1),
        message: e.to_string(),
    })?;
    let raw: WireIn = serde_json::from_value(value)
        .map_err(|e| BusError::SchemaViolation(format!("envelope: {e}")))?;
    let topic = Topic::new(raw.topic)?;
    let payload = Payload::from_value(&topic, raw.payload)?;
    Ok(Envelope {
        topic,
        seq: raw.seq,
        ts: raw.ts,
        payload,
    })
}
