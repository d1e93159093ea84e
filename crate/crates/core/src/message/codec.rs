use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

use super::{check_payload, Envelope, SessionId, SourceId, TypeTag, WIRE_VERSION};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("invalid field `{field}`: {reason}")]
    InvalidField { field: &'static str, reason: String },
    #[error("payload does not match schema for {type_tag}: {reason}")]
    SchemaMismatch { type_tag: String, reason: String },
}

// Field order here is the wire order.
#[derive(Serialize)]
struct WireFrame<'a> {
    v: u8,
    seq: u64,
    ts_ms: u64,
    source: String,
    session: &'a str,
    #[serde(rename = "type")]
    type_tag: &'a str,
    payload: &'a Value,
}

/// Canonical wire encoding.
///
/// Top-level keys are emitted in the fixed order
/// `v, seq, ts_ms, source, session, type, payload`; payload object keys are
/// sorted, so the output is byte-deterministic.
pub fn encode_envelope(e: &Envelope) -> Vec<u8> {
    let frame = WireFrame {
        v: e.version,
        seq: e.seq,
        ts_ms: e.ts_ms,
        source: e.source.to_string(),
        session: e.session.as_ref().map(SessionId::as_str).unwrap_or(""),
        type_tag: e.type_tag.as_str(),
        payload: &e.payload,
    };
    serde_json::to_vec(&frame).expect("envelope serialization is infallible")
}

fn field<'a>(obj: &'a Map<String, Value>, name: &'static str) -> Result<&'a Value, DecodeError> {
    obj.get(name).ok_or(DecodeError::MissingField(name))
}

fn u64_field(obj: &Map<String, Value>, name: &'static str) -> Result<u64, DecodeError> {
    field(obj, name)?.as_u64().ok_or_else(|| DecodeError::InvalidField {
        field: name,
        reason: "expected unsigned integer".into(),
    })
}

fn str_field<'a>(obj: &'a Map<String, Value>, name: &'static str) -> Result<&'a str, DecodeError> {
    field(obj, name)?.as_str().ok_or_else(|| DecodeError::InvalidField {
        field: name,
        reason: "expected string".into(),
    })
}

/// Parses one wire frame.
///
/// Unknown type tags decode successfully into a quarantined envelope; known
/// tags have their payload checked against the registered schema.
pub fn decode_envelope(bytes: &[u8]) -> Result<Envelope, DecodeError> {
    if bytes.is_empty() {
        return Err(DecodeError::MalformedFrame("empty frame".into()));
    }
    let value: Value =
        serde_json::from_slice(bytes).map_err(|e| DecodeError::MalformedFrame(e.to_string()))?;
    let Value::Object(obj) = value else {
        return Err(DecodeError::MalformedFrame("frame is not a JSON object".into()));
    };

    let version = u64_field(&obj, "v")?;
    if version != u64::from(WIRE_VERSION) {
        return Err(DecodeError::InvalidField {
            field: "v",
            reason: format!("unsupported version {version}"),
        });
    }
    let seq = u64_field(&obj, "seq")?;
    let ts_ms = u64_field(&obj, "ts_ms")?;
    let source: SourceId =
        str_field(&obj, "source")?.parse().map_err(|e: super::InvalidSourceId| {
            DecodeError::InvalidField {
                field: "source",
                reason: e.to_string(),
            }
        })?;
    let session = match str_field(&obj, "session")? {
        "" => None,
        s => Some(SessionId(s.to_string())),
    };
    let type_tag = TypeTag::parse(str_field(&obj, "type")?);
    let payload = field(&obj, "payload")?.clone();
    if !payload.is_object() {
        return Err(DecodeError::InvalidField {
            field: "payload",
            reason: "expected object".into(),
        });
    }
    if type_tag.is_known() {
        check_payload(&type_tag, &payload).map_err(|reason| DecodeError::SchemaMismatch {
            type_tag: type_tag.to_string(),
            reason,
        })?;
    }

    Ok(Envelope {
        version: WIRE_VERSION,
        seq,
        ts_ms,
        source,
        session,
        type_tag,
        payload,
    })
}
