//! The envelope: the one message unit every component and client exchanges.
//!
//! Envelopes are immutable once built and travel between threads behind an
//! `Arc`. The wire form is a single JSON object with a fixed key order (see
//! [`encode_envelope`]).

mod codec;
mod factory;
pub mod payload;
mod tag;

use std::fmt;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde_json::Value;
use thiserror::Error;

pub use codec::{decode_envelope, encode_envelope, DecodeError};
pub use factory::{EnvelopeError, EnvelopeFactory, Sequencer};
pub use payload::{check_payload, Payload};
pub use tag::{Namespace, TypeTag};

pub const WIRE_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SourceKind {
    Client,
    Component,
}

impl SourceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Client => "client",
            Self::Component => "component",
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid source id {0:?}")]
pub struct InvalidSourceId(pub String);

/// `<kind>:<id>` where the id is non-empty and has no whitespace.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SourceId {
    kind: SourceKind,
    id: String,
}

impl SourceId {
    pub fn new(kind: SourceKind, id: impl Into<String>) -> Result<Self, InvalidSourceId> {
        let id = id.into();
        if id.is_empty() || id.chars().any(char::is_whitespace) {
            return Err(InvalidSourceId(id));
        }
        Ok(Self { kind, id })
    }

    /// Panics on an invalid identifier; meant for literals.
    pub fn client(id: &str) -> Self {
        Self::new(SourceKind::Client, id).expect("valid client id")
    }

    /// Panics on an invalid identifier; meant for literals.
    pub fn component(id: &str) -> Self {
        Self::new(SourceKind::Component, id).expect("valid component id")
    }

    pub fn kind(&self) -> SourceKind {
        self.kind
    }

    pub fn id(&self) -> &str {
        &self.id
    }
}

impl fmt::Display for SourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.as_str(), self.id)
    }
}

impl FromStr for SourceId {
    type Err = InvalidSourceId;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, id) = s.split_once(':').ok_or_else(|| InvalidSourceId(s.to_string()))?;
        let kind = match kind {
            "client" => SourceKind::Client,
            "component" => SourceKind::Component,
            _ => return Err(InvalidSourceId(s.to_string())),
        };
        Self::new(kind, id).map_err(|_| InvalidSourceId(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SessionId(pub String);

impl SessionId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub version: u8,
    pub seq: u64,
    pub ts_ms: u64,
    pub source: SourceId,
    pub session: Option<SessionId>,
    pub type_tag: TypeTag,
    pub payload: Value,
}

impl Envelope {
    /// Tags outside the registered vocabulary are carried but never routed.
    pub fn is_quarantined(&self) -> bool {
        !self.type_tag.is_known()
    }

    pub fn with_session(&self, session: Option<SessionId>) -> Self {
        Self {
            session,
            ..self.clone()
        }
    }

    /// Deserializes the payload as `P`, checking the tag matches.
    pub fn payload_as<P: Payload + DeserializeOwned>(&self) -> Option<P> {
        if self.type_tag != P::TAG {
            return None;
        }
        serde_json::from_value(self.payload.clone()).ok()
    }
}
