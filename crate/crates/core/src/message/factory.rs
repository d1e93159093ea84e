use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde_json::Value;
use thiserror::Error;

use super::{check_payload, Envelope, SourceId, TypeTag, WIRE_VERSION};
use crate::clock::Clock;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EnvelopeError {
    #[error("unknown type tag {0:?}")]
    UnknownTypeTag(String),
    #[error("source {0} is not registered")]
    UnregisteredSource(SourceId),
    #[error("payload does not match schema for {type_tag}: {reason}")]
    SchemaMismatch { type_tag: String, reason: String },
}

/// Single-producer sequence state for one source.
///
/// Sequence numbers start at 1 and strictly increase; timestamps never go
/// backwards even if the clock does.
#[derive(Debug, Clone)]
pub struct Sequencer {
    source: SourceId,
    seq: u64,
    last_ts: u64,
}

impl Sequencer {
    pub fn new(source: SourceId) -> Self {
        Self {
            source,
            seq: 0,
            last_ts: 0,
        }
    }

    pub fn source(&self) -> &SourceId {
        &self.source
    }

    pub fn next(
        &mut self,
        type_tag: TypeTag,
        payload: Value,
        now_ms: u64,
    ) -> Result<Envelope, EnvelopeError> {
        if !type_tag.is_known() {
            return Err(EnvelopeError::UnknownTypeTag(type_tag.to_string()));
        }
        check_payload(&type_tag, &payload).map_err(|reason| EnvelopeError::SchemaMismatch {
            type_tag: type_tag.to_string(),
            reason,
        })?;
        self.seq += 1;
        self.last_ts = self.last_ts.max(now_ms);
        Ok(Envelope {
            version: WIRE_VERSION,
            seq: self.seq,
            ts_ms: self.last_ts,
            source: self.source.clone(),
            session: None,
            type_tag,
            payload,
        })
    }
}

/// Builds envelopes for any number of registered sources against a shared
/// clock.
pub struct EnvelopeFactory {
    clock: Arc<dyn Clock>,
    sources: Mutex<HashMap<SourceId, Sequencer>>,
}

impl EnvelopeFactory {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self {
            clock,
            sources: Mutex::new(HashMap::new()),
        }
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    /// Returns `false` if the source was already registered (its counter is kept).
    pub fn register(&self, source: SourceId) -> bool {
        let mut sources = self.sources.lock().unwrap();
        if sources.contains_key(&source) {
            return false;
        }
        sources.insert(source.clone(), Sequencer::new(source));
        true
    }

    pub fn deregister(&self, source: &SourceId) {
        self.sources.lock().unwrap().remove(source);
    }

    pub fn make_envelope(
        &self,
        source: &SourceId,
        type_tag: TypeTag,
        payload: Value,
    ) -> Result<Envelope, EnvelopeError> {
        let now = self.clock.now_ms();
        let mut sources = self.sources.lock().unwrap();
        let seq = sources
            .get_mut(source)
            .ok_or_else(|| EnvelopeError::UnregisteredSource(source.clone()))?;
        seq.next(type_tag, payload, now)
    }
}
