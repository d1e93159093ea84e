//! Small builders for tests and examples: pass-through pipelines and
//! ready-made envelopes.

use serde_json::Value;

use crate::config::{ComponentDescriptor, Layer, PipelineConfig};
use crate::engine::{ComponentRegistry, HandlerBinding, PassThrough};
use crate::message::{Envelope, SourceId, TypeTag, WIRE_VERSION};

/// A config from `(name, layer, next)` triples; handlers are `<name>.on_data` / `<name>.stop`.
pub fn pipeline(name: &str, spec: &[(&str, Layer, &[&str])]) -> PipelineConfig {
    PipelineConfig {
        name: name.into(),
        components: spec
            .iter()
            .map(|(n, l, next)| ComponentDescriptor {
                name: n.to_string(),
                layer: *l,
                entry_point: format!("{n}.on_data"),
                exit_point: format!("{n}.stop"),
                next: next.iter().map(|s| s.to_string()).collect(),
            })
            .collect(),
        context: Vec::new(),
        settings: Default::default(),
    }
}

/// Binds every component of `cfg` to [`PassThrough`].
pub fn passthrough_registry(cfg: &PipelineConfig) -> ComponentRegistry {
    let mut r = ComponentRegistry::new();
    for c in &cfg.components {
        r.register(HandlerBinding::new(&c.entry_point, &c.exit_point, |_| Box::new(PassThrough)));
    }
    r
}

pub fn envelope(source: &str, seq: u64, ts_ms: u64, tag: TypeTag, payload: Value) -> Envelope {
    Envelope {
        version: WIRE_VERSION,
        seq,
        ts_ms,
        source: SourceId::client(source),
        session: None,
        type_tag: tag,
        payload,
    }
}
