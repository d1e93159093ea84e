//! Handler registry: maps the symbolic `entry_point`/`exit_point` names of a
//! config onto component implementations.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use serde_json::Value;
use thiserror::Error;

use crate::config::ComponentDescriptor;
use crate::message::{Envelope, EnvelopeError, EnvelopeFactory, Payload, SourceId, TypeTag};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{0}")]
pub struct ComponentError(pub String);

impl From<String> for ComponentError {
    fn from(s: String) -> Self {
        Self(s)
    }
}

impl From<&str> for ComponentError {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

impl From<EnvelopeError> for ComponentError {
    fn from(e: EnvelopeError) -> Self {
        Self(e.to_string())
    }
}

/// A pipeline stage. The engine calls it from one thread at a time, so
/// implementations may keep plain mutable state.
pub trait Component: Send {
    /// Entry point: handle one inbound envelope.
    fn on_envelope(&mut self, env: &Arc<Envelope>, out: &mut Emitter<'_>) -> Result<(), ComponentError>;

    /// Exit point: called once when the component is stopped or switched out.
    fn on_exit(&mut self, _out: &mut Emitter<'_>) -> Result<(), ComponentError> {
        Ok(())
    }
}

/// Collects the envelopes a handler emits; the engine fans them out along
/// `next` edges after the handler returns.
pub struct Emitter<'a> {
    source: &'a SourceId,
    factory: &'a EnvelopeFactory,
    emitted: Vec<Arc<Envelope>>,
}

impl<'a> Emitter<'a> {
    pub(crate) fn new(source: &'a SourceId, factory: &'a EnvelopeFactory) -> Self {
        Self {
            source,
            factory,
            emitted: Vec::new(),
        }
    }

    /// Passes an envelope on unchanged (source and seq preserved).
    pub fn forward(&mut self, env: Arc<Envelope>) {
        self.emitted.push(env);
    }

    /// Builds a new envelope sourced from this component.
    pub fn emit(&mut self, tag: TypeTag, payload: Value) -> Result<Arc<Envelope>, EnvelopeError> {
        let env = Arc::new(self.factory.make_envelope(self.source, tag, payload)?);
        self.emitted.push(env.clone());
        Ok(env)
    }

    pub fn emit_payload<P: Payload>(&mut self, payload: &P) -> Result<Arc<Envelope>, EnvelopeError> {
        let value = serde_json::to_value(payload).expect("payload serializes");
        self.emit(P::TAG, value)
    }

    pub fn now_ms(&self) -> u64 {
        self.factory.clock().now_ms()
    }

    pub fn len(&self) -> usize {
        self.emitted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.emitted.is_empty()
    }

    pub(crate) fn into_emitted(self) -> Vec<Arc<Envelope>> {
        self.emitted
    }
}

pub type ComponentFactory = Arc<dyn Fn(&ComponentDescriptor) -> Box<dyn Component> + Send + Sync>;

#[derive(Clone)]
pub struct HandlerBinding {
    pub entry_point: String,
    pub exit_point: String,
    /// Tags an input-layer component listens for; `None` accepts all.
    pub accepts: Option<Vec<TypeTag>>,
    pub(crate) factory: ComponentFactory,
}

impl HandlerBinding {
    pub fn new<F>(entry_point: &str, exit_point: &str, factory: F) -> Self
    where
        F: Fn(&ComponentDescriptor) -> Box<dyn Component> + Send + Sync + 'static,
    {
        Self {
            entry_point: entry_point.to_string(),
            exit_point: exit_point.to_string(),
            accepts: None,
            factory: Arc::new(factory),
        }
    }

    pub fn accepting(mut self, tags: impl IntoIterator<Item = TypeTag>) -> Self {
        self.accepts = Some(tags.into_iter().collect());
        self
    }

    pub fn accepts(&self, tag: &TypeTag) -> bool {
        self.accepts.as_ref().is_none_or(|a| a.contains(tag))
    }

    pub fn build(&self, d: &ComponentDescriptor) -> Box<dyn Component> {
        (self.factory)(d)
    }
}

impl fmt::Debug for HandlerBinding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HandlerBinding")
            .field("entry_point", &self.entry_point)
            .field("exit_point", &self.exit_point)
            .field("accepts", &self.accepts)
            .finish()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ComponentRegistry {
    bindings: HashMap<String, HandlerBinding>,
}

impl ComponentRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers (or replaces) the binding for its entry point.
    pub fn register(&mut self, binding: HandlerBinding) -> &mut Self {
        self.bindings.insert(binding.entry_point.clone(), binding);
        self
    }

    pub fn unregister(&mut self, entry_point: &str) -> &mut Self {
        self.bindings.remove(entry_point);
        self
    }

    /// Both symbols of the descriptor must resolve to the same binding.
    pub fn resolve(&self, d: &ComponentDescriptor) -> Option<&HandlerBinding> {
        self.bindings
            .get(&d.entry_point)
            .filter(|b| b.exit_point == d.exit_point)
    }
}

/// Forwards every envelope unchanged.
#[derive(Debug, Default, Clone, Copy)]
pub struct PassThrough;

impl Component for PassThrough {
    fn on_envelope(&mut self, env: &Arc<Envelope>, out: &mut Emitter<'_>) -> Result<(), ComponentError> {
        out.forward(env.clone());
        Ok(())
    }
}

/// Adapts a closure into a component.
pub struct FnComponent<F>(pub F);

impl<F> Component for FnComponent<F>
where
    F: FnMut(&Arc<Envelope>, &mut Emitter<'_>) -> Result<(), ComponentError> + Send,
{
    fn on_envelope(&mut self, env: &Arc<Envelope>, out: &mut Emitter<'_>) -> Result<(), ComponentError> {
        (self.0)(env, out)
    }
}
