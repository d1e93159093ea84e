use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{read_component, read_manifest, session_dir, RecordEntry, RecordError};
use crate::config::Layer;
use crate::engine::{Engine, EngineError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayMode {
    Timed,
    AsFastAsPossible,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayOptions {
    pub speed: f64,
    pub mode: ReplayMode,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        Self { speed: 1.0, mode: ReplayMode::Timed }
    }
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("replay speed must be positive, got {0}")]
    InvalidSpeed(f64),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session {0} is still being recorded")]
    NotSealed(String),
    #[error("pipeline lacks input components {missing:?}")]
    IncompatiblePipeline { missing: Vec<String> },
    #[error(transparent)]
    Record(RecordError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

impl From<RecordError> for ReplayError {
    fn from(e: RecordError) -> Self {
        match e {
            RecordError::UnknownSession(id) => ReplayError::UnknownSession(id),
            e => ReplayError::Record(e),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub session_id: String,
    pub dispatched: u64,
    pub recorded_span_ms: u64,
    pub wall_ms: u64,
    /// Per `source` entry counts.
    pub per_source: BTreeMap<String, u64>,
    /// Dispatch order per (component, source) equals the recorded order.
    pub order_preserved: bool,
    pub failures: Vec<String>,
}

/// Re-dispatches the recorded input-layer entries of a sealed session into
/// `engine`, in `recv_ms` order.
pub fn replay(
    root: impl AsRef<Path>,
    session_id: &str,
    engine: &Engine,
    opts: ReplayOptions,
) -> Result<ReplayReport, ReplayError> {
    if !(opts.speed > 0.0 && opts.speed.is_finite()) {
        return Err(ReplayError::InvalidSpeed(opts.speed));
    }
    let root = root.as_ref();
    let meta = read_manifest(&session_dir(root, session_id)?)?;
    if !meta.sealed {
        return Err(ReplayError::NotSealed(session_id.to_string()));
    }
    let cfg = engine.config();
    let missing: Vec<String> = meta
        .inputs
        .iter()
        .filter(|name| cfg.component(name).is_none_or(|c| c.layer != Layer::Input))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(ReplayError::IncompatiblePipeline { missing });
    }

    let order: BTreeMap<&str, usize> = meta.inputs.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut entries: Vec<(usize, usize, RecordEntry)> = Vec::new();
    for name in &meta.inputs {
        for (line, e) in read_component(root, session_id, name)?.into_iter().enumerate() {
            entries.push((order[name.as_str()], line, e));
        }
    }
    entries.sort_by_key(|(c, line, e)| (e.recv_ms, *c, *line));

    let mut recorded: BTreeMap<(String, String), Vec<u64>> = BTreeMap::new();
    for (_, _, e) in &entries {
        recorded.entry((e.component.clone(), e.envelope.source.to_string())).or_default().push(e.envelope.seq);
    }

    let first = entries.first().map_or(0, |(_, _, e)| e.recv_ms);
    let span = entries.last().map_or(0, |(_, _, e)| e.recv_ms - first);
    let mut report = ReplayReport {
        session_id: session_id.to_string(),
        dispatched: 0,
        recorded_span_ms: span,
        wall_ms: 0,
        per_source: BTreeMap::new(),
        order_preserved: true,
        failures: Vec::new(),
    };
    let mut dispatched: BTreeMap<(String, String), Vec<u64>> = BTreeMap::new();
    let mut handles = Vec::new();
    let started = Instant::now();
    for (_, _, e) in entries {
        if opts.mode == ReplayMode::Timed {
            let due = Duration::from_secs_f64((e.recv_ms - first) as f64 / 1000.0 / opts.speed);
            if let Some(wait) = due.checked_sub(started.elapsed()) {
                std::thread::sleep(wait);
            }
        }
        let source = e.envelope.source.to_string();
        match engine.inject(&e.component, e.envelope.clone()) {
            Ok(h) => {
                handles.push(h);
                report.dispatched += 1;
                *report.per_source.entry(source.clone()).or_default() += 1;
                dispatched.entry((e.component.clone(), source)).or_default().push(e.envelope.seq);
            }
            Err(err) => report.failures.push(format!("{}#{}: {err}", e.component, e.envelope.seq)),
        }
    }
    for h in handles {
        h.wait();
    }
    report.wall_ms = started.elapsed().as_millis() as u64;
    report.order_preserved = report.failures.is_empty() && dispatched == recorded;
    Ok(report)
}
