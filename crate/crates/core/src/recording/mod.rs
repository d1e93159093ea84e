//! Session recording: every envelope a component handles is appended to a
//! per-component log, with a manifest describing the session.

mod replay;

pub use replay::{replay, ReplayError, ReplayMode, ReplayOptions, ReplayReport};

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, RecvTimeoutError, SyncSender};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::config::Layer;
use crate::engine::{Engine, EnvelopeObserver};
use crate::message::{decode_envelope, encode_envelope, Envelope, SessionId};

pub const MANIFEST: &str = "manifest.json";
pub const FLUSH_BATCH: usize = 100;
pub const FLUSH_INTERVAL: Duration = Duration::from_millis(250);
const QUEUE_CAPACITY: usize = 4096;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("a session is already active: {0}")]
    SessionActive(String),
    #[error("no active session")]
    NoActiveSession,
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: corrupt manifest: {message}")]
    Manifest { path: String, message: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> RecordError {
    RecordError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub session_id: String,
    pub started_ms: u64,
    #[serde(default)]
    pub ended_ms: Option<u64>,
    pub pipeline: String,
    pub components: Vec<String>,
    /// Input-layer components; replay requires the target pipeline to have them.
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default)]
    pub count: u64,
    /// Log file name to line count.
    #[serde(default)]
    pub files: BTreeMap<String, u64>,
    #[serde(default)]
    pub sealed: bool,
    #[serde(default)]
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordEntry {
    pub recv_ms: u64,
    pub component: String,
    pub envelope: Envelope,
}

pub fn log_file_name(component: &str) -> String {
    format!("{component}.log")
}

pub fn new_session_id() -> String {
    let suffix: u32 = rand::rng().random();
    format!("{}-{suffix:08x}", chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ"))
}

fn write_manifest(dir: &Path, meta: &SessionMeta) -> Result<(), RecordError> {
    let path = dir.join(MANIFEST);
    let tmp = dir.join(format!("{MANIFEST}.tmp"));
    let text = serde_json::to_string_pretty(meta).expect("manifest serializes");
    fs::write(&tmp, text).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<SessionMeta, RecordError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| RecordError::Manifest {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn set_read_only(path: &Path) -> Result<(), RecordError> {
    let mut perms = fs::metadata(path).map_err(|e| io_err(path, e))?.permissions();
    perms.set_readonly(true);
    fs::set_permissions(path, perms).map_err(|e| io_err(path, e))
}

/// Parses `"<recv_ms> <frame>"`.
pub fn parse_line(line: &str) -> Option<(u64, Envelope)> {
    let (ms, frame) = line.split_once(' ')?;
    Some((ms.parse().ok()?, decode_envelope(frame.as_bytes()).ok()?))
}

/// Session directories under `root`, oldest first.
pub fn list_sessions(root: impl AsRef<Path>) -> Vec<SessionMeta> {
    let Ok(entries) = fs::read_dir(root.as_ref()) else {
        return Vec::new();
    };
    let mut out: Vec<SessionMeta> =
        entries.filter_map(Result::ok).filter_map(|e| read_manifest(&e.path()).ok()).collect();
    out.sort_by(|a, b| a.session_id.cmp(&b.session_id));
    out
}

pub fn session_dir(root: impl AsRef<Path>, id: &str) -> Result<PathBuf, RecordError> {
    let dir = root.as_ref().join(id);
    if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') || !dir.join(MANIFEST).is_file() {
        return Err(RecordError::UnknownSession(id.to_string()));
    }
    Ok(dir)
}

/// Every entry of one component's log, in file order.
pub fn read_component(root: impl AsRef<Path>, id: &str, component: &str) -> Result<Vec<RecordEntry>, RecordError> {
    let path = session_dir(root, id)?.join(log_file_name(component));
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = File::open(&path).map_err(|e| io_err(&path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| io_err(&path, e))?;
        let (recv_ms, envelope) = parse_line(&line).ok_or_else(|| io_err(&path, "unparseable line"))?;
        out.push(RecordEntry { recv_ms, component: component.to_string(), envelope });
    }
    Ok(out)
}

/// Seals sessions left open by a crash. Each log keeps its complete lines;
/// a torn final line is cut off. Recovered manifests carry `truncated: true`.
pub fn recover(root: impl AsRef<Path>, skip: Option<&str>) -> Result<Vec<SessionMeta>, RecordError> {
    let mut recovered = Vec::new();
    for mut meta in list_sessions(root.as_ref()) {
        if meta.sealed || Some(meta.session_id.as_str()) == skip {
            continue;
        }
        let dir = root.as_ref().join(&meta.session_id);
        let mut files = BTreeMap::new();
        let mut last_ms = meta.started_ms;
        for component in &meta.components {
            let name = log_file_name(component);
            let path = dir.join(&name);
            if !path.exists() {
                continue;
            }
            let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
            let mut keep = 0usize;
            let mut lines = 0u64;
            for chunk in bytes.split_inclusive(|&b| b == b'\n') {
                let complete = chunk.ends_with(b"\n")
                    && std::str::from_utf8(&chunk[..chunk.len() - 1]).ok().and_then(parse_line).inspect(|(ms, _)| {
                        last_ms = last_ms.max(*ms);
                    })
                    .is_some();
                if !complete {
                    break;
                }
                keep += chunk.len();
                lines += 1;
            }
            if keep < bytes.len() {
                let f = OpenOptions::new().write(true).open(&path).map_err(|e| io_err(&path, e))?;
                f.set_len(keep as u64).map_err(|e| io_err(&path, e))?;
            }
            set_read_only(&path)?;
            files.insert(name, lines);
        }
        meta.count = files.values().sum();
        meta.files = files;
        meta.ended_ms = Some(last_ms);
        meta.sealed = true;
        meta.truncated = true;
        write_manifest(&dir, &meta)?;
        recovered.push(meta);
    }
    Ok(recovered)
}

enum WriterMsg {
    Entry { component: Arc<str>, recv_ms: u64, frame: Vec<u8> },
    Stop,
}

struct Active {
    meta: SessionMeta,
    dir: PathBuf,
    tx: SyncSender<WriterMsg>,
    writer: JoinHandle<Result<BTreeMap<String, u64>, RecordError>>,
}

struct LogFile {
    out: BufWriter<File>,
    lines: u64,
    last_ms: u64,
}

fn writer_loop(dir: PathBuf, rx: mpsc::Receiver<WriterMsg>) -> Result<BTreeMap<String, u64>, RecordError> {
    let mut files: HashMap<Arc<str>, LogFile> = HashMap::new();
    let mut pending = 0usize;
    let mut oldest: Option<Instant> = None;
    let flush = |files: &mut HashMap<Arc<str>, LogFile>| -> Result<(), RecordError> {
        for (name, f) in files.iter_mut() {
            f.out.flush().map_err(|e| io_err(&dir.join(log_file_name(name)), e))?;
        }
        Ok(())
    };
    loop {
        let wait = oldest.map_or(FLUSH_INTERVAL, |t| FLUSH_INTERVAL.saturating_sub(t.elapsed()));
        match rx.recv_timeout(wait) {
            Ok(WriterMsg::Entry { component, recv_ms, frame }) => {
                let f = match files.get_mut(&component) {
                    Some(f) => f,
                    None => {
                        let path = dir.join(log_file_name(&component));
                        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| io_err(&path, e))?;
                        files.entry(component.clone()).or_insert(LogFile { out: BufWriter::new(file), lines: 0, last_ms: 0 })
                    }
                };
                // recv stamps from concurrent producers can interleave by a tick
                f.last_ms = f.last_ms.max(recv_ms);
                let path_err = |e| io_err(&dir.join(log_file_name(&component)), e);
                write!(f.out, "{} ", f.last_ms).map_err(path_err)?;
                f.out.write_all(&frame).map_err(path_err)?;
                f.out.write_all(b"\n").map_err(path_err)?;
                f.lines += 1;
                pending += 1;
                oldest.get_or_insert_with(Instant::now);
                if pending >= FLUSH_BATCH {
                    flush(&mut files)?;
                    pending = 0;
                    oldest = None;
                }
            }
            Err(RecvTimeoutError::Timeout) => {
                if pending > 0 {
                    flush(&mut files)?;
                }
                pending = 0;
                oldest = None;
            }
            Ok(WriterMsg::Stop) | Err(RecvTimeoutError::Disconnected) => {
                flush(&mut files)?;
                return Ok(files.iter().map(|(k, f)| (log_file_name(k), f.lines)).collect());
            }
        }
    }
}

/// Engine observer that appends handled envelopes to the active session.
pub struct Recorder {
    root: PathBuf,
    clock: Arc<dyn Clock>,
    active: RwLock<Option<Active>>,
    lifecycle: Mutex<()>,
}

impl Recorder {
    pub fn new(root: impl Into<PathBuf>, clock: Arc<dyn Clock>) -> Arc<Self> {
        Arc::new(Self {
            root: root.into(),
            clock,
            active: RwLock::new(None),
            lifecycle: Mutex::new(()),
        })
    }

    /// Creates a recorder and registers it with the engine.
    pub fn attach(root: impl Into<PathBuf>, engine: &Engine) -> Arc<Self> {
        let rec = Self::new(root, engine.clock().clone());
        engine.add_observer(rec.clone());
        rec
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn active_session(&self) -> Option<SessionId> {
        self.active.read().unwrap().as_ref().map(|a| SessionId(a.meta.session_id.clone()))
    }

    pub fn start_session(&self, engine: &Engine) -> Result<SessionMeta, RecordError> {
        let _guard = self.lifecycle.lock().unwrap();
        if let Some(a) = self.active.read().unwrap().as_ref() {
            return Err(RecordError::SessionActive(a.meta.session_id.clone()));
        }
        let cfg = engine.config();
        let id = new_session_id();
        let dir = self.root.join(&id);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let meta = SessionMeta {
            session_id: id,
            started_ms: self.clock.now_ms(),
            ended_ms: None,
            pipeline: cfg.name.clone(),
            components: cfg.components.iter().map(|c| c.name.clone()).collect(),
            inputs: cfg.names_in_layer(Layer::Input).map(str::to_string).collect(),
            count: 0,
            files: BTreeMap::new(),
            sealed: false,
            truncated: false,
        };
        write_manifest(&dir, &meta)?;
        let (tx, rx) = mpsc::sync_channel(QUEUE_CAPACITY);
        let writer_dir = dir.clone();
        let writer = std::thread::Builder::new()
            .name("tomk-recorder".into())
            .spawn(move || writer_loop(writer_dir, rx))
            .map_err(|e| io_err(&dir, e))?;
        *self.active.write().unwrap() = Some(Active { meta: meta.clone(), dir, tx, writer });
        Ok(meta)
    }

    fn take_active(&self) -> Result<Active, RecordError> {
        self.active.write().unwrap().take().ok_or(RecordError::NoActiveSession)
    }

    pub fn stop_session(&self) -> Result<SessionMeta, RecordError> {
        let _guard = self.lifecycle.lock().unwrap();
        let active = self.take_active()?;
        let _ = active.tx.send(WriterMsg::Stop);
        let files = active
            .writer
            .join()
            .map_err(|_| io_err(&active.dir, "recorder thread panicked"))??;
        let mut meta = active.meta;
        meta.ended_ms = Some(self.clock.now_ms().max(meta.started_ms));
        meta.count = files.values().sum();
        for name in files.keys() {
            set_read_only(&active.dir.join(name))?;
        }
        meta.files = files;
        meta.sealed = true;
        write_manifest(&active.dir, &meta)?;
        Ok(meta)
    }

    /// Stops the writer without sealing, as if the process had died after
    /// the last flush. Used to exercise [`recover`].
    #[doc(hidden)]
    pub fn abandon(&self) {
        if let Ok(active) = self.take_active() {
            drop(active.tx);
            let _ = active.writer.join();
        }
    }
}

impl EnvelopeObserver for Recorder {
    fn on_handled(&self, component: &str, env: &Arc<Envelope>, recv_ms: u64) {
        let tx = match self.active.read().unwrap().as_ref() {
            Some(a) => a.tx.clone(),
            None => return,
        };
        let _ = tx.send(WriterMsg::Entry {
            component: Arc::from(component),
            recv_ms,
            frame: encode_envelope(env),
        });
    }
}
