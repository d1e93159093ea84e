//! WebSocket data channel for clients, a read-only monitor tap and the
//! HTTP control API.

mod api;
mod queue;
mod ws;

pub use queue::{CloseReason, Outgoing, SendQueue, SEND_QUEUE_CAPACITY};

use std::collections::{BTreeSet, HashMap};
use std::future::Future;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use crate::clock::{Clock, SystemClock};
use crate::context::SwitchCause;
use crate::engine::{EngineError, EnvelopeObserver};
use crate::kernel::Kernel;
use crate::message::payload::{DeviceKind, Handshake, Heartbeat, RecordAction, RecordCommand, SwitchService};
use crate::message::{encode_envelope, Envelope, Namespace, Sequencer, SourceId, TypeTag};
use crate::services::components::FeedbackSink;

pub const PROTOCOL_VERSION: u32 = 1;
pub const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);
pub const HEARTBEAT_INTERVAL_MS: u64 = 3_000;
pub const HEARTBEAT_TIMEOUT_MS: u64 = 10_000;
pub const DEFAULT_PORT: u16 = 8080;

pub const CLOSE_HEARTBEAT_TIMEOUT: u16 = 4000;
pub const CLOSE_SUPERSEDED: u16 = 4001;
pub const CLOSE_HANDSHAKE_REQUIRED: u16 = 4002;
pub const CLOSE_VERSION_MISMATCH: u16 = 4003;
pub const CLOSE_HANDSHAKE_TIMEOUT: u16 = 4004;

/// `TOMK_PORT`, or 8080.
pub fn port_from_env() -> u16 {
    std::env::var("TOMK_PORT").ok().and_then(|p| p.parse().ok()).unwrap_or(DEFAULT_PORT)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectionState {
    Connected,
    Closing,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientInfo {
    pub client_id: String,
    pub device_kind: DeviceKind,
    pub declared_inputs: BTreeSet<TypeTag>,
    pub declared_outputs: BTreeSet<TypeTag>,
    pub last_heartbeat_ms: u64,
    pub state: ConnectionState,
}

pub struct ClientEntry {
    pub conn_id: u64,
    pub device_kind: DeviceKind,
    pub declared_inputs: BTreeSet<TypeTag>,
    pub declared_outputs: BTreeSet<TypeTag>,
    pub queue: Arc<SendQueue>,
    last_seen: AtomicU64,
    client_id: String,
}

impl ClientEntry {
    pub fn info(&self) -> ClientInfo {
        ClientInfo {
            client_id: self.client_id.clone(),
            device_kind: self.device_kind,
            declared_inputs: self.declared_inputs.clone(),
            declared_outputs: self.declared_outputs.clone(),
            last_heartbeat_ms: self.last_seen.load(Ordering::SeqCst),
            state: if self.queue.is_closing() { ConnectionState::Closing } else { ConnectionState::Connected },
        }
    }

    pub fn touch(&self, now_ms: u64) {
        self.last_seen.fetch_max(now_ms, Ordering::SeqCst);
    }
}

#[derive(Debug, Default)]
pub struct TransportMetrics {
    pub frames_in: AtomicU64,
    pub frames_out: AtomicU64,
    pub no_route: AtomicU64,
    pub unrouted_inputs: AtomicU64,
    pub rejected: AtomicU64,
    pub evicted: AtomicU64,
    pub superseded: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransportMetricsSnapshot {
    pub clients: usize,
    pub frames_in: u64,
    pub frames_out: u64,
    pub no_route: u64,
    pub unrouted_inputs: u64,
    pub rejected: u64,
    pub evicted: u64,
    pub superseded: u64,
    pub dropped_outbound: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum InboundError {
    #[error("{0} frames are not accepted from clients")]
    NotAccepted(TypeTag),
    #[error("no input component listens for {0}")]
    NoInput(TypeTag),
    #[error("malformed {tag} payload: {reason}")]
    BadPayload { tag: TypeTag, reason: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("{0}")]
    Record(String),
}

/// What happened to one inbound envelope.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InboundOutcome {
    Dispatched { components: Vec<String> },
    Heartbeat { sync: Option<u64> },
    Switched { active: Option<String> },
    Recording { session: Option<String> },
}

/// Shared transport state: connected clients, monitor subscribers, metrics.
pub struct Hub {
    pub kernel: Arc<Kernel>,
    clients: RwLock<HashMap<String, Arc<ClientEntry>>>,
    monitor: broadcast::Sender<Arc<str>>,
    pub metrics: TransportMetrics,
    liveness: Arc<dyn Clock>,
    next_conn: AtomicU64,
    control: Mutex<Sequencer>,
}

impl Hub {
    pub fn new(kernel: Arc<Kernel>) -> Arc<Self> {
        Self::with_liveness_clock(kernel, Arc::new(SystemClock))
    }

    pub fn with_liveness_clock(kernel: Arc<Kernel>, liveness: Arc<dyn Clock>) -> Arc<Self> {
        let (monitor, _) = broadcast::channel(4096);
        let hub = Arc::new(Self {
            kernel,
            clients: RwLock::new(HashMap::new()),
            monitor,
            metrics: TransportMetrics::default(),
            liveness,
            next_conn: AtomicU64::new(1),
            control: Mutex::new(Sequencer::new(SourceId::component("transport"))),
        });
        hub.kernel.resources.sink.attach(hub.clone());
        hub.kernel.engine.add_observer(hub.clone());
        hub
    }

    pub fn now_ms(&self) -> u64 {
        self.liveness.now_ms()
    }

    /// A kernel-originated control frame.
    pub fn control_frame(&self, tag: TypeTag, payload: serde_json::Value) -> Arc<str> {
        let now = self.kernel.engine.clock().now_ms();
        let env = self.control.lock().unwrap().next(tag, payload, now).expect("control payload is valid");
        Arc::from(String::from_utf8(encode_envelope(&env)).expect("frames are utf-8"))
    }

    /// Registers a client after a valid handshake. A previous connection
    /// with the same id is closed as superseded.
    pub fn register(&self, hello: &Handshake) -> Arc<ClientEntry> {
        let entry = Arc::new(ClientEntry {
            conn_id: self.next_conn.fetch_add(1, Ordering::SeqCst),
            device_kind: hello.device_kind,
            declared_inputs: hello.declared_inputs.clone(),
            declared_outputs: hello.declared_outputs.clone(),
            queue: Arc::new(SendQueue::default()),
            last_seen: AtomicU64::new(self.now_ms()),
            client_id: hello.client_id.clone(),
        });
        let old = self.clients.write().unwrap().insert(hello.client_id.clone(), entry.clone());
        if let Some(old) = old {
            self.metrics.superseded.fetch_add(1, Ordering::Relaxed);
            old.queue.close(Some(CloseReason { code: CLOSE_SUPERSEDED, reason: "superseded".into() }));
        }
        tracing::info!(client = %hello.client_id, kind = ?hello.device_kind, "client registered");
        entry
    }

    /// Removes the client only if `conn_id` is still its current connection.
    pub fn deregister(&self, client_id: &str, conn_id: u64) -> bool {
        let mut clients = self.clients.write().unwrap();
        if clients.get(client_id).is_some_and(|e| e.conn_id == conn_id) {
            clients.remove(client_id);
            return true;
        }
        false
    }

    pub fn client(&self, client_id: &str) -> Option<Arc<ClientEntry>> {
        self.clients.read().unwrap().get(client_id).cloned()
    }

    pub fn clients(&self) -> Vec<ClientInfo> {
        let mut out: Vec<_> = self.clients.read().unwrap().values().map(|e| e.info()).collect();
        out.sort_by(|a, b| a.client_id.cmp(&b.client_id));
        out
    }

    /// Sends a feedback envelope to every client that declared its tag.
    pub fn route_outbound(&self, env: &Envelope) -> usize {
        let frame: Arc<str> = Arc::from(String::from_utf8(encode_envelope(env)).expect("frames are utf-8"));
        let droppable = env.type_tag == TypeTag::FeedbackDisplay;
        let targets: Vec<_> = self
            .clients
            .read()
            .unwrap()
            .values()
            .filter(|e| e.declared_outputs.contains(&env.type_tag))
            .cloned()
            .collect();
        let mut count = 0;
        for t in &targets {
            if t.queue.push(frame.clone(), droppable) {
                count += 1;
            }
        }
        if targets.is_empty() {
            self.metrics.no_route.fetch_add(1, Ordering::Relaxed);
        }
        self.metrics.frames_out.fetch_add(count as u64, Ordering::Relaxed);
        count
    }

    /// Closes and forgets clients silent for more than the heartbeat timeout.
    pub fn heartbeat_sweep(&self, now_ms: u64) -> Vec<ClientInfo> {
        let mut clients = self.clients.write().unwrap();
        let stale: Vec<String> = clients
            .iter()
            .filter(|(_, e)| now_ms.saturating_sub(e.last_seen.load(Ordering::SeqCst)) > HEARTBEAT_TIMEOUT_MS)
            .map(|(k, _)| k.clone())
            .collect();
        let mut evicted = Vec::new();
        for id in stale {
            if let Some(e) = clients.remove(&id) {
                e.queue.close(Some(CloseReason { code: CLOSE_HEARTBEAT_TIMEOUT, reason: "heartbeat timeout".into() }));
                self.metrics.evicted.fetch_add(1, Ordering::Relaxed);
                tracing::info!(client = %id, "client evicted");
                evicted.push(e.info());
            }
        }
        evicted
    }

    pub fn subscribe_monitor(&self) -> broadcast::Receiver<Arc<str>> {
        self.monitor.subscribe()
    }

    pub fn metrics_snapshot(&self) -> TransportMetricsSnapshot {
        let clients = self.clients.read().unwrap();
        let m = &self.metrics;
        TransportMetricsSnapshot {
            clients: clients.len(),
            frames_in: m.frames_in.load(Ordering::Relaxed),
            frames_out: m.frames_out.load(Ordering::Relaxed),
            no_route: m.no_route.load(Ordering::Relaxed),
            unrouted_inputs: m.unrouted_inputs.load(Ordering::Relaxed),
            rejected: m.rejected.load(Ordering::Relaxed),
            evicted: m.evicted.load(Ordering::Relaxed),
            superseded: m.superseded.load(Ordering::Relaxed),
            dropped_outbound: clients.values().map(|e| e.queue.dropped()).sum(),
        }
    }

    /// Handles one decoded envelope from a client (or the inject endpoint).
    /// Blocking: may wait on engine backpressure or the idle barrier.
    pub fn handle_inbound(&self, env: Envelope, from: Option<&ClientEntry>) -> Result<InboundOutcome, InboundError> {
        if let Some(c) = from {
            c.touch(self.now_ms());
        }
        self.metrics.frames_in.fetch_add(1, Ordering::Relaxed);
        if let Some(clock) = &self.kernel.sim_clock {
            clock.set(env.ts_ms);
        }
        let bad = |tag: &TypeTag, reason: &str| InboundError::BadPayload { tag: tag.clone(), reason: reason.into() };
        let engine = &self.kernel.engine;
        match env.type_tag.namespace() {
            Some(Namespace::Sensor | Namespace::Input) => {
                let targets = engine.input_components_for(&env.type_tag);
                if targets.is_empty() {
                    self.metrics.unrouted_inputs.fetch_add(1, Ordering::Relaxed);
                    return Err(InboundError::NoInput(env.type_tag));
                }
                let env = Arc::new(env);
                for t in &targets {
                    engine.inject(t, env.clone())?;
                }
                Ok(InboundOutcome::Dispatched { components: targets })
            }
            _ => match &env.type_tag {
                TypeTag::ControlHeartbeat => {
                    let hb: Heartbeat = env.payload_as().ok_or_else(|| bad(&env.type_tag, "expected heartbeat"))?;
                    if let Some(n) = hb.sync {
                        if !engine.wait_idle(Duration::from_secs(30)) {
                            tracing::warn!("sync barrier timed out waiting for idle engine");
                        }
                        if let Some(c) = from {
                            let frame = self.control_frame(TypeTag::ControlHeartbeat, serde_json::json!({"sync": n}));
                            c.queue.push(frame, false);
                        }
                    }
                    Ok(InboundOutcome::Heartbeat { sync: hb.sync })
                }
                TypeTag::ControlSwitchService => {
                    let s: SwitchService =
                        env.payload_as().ok_or_else(|| bad(&env.type_tag, "expected {\"name\": ...}"))?;
                    let target = match s.name.as_str() {
                        "" | "idle" | "none" => None,
                        n => Some(n),
                    };
                    engine.switch_service(target, SwitchCause::Explicit)?;
                    Ok(InboundOutcome::Switched { active: engine.context().active })
                }
                TypeTag::ControlRecord => {
                    let r: RecordCommand =
                        env.payload_as().ok_or_else(|| bad(&env.type_tag, "expected {\"action\": ...}"))?;
                    let rec = &self.kernel.recorder;
                    let meta = match r.action {
                        RecordAction::Start => rec.start_session(engine).map(|m| Some(m.session_id)),
                        RecordAction::Stop => rec.stop_session().map(|_| None),
                    }
                    .map_err(|e| InboundError::Record(e.to_string()))?;
                    Ok(InboundOutcome::Recording { session: meta })
                }
                other => {
                    self.metrics.rejected.fetch_add(1, Ordering::Relaxed);
                    Err(InboundError::NotAccepted(other.clone()))
                }
            },
        }
    }
}

impl FeedbackSink for Hub {
    fn deliver(&self, env: &Arc<Envelope>) -> usize {
        self.route_outbound(env)
    }
}

impl EnvelopeObserver for Hub {
    fn on_handled(&self, _component: &str, env: &Arc<Envelope>, _recv_ms: u64) {
        if self.monitor.receiver_count() == 0 {
            return;
        }
        let stamped = env.with_session(self.kernel.recorder.active_session());
        let frame = String::from_utf8(encode_envelope(&stamped)).expect("frames are utf-8");
        let _ = self.monitor.send(Arc::from(frame));
    }
}

pub fn router(hub: Arc<Hub>) -> axum::Router {
    api::routes().merge(ws::routes()).with_state(hub)
}

/// Serves until `shutdown` resolves. Needs a multi-threaded runtime.
pub async fn serve(
    hub: Arc<Hub>,
    listener: tokio::net::TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let sweeper = {
        let hub = hub.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(Duration::from_secs(1));
            loop {
                tick.tick().await;
                hub.heartbeat_sweep(hub.now_ms());
            }
        })
    };
    let result = axum::serve(listener, router(hub)).with_graceful_shutdown(shutdown).await;
    sweeper.abort();
    result
}

/// A server on its own runtime thread, for blocking callers.
pub struct Server {
    pub hub: Arc<Hub>,
    addr: SocketAddr,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl Server {
    pub fn start(kernel: Arc<Kernel>, addr: SocketAddr) -> std::io::Result<Self> {
        let hub = Hub::new(kernel);
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(4).enable_all().build()?;
        let listener = rt.block_on(tokio::net::TcpListener::bind(addr))?;
        let addr = listener.local_addr()?;
        let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
        let serve_hub = hub.clone();
        let thread = std::thread::Builder::new().name("tomk-transport".into()).spawn(move || {
            rt.block_on(serve(serve_hub, listener, async {
                let _ = stopped.await;
            }))
        })?;
        Ok(Self { hub, addr, stop: Some(stop), thread: Some(thread) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn ws_url(&self) -> String {
        format!("ws://{}", self.addr)
    }

    pub fn http_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) {
        self.stop_inner();
    }

    fn stop_inner(&mut self) {
        let clients: Vec<_> = self.hub.clients.read().unwrap().values().cloned().collect();
        for c in clients {
            c.queue.close(None);
        }
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.stop_inner();
    }
}
