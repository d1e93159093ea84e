use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use futures::{SinkExt, StreamExt};
use serde::Serialize;
use serde_json::{json, Value};
use tokio::sync::{mpsc, watch};
use tokio::task::JoinHandle;
use tokio_tungstenite::tungstenite::Message;

use super::script::{ClockMode, Event, ScenarioScript, SimClient};
use super::SimError;
use crate::kernel::crate_path;
use crate::message::payload::{Handshake, HandshakeMessage, Heartbeat, ReplyStatus};
use crate::message::{decode_envelope, encode_envelope, Envelope, Namespace, SourceId, TypeTag, WIRE_VERSION};
use crate::services::domain::DataStore;
use crate::services::ports::FrameFixtures;
use crate::transport::PROTOCOL_VERSION;

/// Earliest epoch at which simulated scenarios start. A kernel already past
/// it (from an earlier run) moves the start to the next whole second after
/// its clock.
pub const SIM_EPOCH_MS: u64 = 1_700_000_000_000;

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub fixtures_dir: PathBuf,
    pub data_dir: PathBuf,
    /// Overrides the clock mode the kernel reports at handshake.
    pub clock: Option<ClockMode>,
    pub sync_timeout: Duration,
    pub keepalive: Duration,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            fixtures_dir: crate_path("fixtures"),
            data_dir: crate_path("data"),
            clock: None,
            sync_timeout: Duration::from_secs(60),
            keepalive: Duration::from_secs(3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExpectOutcome {
    pub step: usize,
    pub client: String,
    #[serde(rename = "type")]
    pub type_tag: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    pub at_ms: u64,
    pub timeout_ms: u64,
    pub passed: bool,
    /// Script time from `at_ms` to the first matching frame.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyStats {
    pub count: usize,
    pub min_ms: u64,
    pub mean_ms: f64,
    pub p95_ms: u64,
    pub max_ms: u64,
}

impl LatencyStats {
    pub fn from_samples(samples: &[u64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut s = samples.to_vec();
        s.sort_unstable();
        Some(Self {
            count: s.len(),
            min_ms: s[0],
            mean_ms: s.iter().sum::<u64>() as f64 / s.len() as f64,
            p95_ms: crate::engine::quantile(&s, 0.95),
            max_ms: s[s.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub clock: ClockMode,
    pub passed: bool,
    pub expectations: Vec<ExpectOutcome>,
    pub latency: Option<LatencyStats>,
    /// Non-control frames received per client.
    pub received: BTreeMap<String, usize>,
}

impl ScenarioReport {
    pub fn summary_lines(&self) -> Vec<String> {
        let mut out = vec![format!(
            "scenario {} ({:?} clock): {}",
            self.name,
            self.clock,
            if self.passed { "PASS" } else { "FAIL" }
        )];
        for x in &self.expectations {
            out.push(format!(
                "  step {:>3} {:<8} {} {}{} {}",
                x.step,
                x.client,
                x.type_tag,
                x.contains.as_deref().map(|c| format!("~{c:?} ")).unwrap_or_default(),
                x.latency_ms.map(|l| format!("after {l} ms")).unwrap_or_default(),
                if x.passed { "ok".to_string() } else { format!("FAILED {}", x.note.as_deref().unwrap_or("")) }
            ));
        }
        if let Some(l) = &self.latency {
            out.push(format!("  latency n={} min={} mean={:.1} p95={} max={} ms", l.count, l.min_ms, l.mean_ms, l.p95_ms, l.max_ms));
        }
        out
    }
}

struct Received {
    env: Envelope,
    elapsed_ms: u64,
}

struct Conn {
    id: String,
    source: SourceId,
    seq: Arc<AtomicU64>,
    tx: mpsc::UnboundedSender<Message>,
    received: Arc<Mutex<Vec<Received>>>,
    synced: watch::Receiver<u64>,
    reader: JoinHandle<()>,
    writer: JoinHandle<()>,
}

impl Conn {
    fn send(&self, type_tag: TypeTag, payload: Value, ts_ms: u64) -> Result<(), SimError> {
        let env = Envelope {
            version: WIRE_VERSION,
            seq: self.seq.fetch_add(1, Ordering::SeqCst) + 1,
            ts_ms,
            source: self.source.clone(),
            session: None,
            type_tag,
            payload,
        };
        let text = String::from_utf8(encode_envelope(&env)).expect("envelopes encode as utf-8");
        self.tx
            .send(Message::text(text))
            .map_err(|_| SimError::ConnectionFailed { client: self.id.clone(), reason: "connection closed".into() })
    }
}

fn ws_url(server: &str) -> String {
    let base = if server.contains("://") { server.to_string() } else { format!("ws://{server}") };
    if base.ends_with("/ws/client") {
        base
    } else {
        format!("{}/ws/client", base.trim_end_matches('/'))
    }
}

fn wall_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

async fn connect(
    url: &str,
    spec: &SimClient,
    start: Instant,
    hello_ts: u64,
) -> Result<(Conn, Option<String>, u64), SimError> {
    let fail = |reason: String| SimError::ConnectionFailed { client: spec.id.clone(), reason };
    let (ws, _) = tokio_tungstenite::connect_async(url).await.map_err(|e| fail(format!("{url}: {e}")))?;
    let (mut sink, mut stream) = ws.split();
    let source = SourceId::new(crate::message::SourceKind::Client, spec.id.clone()).map_err(|e| fail(e.to_string()))?;
    let hello = HandshakeMessage::Hello(Handshake {
        client_id: spec.id.clone(),
        device_kind: spec.device_kind,
        declared_inputs: spec.inputs.clone(),
        declared_outputs: spec.outputs.clone(),
        protocol_version: PROTOCOL_VERSION,
    });
    let env = Envelope {
        version: WIRE_VERSION,
        seq: 1,
        ts_ms: hello_ts,
        source: source.clone(),
        session: None,
        type_tag: TypeTag::ControlHandshake,
        payload: serde_json::to_value(&hello).expect("handshake serializes"),
    };
    let text = String::from_utf8(encode_envelope(&env)).expect("utf-8");
    sink.send(Message::text(text)).await.map_err(|e| fail(e.to_string()))?;

    let reply = tokio::time::timeout(Duration::from_secs(10), stream.next())
        .await
        .map_err(|_| fail("no handshake reply".into()))?;
    let (clock, kernel_ts) = match reply {
        Some(Ok(Message::Text(t))) => {
            let env = decode_envelope(t.as_bytes()).map_err(|e| fail(e.to_string()))?;
            match env.payload_as::<HandshakeMessage>() {
                Some(HandshakeMessage::Reply(r)) if r.status == ReplyStatus::Ok => (r.clock, env.ts_ms),
                Some(HandshakeMessage::Reply(r)) => {
                    return Err(fail(format!("rejected: {}", r.error.unwrap_or_default())));
                }
                _ => return Err(fail(format!("unexpected reply {}", env.type_tag))),
            }
        }
        Some(Ok(Message::Close(f))) => return Err(fail(format!("closed: {f:?}"))),
        other => return Err(fail(format!("unexpected reply {other:?}"))),
    };

    let (tx, mut rx) = mpsc::unbounded_channel::<Message>();
    let writer = tokio::spawn(async move {
        while let Some(m) = rx.recv().await {
            let close = matches!(m, Message::Close(_));
            if sink.send(m).await.is_err() || close {
                break;
            }
        }
    });
    let received = Arc::new(Mutex::new(Vec::new()));
    let (sync_tx, synced) = watch::channel(0u64);
    let sink_received = received.clone();
    let id = spec.id.clone();
    let reader = tokio::spawn(async move {
        while let Some(msg) = stream.next().await {
            let bytes = match msg {
                Ok(Message::Text(t)) => t.as_bytes().to_vec(),
                Ok(Message::Binary(b)) => b.to_vec(),
                Ok(Message::Close(f)) => {
                    tracing::info!(client = %id, frame = ?f, "server closed connection");
                    break;
                }
                Ok(_) => continue,
                Err(_) => break,
            };
            let Ok(env) = decode_envelope(&bytes) else { continue };
            if env.type_tag == TypeTag::ControlHeartbeat {
                if let Some(n) = env.payload_as::<Heartbeat>().and_then(|h| h.sync) {
                    sync_tx.send_modify(|v| *v = (*v).max(n));
                }
                continue;
            }
            let elapsed_ms = start.elapsed().as_millis() as u64;
            sink_received.lock().unwrap().push(Received { env, elapsed_ms });
        }
    });
    let conn = Conn { id: spec.id.clone(), source, seq: Arc::new(AtomicU64::new(1)), tx, received, synced, reader, writer };
    Ok((conn, clock, kernel_ts))
}

/// Round-trips a sync heartbeat through each listed connection in turn.
async fn barrier(conns: &mut [Conn], which: &[usize], token: &mut u64, ts_ms: u64, timeout: Duration) -> Result<(), SimError> {
    for &i in which {
        *token += 1;
        let n = *token;
        conns[i].send(TypeTag::ControlHeartbeat, json!({"sync": n}), ts_ms)?;
        let c = &mut conns[i];
        let fail = |reason: &str| SimError::ConnectionFailed { client: c.id.clone(), reason: reason.into() };
        match tokio::time::timeout(timeout, c.synced.wait_for(|v| *v >= n)).await {
            Ok(Ok(_)) => {}
            Ok(Err(_)) => return Err(fail("connection closed during sync")),
            Err(_) => return Err(fail("sync barrier timed out")),
        }
    }
    Ok(())
}

fn evaluate(script: &ScenarioScript, step: usize, conn: &Conn, mode: ClockMode, base_ms: u64) -> ExpectOutcome {
    let s = &script.steps[step];
    let x = s.expect.as_ref().expect("check refers to an expect step");
    let mut outcome = ExpectOutcome {
        step,
        client: s.client.clone(),
        type_tag: x.type_tag.to_string(),
        contains: x.contains.clone(),
        at_ms: s.at_ms,
        timeout_ms: x.timeout_ms,
        passed: false,
        latency_ms: None,
        note: None,
    };
    if x.timeout_ms == 0 {
        outcome.note = Some("zero timeout".into());
        return outcome;
    }
    let window = s.at_ms..=s.at_ms + x.timeout_ms;
    let received = conn.received.lock().unwrap();
    let hit = received.iter().find_map(|r| {
        let t = match mode {
            ClockMode::Simulated => r.env.ts_ms.checked_sub(base_ms)?,
            ClockMode::Wall => r.elapsed_ms,
        };
        (window.contains(&t) && x.matches(&r.env)).then_some(t)
    });
    match hit {
        Some(t) => {
            outcome.passed = true;
            outcome.latency_ms = Some(t - s.at_ms);
        }
        None => outcome.note = Some(format!("no match within {} ms", x.timeout_ms)),
    }
    outcome
}

/// Connects every scripted client, plays the timeline and evaluates each
/// expectation.
///
/// Under a simulated kernel clock envelopes carry script time offset from
/// [`SIM_EPOCH_MS`] or later, and every instant ends with sync barriers, so the run
/// is independent of wall-clock speed. Otherwise steps are paced in real
/// time.
pub async fn run_scenario(script: &ScenarioScript, server: &str, opts: &RunOptions) -> Result<ScenarioReport, SimError> {
    let fixtures = if opts.fixtures_dir.join("frames").is_dir() {
        FrameFixtures::load(opts.fixtures_dir.join("frames"))
            .map_err(|e| SimError::ScriptError { step: None, reason: e.to_string() })?
    } else {
        FrameFixtures::default()
    };
    let routes = if opts.data_dir.is_dir() {
        DataStore::load(&opts.data_dir).map_err(|e| SimError::ScriptError { step: None, reason: e.to_string() })?.routes
    } else {
        BTreeMap::new()
    };
    let timeline = script.timeline(&fixtures, &routes)?;

    let url = ws_url(server);
    let start = Instant::now();
    let mut conns = Vec::new();
    let mut reported = None;
    let mut kernel_ms = 0;
    for c in &script.clients {
        let (conn, clock, ts) = connect(&url, c, start, SIM_EPOCH_MS).await?;
        reported = reported.or(clock);
        kernel_ms = kernel_ms.max(ts);
        conns.push(conn);
    }
    let base_ms = if kernel_ms > SIM_EPOCH_MS { (kernel_ms / 1000 + 1) * 1000 } else { SIM_EPOCH_MS };
    let mode = opts.clock.unwrap_or(match reported.as_deref() {
        Some("simulated") => ClockMode::Simulated,
        _ => ClockMode::Wall,
    });
    tracing::info!(scenario = %script.name, ?mode, events = timeline.len(), "running scenario");

    let keepalive = (mode == ClockMode::Wall).then(|| {
        let senders: Vec<_> = conns.iter().map(|c| (c.tx.clone(), c.source.clone(), c.seq.clone())).collect();
        let period = opts.keepalive;
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(period);
            loop {
                tick.tick().await;
                for (tx, source, seq) in &senders {
                    let env = Envelope {
                        version: WIRE_VERSION,
                        seq: seq.fetch_add(1, Ordering::SeqCst) + 1,
                        ts_ms: wall_ms(),
                        source: source.clone(),
                        session: None,
                        type_tag: TypeTag::ControlHeartbeat,
                        payload: json!({}),
                    };
                    let _ = tx.send(Message::text(String::from_utf8(encode_envelope(&env)).expect("utf-8")));
                }
            }
        })
    });

    let all: Vec<usize> = (0..conns.len()).collect();
    let mut token = 0u64;
    let mut outcomes = Vec::new();
    let mut i = 0;
    while i < timeline.len() {
        let t = timeline[i].t_ms;
        let mut j = i;
        while j < timeline.len() && timeline[j].t_ms == t {
            j += 1;
        }
        let group = &timeline[i..j];
        if mode == ClockMode::Wall {
            tokio::time::sleep_until((start + Duration::from_millis(t)).into()).await;
        }
        let ts = match mode {
            ClockMode::Simulated => base_ms + t,
            ClockMode::Wall => wall_ms(),
        };
        let mut senders = Vec::new();
        for e in group {
            if let Event::Emit { client, type_tag, payload } = &e.event {
                conns[*client].send(type_tag.clone(), payload.clone(), ts)?;
                if !senders.contains(client) {
                    senders.push(*client);
                }
            }
        }
        if mode == ClockMode::Simulated {
            barrier(&mut conns, &senders, &mut token, ts, opts.sync_timeout).await?;
            barrier(&mut conns, &all, &mut token, ts, opts.sync_timeout).await?;
        }
        for e in group {
            if let Event::Check { step, client } = &e.event {
                outcomes.push(evaluate(script, *step, &conns[*client], mode, base_ms));
            }
        }
        i = j;
    }

    if let Some(k) = keepalive {
        k.abort();
    }
    let mut received = BTreeMap::new();
    for c in conns {
        let n = c
            .received
            .lock()
            .unwrap()
            .iter()
            .filter(|r| r.env.type_tag.namespace() != Some(Namespace::Control))
            .count();
        received.insert(c.id.clone(), n);
        let _ = c.tx.send(Message::Close(None));
        let _ = tokio::time::timeout(Duration::from_secs(2), c.writer).await;
        c.reader.abort();
    }
    outcomes.sort_by_key(|o| o.step);
    let latencies: Vec<u64> = outcomes.iter().filter_map(|o| o.latency_ms).collect();
    Ok(ScenarioReport {
        name: script.name.clone(),
        clock: mode,
        passed: outcomes.iter().all(|o| o.passed),
        latency: LatencyStats::from_samples(&latencies),
        expectations: outcomes,
        received,
    })
}

/// [`run_scenario`] on a private runtime.
pub fn run_scenario_blocking(script: &ScenarioScript, server: &str, opts: &RunOptions) -> Result<ScenarioReport, SimError> {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(|e| SimError::ConnectionFailed { client: String::new(), reason: e.to_string() })?
        .block_on(run_scenario(script, server, opts))
}
