mod support;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader};
use std::net::TcpStream;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, ExitCode, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use support::{coach_oracle, random_dag, reachable, OraclePlan, OracleRules};
use tokio_tungstenite::tungstenite::stream::MaybeTlsStream;
use tokio_tungstenite::tungstenite::{connect, Message, WebSocket};
use tomk::config::{descendant_set, load_config, parse_config, validate_config, ComponentDescriptor, Layer, PipelineConfig};
use tomk::engine::{
    quantile, Component, ComponentError, ComponentRegistry, Emitter, Engine, EngineError, EngineOptions,
    EnvelopeObserver, HandlerBinding,
};
use tomk::kernel::{crate_path, load_dictionary, Kernel, KernelOptions};
use tomk::message::payload::{LayoutDirective, WatchSample};
use tomk::message::{decode_envelope, encode_envelope, Envelope, TypeTag};
use tomk::recording::{read_component, replay, ReplayMode, ReplayOptions};
use tomk::services::coach::{coach_step, summarize_run, CoachSettings, RunningState};
use tomk::services::components::{standard_registry, Resources, ServiceEvent, ServiceMessage};
use tomk::services::domain::{PlanMode, Segment, TrainingPlan, UserProfile};
use tomk::services::ports::{Delay, DictionaryTranslator, EchoModel, FrameFixtures, Ports};
use tomk::sim::{generate_watch_trace, SimulatedTrace, TraceKind};
use tomk::testkit::{envelope, passthrough_registry, pipeline};
use tomk::transport::{Hub, Server};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);
type Ws = WebSocket<MaybeTlsStream<TcpStream>>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($fmt)+));
        }
    };
}

const T0: u64 = 1_700_000_000_000;

fn watch_json(s: &WatchSample) -> Value {
    serde_json::to_value(s).unwrap()
}

// ---------------------------------------------------------------- 1

fn config_conformance() -> Outcome {
    let started = Instant::now();
    let cfg = load_config(crate_path("configs/running.json")).map_err(|e| e.to_string())?;
    ensure!(cfg.components.len() == 5, "expected 5 descriptors, got {}", cfg.components.len());
    let clean = validate_config(&cfg);
    ensure!(clean.is_empty(), "running.json has violations: {clean:?}");

    type Mutation = fn(&mut PipelineConfig);
    let mutations: [(&str, Mutation); 3] = [
        ("DanglingReference", |c| {
            c.components[1].next.push("ghost".into());
        }),
        ("EdgeIntoInput", |c| {
            c.components.push(ComponentDescriptor {
                name: "mic".into(),
                layer: Layer::Input,
                entry_point: "widgets.device.receive".into(),
                exit_point: "widgets.device.stop".into(),
                next: vec![],
            });
            c.components[2].next.push("mic".into());
        }),
        ("Cycle", |c| {
            c.components[3].next.push("running_service".into());
        }),
    ];
    for (rule, mutate) in mutations {
        let mut bad = cfg.clone();
        mutate(&mut bad);
        let rules: Vec<&str> = validate_config(&bad).iter().map(|v| v.rule()).collect();
        ensure!(rules == [rule], "{rule}: validator reported {rules:?}");
        match Engine::new(bad, EngineOptions::default()) {
            Err(EngineError::InvalidConfig(v)) if v.iter().all(|v| v.rule() == rule) => {}
            Err(e) => return Err(format!("{rule}: engine rejected with {e}")),
            Ok(_) => return Err(format!("{rule}: engine accepted the config")),
        }
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!("5 descriptors, 3/3 violations rejected by rule, {elapsed:?}"))
}

// ---------------------------------------------------------------- 2

fn routing_completeness() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x7041);
    let mut dispatches = 0;
    for i in 0..200 {
        let cfg = random_dag(&mut rng, 12);
        let engine = Engine::launch(cfg.clone(), &passthrough_registry(&cfg), EngineOptions::default())
            .map_err(|e| format!("dag {i}: {e}"))?;
        for c in cfg.components.iter().filter(|c| c.layer == Layer::Input) {
            let env = envelope("probe", 1, T0, TypeTag::InputVoice, json!({"transcript": "hi"}));
            let report = engine.dispatch(&c.name, env).map_err(|e| e.to_string())?;
            let got: BTreeSet<String> =
                report.delivered().into_iter().filter(|n| *n != c.name).map(str::to_string).collect();
            let expected = descendant_set(&cfg, &c.name).map_err(|e| e.to_string())?;
            ensure!(got == expected, "dag {i} from {}: delivered {got:?}, descendant_set {expected:?}", c.name);
            let closure = reachable(&cfg, &c.name);
            ensure!(got == closure, "dag {i} from {}: delivered {got:?}, closure {closure:?}", c.name);
            dispatches += 1;
        }
        engine.stop();
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("200 DAGs, {dispatches} dispatches, 100% agreement, {elapsed:?}"))
}

// ---------------------------------------------------------------- 3

#[derive(Default)]
struct SeqWatch {
    last: Mutex<HashMap<(String, String), u64>>,
    violations: Mutex<Vec<String>>,
    seen: Mutex<HashMap<String, u64>>,
}

impl EnvelopeObserver for SeqWatch {
    fn on_handled(&self, component: &str, env: &Arc<Envelope>, _recv_ms: u64) {
        let key = (component.to_string(), env.source.to_string());
        let mut last = self.last.lock().unwrap();
        if let Some(prev) = last.get(&key) {
            if env.seq <= *prev {
                self.violations.lock().unwrap().push(format!("{} {}: {} after {}", key.0, key.1, env.seq, prev));
            }
        }
        last.insert(key, env.seq);
        *self.seen.lock().unwrap().entry(component.to_string()).or_default() += 1;
    }
}

fn ordering_and_conservation() -> Outcome {
    const PER_SOURCE: u64 = 1000;
    let cfg = pipeline(
        "fan-in",
        &[
            ("in_a", Layer::Input, &["merge"]),
            ("in_b", Layer::Input, &["merge"]),
            ("in_c", Layer::Input, &["merge"]),
            ("merge", Layer::Processing, &["svc"]),
            ("svc", Layer::Service, &["out"]),
            ("out", Layer::Output, &[]),
        ],
    );
    let engine = Engine::launch(cfg.clone(), &passthrough_registry(&cfg), EngineOptions::default())
        .map_err(|e| e.to_string())?;
    let watch = Arc::new(SeqWatch::default());
    engine.add_observer(watch.clone());

    let done = Arc::new(AtomicBool::new(false));
    let snapshots = {
        let engine = engine.clone();
        let done = done.clone();
        std::thread::spawn(move || {
            let (mut taken, mut broken) = (0u64, Vec::new());
            while !done.load(Ordering::Acquire) {
                for m in engine.snapshot_metrics().components {
                    if !m.is_conserved() {
                        broken.push(format!("{}: {} != {} + {} + {}", m.name, m.received, m.processed, m.dropped, m.in_flight));
                    }
                }
                taken += 1;
                std::thread::sleep(Duration::from_millis(20));
            }
            (taken, broken)
        })
    };

    let started = Instant::now();
    let producers: Vec<_> = ["in_a", "in_b", "in_c"]
        .into_iter()
        .map(|input| {
            let engine = engine.clone();
            std::thread::spawn(move || -> Result<(), String> {
                let source = format!("src-{input}");
                let t = Instant::now();
                for seq in 1..=PER_SOURCE {
                    let due = Duration::from_millis(seq * 10);
                    if let Some(wait) = due.checked_sub(t.elapsed()) {
                        std::thread::sleep(wait);
                    }
                    let payload = json!({"heart_rate_bpm": 120, "speed_kmh": 9.0, "calories_kcal": seq});
                    let env = envelope(&source, seq, T0 + seq * 10, TypeTag::SensorWatch, payload);
                    engine.inject(input, env).map_err(|e| e.to_string())?;
                }
                Ok(())
            })
        })
        .collect();
    for p in producers {
        p.join().map_err(|_| "producer panicked".to_string())??;
    }
    let send_span = started.elapsed();
    ensure!(engine.wait_idle(Duration::from_secs(10)), "pipeline did not drain");
    done.store(true, Ordering::Release);
    let (taken, broken) = snapshots.join().map_err(|_| "snapshot thread panicked".to_string())?;
    let table = engine.snapshot_metrics();
    engine.stop();

    ensure!(broken.is_empty(), "conservation broken in {} snapshots: {:?}", broken.len(), &broken[..broken.len().min(3)]);
    let violations = watch.violations.lock().unwrap();
    ensure!(violations.is_empty(), "{} order violations: {:?}", violations.len(), &violations[..violations.len().min(3)]);
    let m: BTreeMap<&str, _> = table.components.iter().map(|m| (m.name.as_str(), m)).collect();
    for c in m.values() {
        ensure!(c.dropped == 0, "{} dropped {}", c.name, c.dropped);
        ensure!(c.is_conserved(), "{} not conserved at the end", c.name);
    }
    let inputs_emitted: u64 = ["in_a", "in_b", "in_c"].iter().map(|n| m[n].emitted).sum();
    ensure!(m["merge"].received == inputs_emitted, "merge received {} of {inputs_emitted}", m["merge"].received);
    ensure!(m["svc"].received == m["merge"].emitted, "svc received {} of {}", m["svc"].received, m["merge"].emitted);
    ensure!(m["out"].received == m["svc"].emitted, "out received {} of {}", m["out"].received, m["svc"].emitted);
    ensure!(m["out"].received == 3 * PER_SOURCE, "out received {}", m["out"].received);
    Ok(format!(
        "3x{PER_SOURCE} msgs over {:.1} s, 0 drops, 0 order violations, {taken} conserved snapshots",
        send_span.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 4

fn replay_fidelity() -> Outcome {
    let rec_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let rep_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = crate_path("configs/running.json");

    let recorder = Arc::new(
        Kernel::from_path(
            &config,
            KernelOptions { sim_clock: true, record_dir: rec_dir.path().into(), ..Default::default() },
        )
        .map_err(|e| e.to_string())?,
    );
    let hub = Hub::new(recorder.clone());
    let recorded = recorder.recorder.start_session(&recorder.engine).map_err(|e| e.to_string())?.session_id;
    let trace = SimulatedTrace::new(TraceKind::Ramp { from_kmh: 6.0, to_kmh: 14.0 }, 61.0, 1000);
    for (i, s) in generate_watch_trace(&trace).map_err(|e| e.to_string())?.iter().enumerate() {
        let env = envelope("watch-1", i as u64 + 1, T0 + i as u64 * 1000, TypeTag::SensorWatch, watch_json(s));
        hub.handle_inbound(env, None).map_err(|e| e.to_string())?;
    }
    ensure!(recorder.engine.wait_idle(Duration::from_secs(10)), "recording kernel did not drain");
    recorder.recorder.stop_session().map_err(|e| e.to_string())?;
    recorder.shutdown();

    let target = Kernel::from_path(&config, KernelOptions { record_dir: rep_dir.path().into(), ..Default::default() })
        .map_err(|e| e.to_string())?;
    let replayed = target.recorder.start_session(&target.engine).map_err(|e| e.to_string())?.session_id;
    let report = replay(rec_dir.path(), &recorded, &target.engine, ReplayOptions { speed: 4.0, mode: ReplayMode::Timed })
        .map_err(|e| e.to_string())?;
    ensure!(target.engine.wait_idle(Duration::from_secs(10)), "replay kernel did not drain");
    target.recorder.stop_session().map_err(|e| e.to_string())?;
    target.shutdown();

    ensure!(report.failures.is_empty(), "replay failures: {:?}", report.failures);
    ensure!(report.recorded_span_ms == 60_000, "recorded span {} ms", report.recorded_span_ms);
    let (lo, hi) = (15_000.0 * 0.95, 15_000.0 * 1.05);
    let wall = report.wall_ms as f64;
    ensure!((lo..=hi).contains(&wall), "replay took {wall} ms, outside [{lo}, {hi}]");
    ensure!(report.order_preserved, "replay reported per-source order change");

    let mut compared = 0;
    for comp in ["camera", "yolov8", "running_service", "layout", "websocket_out"] {
        let a = read_component(rec_dir.path(), &recorded, comp).map_err(|e| e.to_string())?;
        let b = read_component(rep_dir.path(), &replayed, comp).map_err(|e| e.to_string())?;
        let strip = |entries: &[tomk::recording::RecordEntry]| -> Vec<(String, String, u64, Vec<u8>)> {
            entries
                .iter()
                .map(|e| {
                    let env = &e.envelope;
                    (env.type_tag.to_string(), env.source.to_string(), env.seq, serde_json::to_vec(&env.payload).unwrap())
                })
                .collect()
        };
        let (sa, sb) = (strip(&a), strip(&b));
        ensure!(!sa.is_empty(), "{comp}: nothing recorded");
        ensure!(sa.len() == sb.len(), "{comp}: {} recorded vs {} replayed", sa.len(), sb.len());
        if let Some(i) = (0..sa.len()).find(|&i| sa[i] != sb[i]) {
            return Err(format!(
                "{comp}: entry {i} differs:\n  {}\n  {}",
                String::from_utf8_lossy(&sa[i].3),
                String::from_utf8_lossy(&sb[i].3)
            ));
        }
        compared += sa.len();
    }
    Ok(format!("61 samples over 60 s replayed in {wall} ms at 4x, {compared} entries byte-identical, order preserved"))
}

// ---------------------------------------------------------------- 5

#[derive(Default)]
struct Collector(Mutex<Vec<Arc<Envelope>>>);

impl EnvelopeObserver for Collector {
    fn on_handled(&self, component: &str, env: &Arc<Envelope>, _recv_ms: u64) {
        if component == "websocket_out" {
            self.0.lock().unwrap().push(env.clone());
        }
    }
}

const COACH_PIPELINE: &str = r#"{
  "name": "coach",
  "components": [
    {"name": "watch", "layer": "input", "entry_point": "widgets.watch.receive", "exit_point": "widgets.watch.stop", "next": ["running_service"]},
    {"name": "running_service", "layer": "service", "entry_point": "running_service.on_data", "exit_point": "running_service.stop", "next": ["websocket_out"]},
    {"name": "websocket_out", "layer": "output", "entry_point": "websocket_out.send", "exit_point": "websocket_out.stop", "next": []}
  ]
}"#;

fn random_trace(rng: &mut ChaCha8Rng, i: usize) -> SimulatedTrace {
    let kind = match i % 4 {
        0 => TraceKind::Constant { speed_kmh: rng.random_range(6.0..14.0) },
        1 => TraceKind::Ramp { from_kmh: rng.random_range(4.0..16.0), to_kmh: rng.random_range(4.0..16.0) },
        2 => TraceKind::Triangular { peak_kmh: rng.random_range(6.0..20.0) },
        _ => TraceKind::Noisy {
            base_kmh: rng.random_range(7.0..13.0),
            sigma_kmh: rng.random_range(0.0..3.0),
            seed: rng.random(),
        },
    };
    let period = [500, 1000, 2000][rng.random_range(0..3)];
    SimulatedTrace::new(kind, rng.random_range(60..=900) as f64, period)
}

fn random_plan(rng: &mut ChaCha8Rng) -> (TrainingPlan, OraclePlan) {
    match rng.random_range(0..3) {
        0 => (TrainingPlan::free_run(3600.0), OraclePlan::Timed(vec![(3600.0, None)])),
        1 => {
            let segs: Vec<(f64, Option<f64>)> = (0..rng.random_range(1..5))
                .map(|_| {
                    let target = rng.random_bool(0.7).then(|| rng.random_range(6.0..14.0));
                    (rng.random_range(20..300) as f64, target)
                })
                .collect();
            let plan = TrainingPlan {
                name: "segments".into(),
                mode: PlanMode::Speed,
                segments: segs
                    .iter()
                    .map(|(d, t)| Segment { duration_s: Some(*d), distance_m: None, target_speed_kmh: *t })
                    .collect(),
                route: None,
            };
            (plan, OraclePlan::Timed(segs))
        }
        _ => {
            let m = rng.random_range(200..2500) as f64;
            let plan = TrainingPlan {
                name: "distance".into(),
                mode: PlanMode::Distance,
                segments: vec![Segment { duration_s: None, distance_m: Some(m), target_speed_kmh: None }],
                route: None,
            };
            (plan, OraclePlan::Distance(m))
        }
    }
}

fn coach_equivalence() -> Outcome {
    let cfg = parse_config(COACH_PIPELINE).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0AC);
    let (mut instructions, mut exhausted_runs) = (0usize, 0usize);
    for i in 0..1000 {
        let trace = random_trace(&mut rng, i);
        let (plan, oracle_plan) = random_plan(&mut rng);
        let samples = generate_watch_trace(&trace).map_err(|e| e.to_string())?;
        let timed: Vec<(u64, f64)> =
            samples.iter().enumerate().map(|(k, s)| (T0 + k as u64 * trace.period_ms, s.speed_kmh)).collect();

        let ports = Ports::mock(Arc::new(FrameFixtures::default()), BTreeMap::new());
        let res = Arc::new(Resources::new(UserProfile::default(), plan, ports));
        let engine =
            Engine::launch(cfg.clone(), &standard_registry(&res), EngineOptions::default()).map_err(|e| e.to_string())?;
        let seen = Arc::new(Collector::default());
        engine.add_observer(seen.clone());
        for (k, s) in samples.iter().enumerate() {
            let env = envelope("watch-1", k as u64 + 1, timed[k].0, TypeTag::SensorWatch, watch_json(s));
            engine.inject("watch", env).map_err(|e| e.to_string())?;
        }
        ensure!(engine.wait_idle(Duration::from_secs(30)), "trace {i}: engine did not drain");
        let events: Vec<ServiceMessage> =
            seen.0.lock().unwrap().iter().filter_map(|e| e.payload_as::<ServiceMessage>()).collect();
        engine.stop();

        let mut got = Vec::new();
        let mut summary_at = None;
        for m in events {
            match m.event {
                ServiceEvent::Coach { instruction } => got.push((instruction.ts_ms, instruction.kind)),
                ServiceEvent::Summary { instruction, .. } if summary_at.is_none() => summary_at = Some(instruction.ts_ms),
                _ => {}
            }
        }
        let (want, exhausted) = coach_oracle(&oracle_plan, &OracleRules::default(), &timed);
        let want_summary = exhausted.map(|k| timed[k].0);
        ensure!(got == want, "trace {i} ({trace:?}): engine {got:?}\n oracle {want:?}");
        ensure!(summary_at == want_summary, "trace {i}: summary at {summary_at:?}, oracle {want_summary:?}");
        instructions += got.len();
        exhausted_runs += exhausted.is_some() as usize;
    }
    Ok(format!("1000 traces, {instructions} instructions, {exhausted_runs} plan completions, 100% agreement"))
}

// ---------------------------------------------------------------- 6

/// Integral of peak*(1 - |t - h| / h) over [0, t_end], in km/h * s.
fn triangle_integral(peak: f64, h: f64, t_end: f64) -> f64 {
    let rising = |t: f64| peak * t * t / (2.0 * h);
    if t_end <= h {
        rising(t_end)
    } else {
        let u = t_end - h;
        rising(h) + peak * u - peak * u * u / (2.0 * h)
    }
}

fn summary_identities() -> Outcome {
    let cases = [
        TraceKind::Constant { speed_kmh: 8.0 },
        TraceKind::Constant { speed_kmh: 10.5 },
        TraceKind::Constant { speed_kmh: 13.7 },
        TraceKind::Triangular { peak_kmh: 12.0 },
        TraceKind::Triangular { peak_kmh: 16.0 },
        TraceKind::Triangular { peak_kmh: 9.3 },
    ];
    let mut worst: f64 = 0.0;
    let mut runs = 0;
    for kind in cases {
        for (duration, period) in [(600.0, 1000), (1800.0, 500), (601.0, 2000), (3000.0, 1000)] {
            let trace = SimulatedTrace::new(kind.clone(), duration, period);
            let samples = generate_watch_trace(&trace).map_err(|e| e.to_string())?;
            let plan = TrainingPlan::free_run(duration + 60.0);
            let (profile, settings) = (UserProfile::default(), CoachSettings::default());
            let mut rs = RunningState::default();
            for (k, s) in samples.iter().enumerate() {
                coach_step(&mut rs, &plan, &profile, s, T0 + k as u64 * period, &settings).map_err(|e| e.to_string())?;
            }
            let summary = summarize_run(&rs).map_err(|e| e.to_string())?;
            let span_s = (samples.len() - 1) as f64 * period as f64 / 1000.0;
            let closed_m = match kind {
                TraceKind::Constant { speed_kmh } => speed_kmh * span_s / 3.6,
                TraceKind::Triangular { peak_kmh } => triangle_integral(peak_kmh, duration / 2.0, span_s) / 3.6,
                _ => unreachable!(),
            };
            let rel = (summary.distance_m - closed_m).abs() / closed_m;
            ensure!(rel <= 1e-3, "{kind:?} {duration}s/{period}ms: {} m vs closed form {closed_m} m", summary.distance_m);
            ensure!(summary.duration_s == span_s, "{kind:?}: duration {} vs span {span_s}", summary.duration_s);
            let avg = 3.6 * summary.distance_m / summary.duration_s;
            ensure!(summary.avg_speed_kmh == avg, "{kind:?}: avg {} != 3.6*d/t {avg}", summary.avg_speed_kmh);
            worst = worst.max(rel);
            runs += 1;
        }
    }
    Ok(format!("{runs} runs, worst distance error {:.2e} (limit 1e-3), avg exactly 3.6*d/t", worst))
}

// ---------------------------------------------------------------- 7

#[derive(Debug, Clone, PartialEq)]
enum Logged {
    Recv(String),
    Exit(String),
}

struct Logging {
    name: String,
    log: Arc<Mutex<Vec<Logged>>>,
}

impl Component for Logging {
    fn on_envelope(&mut self, env: &Arc<Envelope>, out: &mut Emitter<'_>) -> Result<(), ComponentError> {
        self.log.lock().unwrap().push(Logged::Recv(self.name.clone()));
        out.forward(env.clone());
        Ok(())
    }

    fn on_exit(&mut self, _out: &mut Emitter<'_>) -> Result<(), ComponentError> {
        std::thread::sleep(Duration::from_millis(5));
        self.log.lock().unwrap().push(Logged::Exit(self.name.clone()));
        Ok(())
    }
}

const EXPECTED_TRACE: [Option<&str>; 4] = [Some("running_service"), Some("translation_service"), Some("query_service"), None];
const COMMANDS: [&str; 4] = ["start running", "translate the menu", "what is this", "stop"];

fn exclusivity_in_engine() -> Result<usize, String> {
    let cfg = load_config(crate_path("configs/assistant.json")).map_err(|e| e.to_string())?;
    let log = Arc::new(Mutex::new(Vec::new()));
    let mut reg = ComponentRegistry::new();
    for c in &cfg.components {
        let log = log.clone();
        reg.register(HandlerBinding::new(&c.entry_point, &c.exit_point, move |d| {
            Box::new(Logging { name: d.name.clone(), log: log.clone() })
        }));
    }
    let engine = Engine::launch(cfg, &reg, EngineOptions::default()).map_err(|e| e.to_string())?;
    let services = engine.context().services;
    let mut seq = 0;
    let mut send = |at: &str, tag: TypeTag, payload: Value| -> Result<(), String> {
        seq += 1;
        engine.dispatch(at, envelope("ohmd-1", seq, T0 + seq * 100, tag, payload)).map(|_| ()).map_err(|e| e.to_string())
    };
    let frame = json!({"data_b64": "AAAA", "width": 1, "height": 1, "format": "rgb8"});
    let watch = json!({"heart_rate_bpm": 130, "speed_kmh": 9.0, "calories_kcal": 1});
    let mut trace = Vec::new();
    for (i, cmd) in COMMANDS.iter().enumerate() {
        send("voice", TypeTag::InputVoice, json!({"transcript": cmd}))?;
        trace.push(engine.context().active);
        for _ in 0..3 {
            send("watch", TypeTag::SensorWatch, watch.clone())?;
            send("camera", TypeTag::SensorCameraFrame, frame.clone())?;
            send("pointer", TypeTag::InputGaze, json!({"x": 1, "y": 1, "dwell_ms": 2000 + i}))?;
            send("voice", TypeTag::InputVoice, json!({"transcript": "hmm"}))?;
        }
    }
    let history = engine.context().history.len();
    engine.stop();
    let expected: Vec<Option<String>> = EXPECTED_TRACE.iter().map(|s| s.map(str::to_string)).collect();
    ensure!(trace == expected, "engine trace {trace:?}");
    ensure!(history == 4, "engine history has {history} entries");

    let log = log.lock().unwrap();
    let mut live: Option<&str> = None;
    let mut received: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, ev) in log.iter().enumerate() {
        match ev {
            Logged::Recv(s) if services.contains(s) => {
                match live {
                    None => live = Some(s),
                    Some(l) if l == s => {}
                    Some(l) => return Err(format!("log #{i}: {s} received while {l} had not exited")),
                }
                *received.entry(s).or_default() += 1;
            }
            Logged::Exit(s) if services.contains(s) && live == Some(s.as_str()) => live = None,
            _ => {}
        }
    }
    for s in &services {
        ensure!(received.get(s.as_str()).copied().unwrap_or(0) > 0, "{s} never received while active");
        let exits = log.iter().filter(|e| **e == Logged::Exit(s.clone())).count();
        ensure!(exits >= 1, "{s} was switched out without an exit call");
    }
    Ok(log.len())
}

fn ws_connect(url: &str, client: &str, kind: &str, inputs: &[&str], outputs: &[&str]) -> Result<Ws, String> {
    let (mut ws, _) = connect(format!("{url}/ws/client")).map_err(|e| e.to_string())?;
    if let MaybeTlsStream::Plain(s) = ws.get_ref() {
        s.set_read_timeout(Some(Duration::from_secs(15))).map_err(|e| e.to_string())?;
        s.set_nodelay(true).map_err(|e| e.to_string())?;
    }
    let hello = json!({"client_id": client, "device_kind": kind, "declared_inputs": inputs,
                       "declared_outputs": outputs, "protocol_version": 1});
    ws_send(&mut ws, client, 1, TypeTag::ControlHandshake, hello, now_ms())?;
    loop {
        let env = ws_recv(&mut ws)?;
        if env.type_tag == TypeTag::ControlHandshake {
            return Ok(ws);
        }
    }
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).unwrap().as_millis() as u64
}

fn ws_send(ws: &mut Ws, client: &str, seq: u64, tag: TypeTag, payload: Value, ts: u64) -> Result<(), String> {
    let env = envelope(client, seq, ts, tag, payload);
    let text = String::from_utf8(encode_envelope(&env)).unwrap();
    ws.send(Message::text(text)).map_err(|e| e.to_string())
}

fn ws_recv(ws: &mut Ws) -> Result<Envelope, String> {
    loop {
        match ws.read().map_err(|e| e.to_string())? {
            Message::Text(t) => return decode_envelope(t.as_bytes()).map_err(|e| e.to_string()),
            Message::Close(f) => return Err(format!("closed: {f:?}")),
            _ => {}
        }
    }
}

fn switch_latency_over_ws() -> Result<Vec<Duration>, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let kernel = Arc::new(
        Kernel::from_path(
            crate_path("configs/assistant.json"),
            KernelOptions { record_dir: dir.path().into(), ..Default::default() },
        )
        .map_err(|e| e.to_string())?,
    );
    let server = Server::start(kernel.clone(), "127.0.0.1:0".parse().unwrap()).map_err(|e| e.to_string())?;
    let result = (|| {
        let mut ws = ws_connect(&server.ws_url(), "ohmd-1", "ohmd", &["input.voice"], &["feedback.display"])?;
        let mut took = Vec::new();
        for (i, (cmd, want)) in COMMANDS.iter().zip(EXPECTED_TRACE).enumerate() {
            let t = Instant::now();
            ws_send(&mut ws, "ohmd-1", i as u64 + 2, TypeTag::InputVoice, json!({"transcript": cmd}), now_ms())?;
            loop {
                let ctx = kernel.engine.context();
                if ctx.active.as_deref() == want && ctx.history.len() == i + 1 {
                    break;
                }
                if t.elapsed() > Duration::from_secs(2) {
                    return Err(format!("{cmd:?}: active is {:?}", ctx.active));
                }
                std::thread::sleep(Duration::from_micros(200));
            }
            took.push(t.elapsed());
            std::thread::sleep(Duration::from_millis(50));
        }
        let history = kernel.engine.context().history.len();
        ensure!(history == 4, "kernel history has {history} entries");
        Ok(took)
    })();
    server.shutdown();
    kernel.shutdown();
    result
}

fn context_switching() -> Outcome {
    let logged = exclusivity_in_engine()?;
    let took = switch_latency_over_ws()?;
    let worst = took.iter().max().copied().unwrap_or_default();
    ensure!(worst < Duration::from_millis(100), "slowest switch took {worst:?}");
    Ok(format!("trace [running, translation, query, idle], 4 history entries, exit-before-receive over {logged} events, slowest switch {worst:?}"))
}

// ---------------------------------------------------------------- 8

fn port_isolation() -> Outcome {
    const QUERIES: usize = 3;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fixtures = Arc::new(FrameFixtures::load(crate_path("fixtures/frames")).map_err(|e| e.to_string())?);
    let dictionary = load_dictionary(&crate_path("fixtures")).map_err(|e| e.to_string())?;
    let model_delay = Delay::uniform(2000, 8000, 8);
    let mut ports = Ports::mock(fixtures.clone(), dictionary.clone());
    ports.model = Arc::new(EchoModel::new(model_delay.clone()));
    ports.translator = Arc::new(DictionaryTranslator::new(dictionary, Delay::uniform(2000, 8000, 9)));
    let kernel = Arc::new(
        Kernel::from_path(
            crate_path("configs/assistant.json"),
            KernelOptions { record_dir: dir.path().into(), prebuilt_ports: Some(ports), ..Default::default() },
        )
        .map_err(|e| e.to_string())?,
    );
    let server = Server::start(kernel.clone(), "127.0.0.1:0".parse().unwrap()).map_err(|e| e.to_string())?;
    let url = server.ws_url();
    let shelf = serde_json::to_value(fixtures.frame("shelf").ok_or("no shelf fixture")?).unwrap();

    let stop = Arc::new(AtomicBool::new(false));
    let watch = {
        let (url, stop) = (url.clone(), stop.clone());
        std::thread::spawn(move || -> Result<Vec<u64>, String> {
            let mut ws = ws_connect(&url, "watch-1", "watch", &["sensor.watch"], &["feedback.display"])?;
            let mut latencies = Vec::new();
            let mut last_ts = 0;
            let mut seq = 1;
            while !stop.load(Ordering::Acquire) {
                let tick = Instant::now();
                let ts = now_ms().max(last_ts + 1);
                last_ts = ts;
                seq += 1;
                let payload = json!({"heart_rate_bpm": 140, "speed_kmh": 9.5, "calories_kcal": seq});
                ws_send(&mut ws, "watch-1", seq, TypeTag::SensorWatch, payload, ts)?;
                loop {
                    let env = ws_recv(&mut ws)?;
                    let basis = env.payload_as::<LayoutDirective>().and_then(|d| d.basis_ts_ms);
                    if env.type_tag == TypeTag::FeedbackDisplay && basis == Some(ts) {
                        latencies.push(tick.elapsed().as_micros() as u64);
                        break;
                    }
                }
                if let Some(rest) = Duration::from_millis(50).checked_sub(tick.elapsed()) {
                    std::thread::sleep(rest);
                }
            }
            Ok(latencies)
        })
    };

    let queries = (|| -> Result<Vec<u64>, String> {
        let mut ws = ws_connect(
            &url,
            "ohmd-1",
            "ohmd",
            &["input.voice", "input.gaze", "sensor.camera_frame"],
            &["feedback.display", "feedback.audio"],
        )?;
        let mut seq = 1;
        let mut send = |ws: &mut Ws, tag: TypeTag, payload: Value| {
            seq += 1;
            ws_send(ws, "ohmd-1", seq, tag, payload, now_ms())
        };
        send(&mut ws, TypeTag::InputVoice, json!({"transcript": "what is this"}))?;
        send(&mut ws, TypeTag::SensorCameraFrame, shelf.clone())?;
        send(&mut ws, TypeTag::InputGaze, json!({"x": 10, "y": 20, "dwell_ms": 1800}))?;
        std::thread::sleep(Duration::from_millis(300));
        let mut latencies = Vec::new();
        for _ in 0..QUERIES {
            let t = Instant::now();
            send(&mut ws, TypeTag::InputVoice, json!({"transcript": "tell me about this"}))?;
            loop {
                let env = ws_recv(&mut ws)?;
                let text = env.payload.get("text").and_then(Value::as_str).unwrap_or_default();
                if env.type_tag == TypeTag::FeedbackAudio && text.starts_with("About the") {
                    latencies.push(t.elapsed().as_millis() as u64);
                    break;
                }
            }
        }
        Ok(latencies)
    })();
    stop.store(true, Ordering::Release);
    let watch = watch.join().map_err(|_| "watch client panicked".to_string());
    server.shutdown();
    kernel.shutdown();

    let answers = queries?;
    let mut watch = watch??;
    let delays = model_delay.history();
    ensure!(delays.len() == QUERIES, "model port called {} times", delays.len());
    for (i, (got, want)) in answers.iter().zip(&delays).enumerate() {
        let off = *got as i64 - *want as i64;
        ensure!(off.abs() <= 200, "answer {i}: {got} ms vs configured delay {want} ms");
    }
    ensure!(watch.len() >= 100, "only {} watch displays", watch.len());
    watch.sort_unstable();
    let p95 = quantile(&watch, 0.95);
    ensure!(p95 < 50_000, "watch display p95 {} us", p95);
    Ok(format!(
        "answers {answers:?} ms vs delays {delays:?} ms; {} watch displays, p95 {:.2} ms",
        watch.len(),
        p95 as f64 / 1000.0
    ))
}

// ---------------------------------------------------------------- 9

fn scenario_suite() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let bin = env!("CARGO_BIN_EXE_tomk");
    let root = crate_path("");
    let mut server = Command::new(bin)
        .current_dir(&root)
        .args(["run", "--config", "configs/assistant.json", "--sim-clock", "--host", "127.0.0.1", "--port", "0"])
        .arg("--record-dir")
        .arg(dir.path())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| e.to_string())?;
    let result = (|| {
        let mut line = String::new();
        BufReader::new(server.stdout.take().ok_or("no stdout")?).read_line(&mut line).map_err(|e| e.to_string())?;
        let addr = line
            .strip_prefix("tomk listening on ")
            .and_then(|rest| rest.split_whitespace().next())
            .ok_or_else(|| format!("unexpected banner {line:?}"))?
            .to_string();
        let mut reports: BTreeMap<&str, Vec<String>> = BTreeMap::new();
        for round in 0..2 {
            for name in ["running", "translation", "query"] {
                let out = Command::new(bin)
                    .current_dir(&root)
                    .args(["sim", "--script", &format!("scenarios/{name}.json"), "--json"])
                    .args(["--server", &format!("ws://{addr}")])
                    .stderr(Stdio::null())
                    .output()
                    .map_err(|e| e.to_string())?;
                let stdout = String::from_utf8_lossy(&out.stdout).to_string();
                ensure!(out.status.success(), "round {round} {name} failed:\n{stdout}");
                reports.entry(name).or_default().push(stdout);
            }
        }
        for (name, runs) in &reports {
            ensure!(runs[0] == runs[1], "{name}: reports differ between runs:\n{}\n---\n{}", runs[0], runs[1]);
        }
        Ok(format!("running, translation, query pass twice on one kernel ({addr}); reports identical"))
    })();
    let _ = server.kill();
    let _ = server.wait();
    result
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("config conformance", config_conformance),
        ("routing completeness", routing_completeness),
        ("ordering and conservation", ordering_and_conservation),
        ("replay fidelity", replay_fidelity),
        ("coach oracle equivalence", coach_equivalence),
        ("summary identities", summary_identities),
        ("context switching", context_switching),
        ("slow port isolation", port_isolation),
        ("scenario suite", scenario_suite),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} {name}: PASS ({secs:.1} s) {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL ({secs:.1} s) {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
