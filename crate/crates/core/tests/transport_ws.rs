use std::net::TcpStream;
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};
use tokio_tungstenite::tungstenite::protocol::frame::coding::CloseCode;
use tokio_tungstenite::tungstenite::stream::MaybeTlsStream;
use tokio_tungstenite::tungstenite::{connect, Message, WebSocket};
use tomk::kernel::{crate_path, Kernel, KernelOptions};
use tomk::message::{decode_envelope, encode_envelope, Envelope, SourceId, TypeTag, WIRE_VERSION};
use tomk::transport::Server;

type Ws = WebSocket<MaybeTlsStream<TcpStream>>;

struct Fixture {
    _dir: tempfile::TempDir,
    kernel: Arc<Kernel>,
    server: Server,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let opts = KernelOptions { record_dir: dir.path().to_path_buf(), ..Default::default() };
        let kernel = Arc::new(Kernel::from_path(crate_path("configs/assistant.json"), opts).unwrap());
        let server = Server::start(kernel.clone(), "127.0.0.1:0".parse().unwrap()).unwrap();
        Self { _dir: dir, kernel, server }
    }

    fn api(&self, path: &str) -> String {
        format!("{}{path}", self.server.http_url())
    }

    fn ws(&self, path: &str) -> Ws {
        let (ws, _) = connect(format!("{}{path}", self.server.ws_url())).unwrap();
        if let MaybeTlsStream::Plain(s) = ws.get_ref() {
            s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
        }
        ws
    }
}

impl Drop for Fixture {
    fn drop(&mut self) {
        self.kernel.shutdown();
    }
}

fn env(client: &str, seq: u64, tag: TypeTag, payload: Value) -> Envelope {
    Envelope {
        version: WIRE_VERSION,
        seq,
        ts_ms: 1_000 + seq,
        source: SourceId::client(client),
        session: None,
        type_tag: tag,
        payload,
    }
}

fn send(ws: &mut Ws, e: &Envelope) {
    ws.send(Message::text(String::from_utf8(encode_envelope(e)).unwrap())).unwrap();
}

fn hello(client: &str, version: u32, inputs: &[&str], outputs: &[&str]) -> Envelope {
    env(
        client,
        1,
        TypeTag::ControlHandshake,
        json!({"client_id": client, "device_kind": "ohmd", "declared_inputs": inputs,
               "declared_outputs": outputs, "protocol_version": version}),
    )
}

/// Next envelope, or the close code if the server closed.
fn recv(ws: &mut Ws) -> Result<Envelope, Option<CloseCode>> {
    loop {
        match ws.read() {
            Ok(Message::Text(t)) => return Ok(decode_envelope(t.as_bytes()).unwrap()),
            Ok(Message::Close(f)) => return Err(f.map(|f| f.code)),
            Ok(_) => continue,
            Err(_) => return Err(None),
        }
    }
}

fn recv_until(ws: &mut Ws, pred: impl Fn(&Envelope) -> bool) -> Envelope {
    loop {
        let e = recv(ws).expect("connection open");
        if pred(&e) {
            return e;
        }
    }
}

fn connect_client(f: &Fixture, id: &str, inputs: &[&str], outputs: &[&str]) -> Ws {
    let mut ws = f.ws("/ws/client");
    send(&mut ws, &hello(id, 1, inputs, outputs));
    let ack = recv(&mut ws).unwrap();
    assert_eq!(ack.type_tag, TypeTag::ControlHandshake);
    assert_eq!(ack.payload["status"], "ok");
    ws
}

#[test]
fn data_before_handshake_is_refused() {
    let f = Fixture::new();
    let mut ws = f.ws("/ws/client");
    send(&mut ws, &env("watch-1", 1, TypeTag::SensorWatch, json!({"heart_rate_bpm": 120, "speed_kmh": 9.0, "calories_kcal": 1})));
    let reply = recv(&mut ws).unwrap();
    assert_eq!(reply.payload["status"], "error");
    assert_eq!(recv(&mut ws).unwrap_err(), Some(CloseCode::Library(4002)));
    assert!(f.server.hub.clients().is_empty());
}

#[test]
fn protocol_version_mismatch_is_refused() {
    let f = Fixture::new();
    let mut ws = f.ws("/ws/client");
    send(&mut ws, &hello("ohmd-1", 2, &["input.voice"], &[]));
    let reply = recv(&mut ws).unwrap();
    assert_eq!(reply.payload["error"], "VersionMismatch");
    assert_eq!(recv(&mut ws).unwrap_err(), Some(CloseCode::Library(4003)));
}

#[test]
fn second_connection_supersedes_the_first() {
    let f = Fixture::new();
    let mut first = connect_client(&f, "ohmd-1", &["input.voice"], &["feedback.display"]);
    let _second = connect_client(&f, "ohmd-1", &["input.voice"], &["feedback.display"]);
    assert_eq!(recv(&mut first).unwrap_err(), Some(CloseCode::Library(4001)));
    let clients = f.server.hub.clients();
    assert_eq!(clients.len(), 1);
    assert_eq!(f.server.hub.metrics_snapshot().superseded, 1);
}

#[test]
fn watch_samples_reach_the_display_client() {
    let f = Fixture::new();
    let mut watch = connect_client(&f, "watch-1", &["sensor.watch"], &[]);
    let mut ohmd = connect_client(&f, "ohmd-1", &["input.voice"], &["feedback.display"]);
    send(&mut ohmd, &env("ohmd-1", 2, TypeTag::InputVoice, json!({"transcript": "let's go for a run"})));
    send(&mut watch, &env("watch-1", 2, TypeTag::SensorWatch, json!({"heart_rate_bpm": 120, "speed_kmh": 9.0, "calories_kcal": 1})));
    let d = recv_until(&mut ohmd, |e| e.type_tag == TypeTag::FeedbackDisplay);
    assert!(d.payload["slots"].as_array().is_some_and(|s| !s.is_empty()));
    assert_eq!(f.kernel.engine.context().active.as_deref(), Some("running_service"));
}

#[test]
fn api_services_and_switching() {
    let f = Fixture::new();
    let http = reqwest::blocking::Client::new();
    let list: Value = http.get(f.api("/api/services")).send().unwrap().json().unwrap();
    let names: Vec<&str> = list.as_array().unwrap().iter().map(|s| s["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["running_service", "translation_service", "query_service"]);
    assert!(list.as_array().unwrap().iter().all(|s| s["active"] == false));

    let r = http.post(f.api("/api/services/active")).json(&json!({"name": "translation_service"})).send().unwrap();
    assert!(r.status().is_success());
    let list: Value = r.json().unwrap();
    assert_eq!(list[1]["active"], true);

    let r = http.post(f.api("/api/services/active")).json(&json!({"name": "karaoke"})).send().unwrap();
    assert_eq!(r.status(), 404);
    assert!(r.json::<Value>().unwrap()["error"].is_string());

    let ctx: Value = http.get(f.api("/api/context")).send().unwrap().json().unwrap();
    assert_eq!(ctx["active"], "translation_service");
    assert_eq!(ctx["history"].as_array().unwrap().len(), 1);
}

#[test]
fn api_clients_metrics_and_inject() {
    let f = Fixture::new();
    let http = reqwest::blocking::Client::new();
    let _ohmd = connect_client(&f, "ohmd-1", &["input.voice"], &["feedback.display"]);
    let clients: Value = http.get(f.api("/api/clients")).send().unwrap().json().unwrap();
    assert_eq!(clients[0]["client_id"], "ohmd-1");
    assert_eq!(clients[0]["device_kind"], "ohmd");

    let body = encode_envelope(&env("console", 1, TypeTag::InputVoice, json!({"transcript": "start running"})));
    let r = http.post(f.api("/api/inject")).body(body).send().unwrap();
    assert!(r.status().is_success(), "{:?}", r.text());
    assert_eq!(f.kernel.engine.context().active.as_deref(), Some("running_service"));

    let r = http.post(f.api("/api/inject")).body("not json").send().unwrap();
    assert_eq!(r.status(), 400);

    let m: Value = http.get(f.api("/api/metrics")).send().unwrap().json().unwrap();
    assert!(m["engine"].is_object());
    assert_eq!(m["transport"]["clients"], 1);
}

#[test]
fn api_record_and_replay() {
    let f = Fixture::new();
    let http = reqwest::blocking::Client::new();
    let start: Value = http.post(f.api("/api/record")).json(&json!({"action": "start"})).send().unwrap().json().unwrap();
    let id = start["session_id"].as_str().unwrap().to_string();
    let again = http.post(f.api("/api/record")).json(&json!({"action": "start"})).send().unwrap();
    assert_eq!(again.status(), 409);

    for seq in 1..=3 {
        let body = encode_envelope(&env("watch-1", seq, TypeTag::SensorWatch,
            json!({"heart_rate_bpm": 120, "speed_kmh": 9.0, "calories_kcal": seq})));
        assert!(http.post(f.api("/api/inject")).body(body).send().unwrap().status().is_success());
    }
    assert!(f.kernel.engine.wait_idle(Duration::from_secs(5)));
    let stop: Value = http.post(f.api("/api/record")).json(&json!({"action": "stop"})).send().unwrap().json().unwrap();
    assert_eq!(stop["sealed"], true);

    let sessions: Value = http.get(f.api("/api/sessions")).send().unwrap().json().unwrap();
    assert_eq!(sessions[0]["session_id"], id.as_str());

    let report: Value = http
        .post(f.api("/api/replay"))
        .json(&json!({"session": id, "speed": 10.0, "mode": "as_fast_as_possible"}))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(report["dispatched"], 3);
    assert_eq!(report["order_preserved"], true);

    let missing = http.post(f.api("/api/replay")).json(&json!({"session": "nope"})).send().unwrap();
    assert_eq!(missing.status(), 404);
    let bad = http.post(f.api("/api/replay")).json(&json!({"session": id, "speed": 0.0})).send().unwrap();
    assert_eq!(bad.status(), 400);
}

#[test]
fn monitor_streams_envelopes() {
    let f = Fixture::new();
    let mut mon = f.ws("/ws/monitor");
    std::thread::sleep(Duration::from_millis(100));
    let http = reqwest::blocking::Client::new();
    let body = encode_envelope(&env("watch-1", 1, TypeTag::SensorWatch, json!({"heart_rate_bpm": 120, "speed_kmh": 9.0, "calories_kcal": 1})));
    assert!(http.post(f.api("/api/inject")).body(body).send().unwrap().status().is_success());
    let seen = recv_until(&mut mon, |e| e.type_tag == TypeTag::SensorWatch);
    assert_eq!(seen.source, SourceId::client("watch-1"));
    let display = recv_until(&mut mon, |e| e.type_tag == TypeTag::FeedbackDisplay);
    assert_eq!(display.source.kind(), tomk::message::SourceKind::Component);
}
