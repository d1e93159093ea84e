//! Starts a kernel with the transport, connects a watch client over
//! WebSocket and queries the HTTP API.
//!
//! ```text
//! cargo run --example kernel_server
//! ```

use std::sync::Arc;
use std::time::Duration;

use serde_json::json;
use tokio_tungstenite::tungstenite::{connect, Message};
use tomk::kernel::{crate_path, Kernel, KernelOptions};
use tomk::message::{decode_envelope, encode_envelope, TypeTag};
use tomk::testkit::envelope;
use tomk::transport::Server;

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let opts = KernelOptions { record_dir: dir.path().into(), ..Default::default() };
    let kernel = Arc::new(Kernel::from_path(crate_path("configs/assistant.json"), opts).expect("kernel"));
    let server = Server::start(kernel.clone(), "127.0.0.1:0".parse().unwrap()).expect("bind");
    println!("listening on {}", server.local_addr());

    let (mut ws, _) = connect(format!("{}/ws/client", server.ws_url())).expect("connect");
    let send = |ws: &mut tokio_tungstenite::tungstenite::WebSocket<_>, seq, tag, payload| {
        let env = envelope("watch-1", seq, 1_000 * seq, tag, payload);
        ws.send(Message::text(String::from_utf8(encode_envelope(&env)).unwrap())).unwrap();
    };
    send(
        &mut ws,
        1,
        TypeTag::ControlHandshake,
        json!({"client_id": "watch-1", "device_kind": "watch", "declared_inputs": ["sensor.watch", "input.voice"],
               "declared_outputs": ["feedback.display"], "protocol_version": 1}),
    );
    send(&mut ws, 2, TypeTag::InputVoice, json!({"transcript": "start running"}));
    for seq in 3..8 {
        send(&mut ws, seq, TypeTag::SensorWatch, json!({"heart_rate_bpm": 150, "speed_kmh": 7.0, "calories_kcal": seq}));
    }

    let mut displays = 0;
    while displays < 5 {
        let Ok(Message::Text(t)) = ws.read() else { continue };
        let env = decode_envelope(t.as_bytes()).expect("valid frame");
        if env.type_tag == TypeTag::FeedbackDisplay {
            displays += 1;
            println!("display: {}", env.payload["slots"]);
        } else {
            println!("{}: {}", env.type_tag, env.payload);
        }
    }

    std::thread::sleep(Duration::from_millis(100));
    let http = reqwest::blocking::Client::new();
    for path in ["/api/services", "/api/clients", "/api/context"] {
        let body: serde_json::Value = http.get(format!("{}{path}", server.http_url())).send().unwrap().json().unwrap();
        println!("GET {path}: {body}");
    }
    let _ = ws.close(None);
    server.shutdown();
    kernel.shutdown();
}
