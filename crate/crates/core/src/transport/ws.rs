use std::sync::Arc;

use axum::extract::ws::{CloseFrame, Message, Utf8Bytes, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use serde_json::json;

use super::{
    ClientEntry, CloseReason, Hub, Outgoing, CLOSE_HANDSHAKE_REQUIRED, CLOSE_HANDSHAKE_TIMEOUT, CLOSE_VERSION_MISMATCH,
    HANDSHAKE_TIMEOUT, PROTOCOL_VERSION,
};
use crate::message::payload::{Handshake, HandshakeMessage};
use crate::message::{decode_envelope, TypeTag};

pub(super) fn routes() -> Router<Arc<Hub>> {
    Router::new().route("/ws/client", get(client_upgrade)).route("/ws/monitor", get(monitor_upgrade))
}

async fn client_upgrade(ws: WebSocketUpgrade, State(hub): State<Arc<Hub>>) -> Response {
    ws.max_message_size(8 << 20).on_upgrade(move |socket| client_session(hub, socket))
}

async fn monitor_upgrade(ws: WebSocketUpgrade, State(hub): State<Arc<Hub>>) -> Response {
    ws.on_upgrade(move |socket| monitor_session(hub, socket))
}

fn close_msg(code: u16, reason: &str) -> Message {
    Message::Close(Some(CloseFrame { code, reason: Utf8Bytes::from(reason) }))
}

fn reply_error(hub: &Hub, error: &str) -> Message {
    let frame = hub.control_frame(TypeTag::ControlHandshake, json!({"status": "error", "error": error}));
    Message::Text(Utf8Bytes::from(frame.as_ref()))
}

/// Reads the first frame and checks it is a v1 handshake.
async fn await_handshake(hub: &Hub, socket: &mut WebSocket) -> Result<Handshake, (u16, &'static str)> {
    let first = match tokio::time::timeout(HANDSHAKE_TIMEOUT, socket.next()).await {
        Err(_) => return Err((CLOSE_HANDSHAKE_TIMEOUT, "HandshakeTimeout")),
        Ok(None | Some(Err(_))) => return Err((CLOSE_HANDSHAKE_REQUIRED, "HandshakeRequired")),
        Ok(Some(Ok(m))) => m,
    };
    let bytes = match &first {
        Message::Text(t) => t.as_bytes().to_vec(),
        Message::Binary(b) => b.to_vec(),
        _ => return Err((CLOSE_HANDSHAKE_REQUIRED, "HandshakeRequired")),
    };
    let hello = decode_envelope(&bytes)
        .ok()
        .filter(|e| e.type_tag == TypeTag::ControlHandshake)
        .and_then(|e| e.payload_as::<HandshakeMessage>());
    match hello {
        Some(HandshakeMessage::Hello(h)) if h.protocol_version == PROTOCOL_VERSION => {
            if h.declared_inputs.is_empty() && h.declared_outputs.is_empty() {
                return Err((CLOSE_HANDSHAKE_REQUIRED, "EmptyDeclaration"));
            }
            Ok(h)
        }
        Some(HandshakeMessage::Hello(_)) => {
            hub.metrics.rejected.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            Err((CLOSE_VERSION_MISMATCH, "VersionMismatch"))
        }
        _ => Err((CLOSE_HANDSHAKE_REQUIRED, "HandshakeRequired")),
    }
}

async fn client_session(hub: Arc<Hub>, mut socket: WebSocket) {
    let hello = match await_handshake(&hub, &mut socket).await {
        Ok(h) => h,
        Err((code, reason)) => {
            tracing::info!(reason, "handshake rejected");
            let _ = socket.send(reply_error(&hub, reason)).await;
            let _ = socket.send(close_msg(code, reason)).await;
            return;
        }
    };
    let entry = hub.register(&hello);
    let session = hub.kernel.recorder.active_session().map(|s| s.0);
    let clock = if hub.kernel.sim_clock.is_some() { "simulated" } else { "wall" };
    let ack = hub.control_frame(
        TypeTag::ControlHandshake,
        json!({"status": "ok", "client_id": hello.client_id, "session": session, "clock": clock}),
    );
    entry.queue.push(ack, false);

    let (mut sink, mut stream) = socket.split();
    let queue = entry.queue.clone();
    let mut writer = tokio::spawn(async move {
        loop {
            match queue.next().await {
                Outgoing::Frame(f) => {
                    if sink.send(Message::Text(Utf8Bytes::from(f.as_ref()))).await.is_err() {
                        return;
                    }
                }
                Outgoing::Close(reason) => {
                    let msg = match reason {
                        Some(CloseReason { code, reason }) => close_msg(code, &reason),
                        None => Message::Close(None),
                    };
                    let _ = sink.send(msg).await;
                    return;
                }
            }
        }
    });

    loop {
        tokio::select! {
            _ = &mut writer => break,
            msg = stream.next() => match msg {
                Some(Ok(Message::Text(t))) => on_frame(&hub, &entry, t.as_bytes().to_vec()).await,
                Some(Ok(Message::Binary(b))) => on_frame(&hub, &entry, b.to_vec()).await,
                Some(Ok(Message::Ping(_) | Message::Pong(_))) => entry.touch(hub.now_ms()),
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
            },
        }
    }
    hub.deregister(&hello.client_id, entry.conn_id);
    entry.queue.close(None);
    let _ = writer.await;
    tracing::info!(client = %hello.client_id, "client disconnected");
}

async fn on_frame(hub: &Arc<Hub>, entry: &Arc<ClientEntry>, bytes: Vec<u8>) {
    entry.touch(hub.now_ms());
    let env = match decode_envelope(&bytes) {
        Ok(e) => e,
        Err(e) => {
            hub.metrics.rejected.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            tracing::debug!(error = %e, "undecodable frame");
            return;
        }
    };
    // inject may block on backpressure; stay on this task to keep per-connection order
    let result = tokio::task::block_in_place(|| hub.handle_inbound(env, Some(entry)));
    if let Err(e) = result {
        tracing::debug!(error = %e, "inbound frame not dispatched");
    }
}

async fn monitor_session(hub: Arc<Hub>, socket: WebSocket) {
    let mut rx = hub.subscribe_monitor();
    let (mut sink, mut stream) = socket.split();
    loop {
        tokio::select! {
            frame = rx.recv() => match frame {
                Ok(f) => {
                    if sink.send(Message::Text(Utf8Bytes::from(f.as_ref()))).await.is_err() {
                        break;
                    }
                }
                Err(tokio::sync::broadcast::error::RecvError::Lagged(n)) => {
                    tracing::debug!(skipped = n, "monitor subscriber lagging");
                }
                Err(_) => break,
            },
            msg = stream.next() => match msg {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                _ => {}
            },
        }
    }
}
