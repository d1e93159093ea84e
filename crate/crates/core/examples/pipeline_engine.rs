//! Builds a small pipeline in code with a custom stage and inspects what
//! the engine did with each envelope.
//!
//! ```text
//! cargo run --example pipeline_engine
//! ```

use std::sync::Arc;

use serde_json::json;
use tomk::config::Layer;
use tomk::engine::{ComponentRegistry, Engine, EngineOptions, FnComponent, HandlerBinding, PassThrough};
use tomk::message::payload::AudioCue;
use tomk::message::TypeTag;
use tomk::testkit::{envelope, pipeline};

fn main() {
    let cfg = pipeline(
        "shout",
        &[
            ("mic", Layer::Input, &["upper"]),
            ("upper", Layer::Processing, &["speaker", "log"]),
            ("speaker", Layer::Output, &[]),
            ("log", Layer::Output, &[]),
        ],
    );

    let mut registry = ComponentRegistry::new();
    for name in ["mic", "speaker", "log"] {
        registry.register(HandlerBinding::new(&format!("{name}.on_data"), &format!("{name}.stop"), |_| {
            Box::new(PassThrough)
        }));
    }
    registry.register(HandlerBinding::new("upper.on_data", "upper.stop", |_| {
        Box::new(FnComponent(|env: &Arc<_>, out: &mut tomk::engine::Emitter<'_>| {
            let text = tomk::message::Envelope::payload_as::<tomk::message::payload::VoiceInput>(env)
                .map(|v| v.transcript.to_uppercase())
                .ok_or("not a voice input")?;
            out.emit_payload(&AudioCue { text })?;
            Ok(())
        }))
    }));

    let engine = Engine::launch(cfg, &registry, EngineOptions::default()).expect("valid pipeline");
    for (seq, words) in ["hello there", "turn left at the bridge"].into_iter().enumerate() {
        let env = envelope("ohmd-1", seq as u64 + 1, 0, TypeTag::InputVoice, json!({ "transcript": words }));
        let report = engine.dispatch("mic", env).expect("dispatch");
        println!("{words:?} reached {:?}", report.delivered());
    }
    let bad = envelope("ohmd-1", 3, 0, TypeTag::InputGaze, json!({"x": 1, "y": 2, "dwell_ms": 10}));
    for e in engine.dispatch("mic", bad).expect("dispatch").events {
        println!("gaze at {}: {:?}", e.component, e.outcome);
    }

    println!("\n{:<8} {:>8} {:>8} {:>8} {:>8}", "name", "recv", "emit", "done", "failed");
    for m in engine.snapshot_metrics().components {
        println!("{:<8} {:>8} {:>8} {:>8} {:>8}", m.name, m.received, m.emitted, m.processed, m.failed);
    }
    let stop = engine.stop();
    println!("exit order: {:?}", stop.exit_order);
}
