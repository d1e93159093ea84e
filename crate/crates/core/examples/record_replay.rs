//! Records a simulated run on one kernel and replays it into another.
//!
//! ```text
//! cargo run --example record_replay
//! ```

use std::sync::Arc;
use std::time::Duration;

use tomk::kernel::{crate_path, Kernel, KernelOptions};
use tomk::message::TypeTag;
use tomk::recording::{list_sessions, read_component, replay, ReplayMode, ReplayOptions};
use tomk::sim::{generate_watch_trace, SimulatedTrace, TraceKind};
use tomk::testkit::envelope;
use tomk::transport::Hub;

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let config = crate_path("configs/running.json");
    let opts = KernelOptions { sim_clock: true, record_dir: dir.path().into(), ..Default::default() };
    let source = Arc::new(Kernel::from_path(&config, opts).expect("kernel"));
    let hub = Hub::new(source.clone());

    let meta = source.recorder.start_session(&source.engine).expect("start");
    let trace = SimulatedTrace::new(TraceKind::Ramp { from_kmh: 6.0, to_kmh: 13.0 }, 40.0, 1000);
    for (i, s) in generate_watch_trace(&trace).unwrap().iter().enumerate() {
        let ts = 1_700_000_000_000 + i as u64 * 1000;
        let env = envelope("watch-1", i as u64 + 1, ts, TypeTag::SensorWatch, serde_json::to_value(s).unwrap());
        hub.handle_inbound(env, None).expect("accepted");
    }
    source.engine.wait_idle(Duration::from_secs(5));
    let sealed = source.recorder.stop_session().expect("stop");
    source.shutdown();
    println!("recorded {} ({} entries)", sealed.session_id, sealed.count);
    for (file, lines) in &sealed.files {
        println!("  {file}: {lines}");
    }

    let target_dir = tempfile::tempdir().expect("temp dir");
    let opts = KernelOptions { record_dir: target_dir.path().into(), ..Default::default() };
    let target = Kernel::from_path(&config, opts).expect("kernel");
    let report = replay(dir.path(), &meta.session_id, &target.engine, ReplayOptions { speed: 8.0, mode: ReplayMode::Timed })
        .expect("replay");
    target.engine.wait_idle(Duration::from_secs(5));
    println!(
        "replayed {} envelopes spanning {} ms in {} ms, order preserved: {}",
        report.dispatched, report.recorded_span_ms, report.wall_ms, report.order_preserved
    );

    let coached = read_component(dir.path(), &meta.session_id, "layout").unwrap();
    println!("layout saw {} envelopes; last:", coached.len());
    if let Some(last) = coached.last() {
        println!("  {}", last.envelope.payload);
    }
    println!("sessions on disk: {}", list_sessions(dir.path()).len());
    target.shutdown();
}
