//! Coaches a simulated interval run and prints each instruction, the
//! display it produces and the final summary.
//!
//! ```text
//! cargo run --example running_coach
//! ```

use tomk::kernel::crate_path;
use tomk::services::coach::{coach_step, proactive_events, summarize_run, CoachSettings, RunningState};
use tomk::services::domain::DataStore;
use tomk::services::layout::LayoutManager;
use tomk::sim::{generate_watch_trace_along, SimulatedTrace, TraceKind};

fn main() {
    let store = DataStore::load(crate_path("data")).expect("data store");
    let plan = store.plans["intervals"].clone();
    let profile = store.profiles["jack"].clone();
    let route = plan.route.as_ref().and_then(|r| store.routes.get(r));
    let settings = CoachSettings::default();

    let trace = SimulatedTrace::new(TraceKind::Noisy { base_kmh: 9.0, sigma_kmh: 1.2, seed: 7 }, 1200.0, 1000);
    let samples = match route {
        Some(r) => generate_watch_trace_along(&trace, r),
        None => tomk::sim::generate_watch_trace(&trace),
    }
    .expect("valid trace");

    let t0 = 1_700_000_000_000u64;
    let mut state = RunningState::default();
    let mut layout = LayoutManager::default();
    for (i, sample) in samples.iter().enumerate() {
        let now = t0 + i as u64 * trace.period_ms;
        let Ok(step) = coach_step(&mut state, &plan, &profile, sample, now, &settings) else {
            println!("{:>5}s  plan complete", i);
            break;
        };
        let mut said = vec![step];
        said.extend(proactive_events(&mut state, route, sample.location, &profile, now, &settings));
        for instr in said.iter().filter(|s| !s.kind.is_silent()) {
            let display = layout.update(Some(instr), now);
            let shown: Vec<&str> = display.slots.iter().map(|s| s.content.as_str()).collect();
            println!("{:>5}s  {:<12} {:<40} {:?}", i, format!("{:?}", instr.kind), instr.text, shown);
        }
    }
    let summary = summarize_run(&state).expect("samples were seen");
    println!("\n{}", summary.text());
    for (kind, n) in &summary.instructions {
        println!("  {kind:?}: {n}");
    }
}
