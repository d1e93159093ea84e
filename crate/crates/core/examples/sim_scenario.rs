//! Runs the bundled scenario scripts against an in-process kernel on
//! simulated time.
//!
//! ```text
//! cargo run --example sim_scenario [scenario.json...]
//! ```

use std::sync::Arc;

use tomk::kernel::{crate_path, Kernel, KernelOptions};
use tomk::sim::{run_scenario_blocking, RunOptions, ScenarioScript};
use tomk::transport::Server;

fn main() {
    let mut scripts: Vec<String> = std::env::args().skip(1).collect();
    if scripts.is_empty() {
        scripts = ["running", "translation", "query"]
            .iter()
            .map(|n| crate_path(&format!("scenarios/{n}.json")).display().to_string())
            .collect();
    }
    let dir = tempfile::tempdir().expect("temp dir");
    let opts = KernelOptions { sim_clock: true, record_dir: dir.path().into(), ..Default::default() };
    let kernel = Arc::new(Kernel::from_path(crate_path("configs/assistant.json"), opts).expect("kernel"));
    let server = Server::start(kernel.clone(), "127.0.0.1:0".parse().unwrap()).expect("bind");

    let mut all = true;
    for path in &scripts {
        let script = ScenarioScript::load(path).expect("script");
        match run_scenario_blocking(&script, &server.ws_url(), &RunOptions::default()) {
            Ok(report) => {
                all &= report.passed;
                for line in report.summary_lines() {
                    println!("{line}");
                }
            }
            Err(e) => {
                all = false;
                println!("{}: {e}", script.name);
            }
        }
        println!();
    }
    server.shutdown();
    kernel.shutdown();
    std::process::exit(if all { 0 } else { 1 });
}
