//! Validates every shipped pipeline config, then shows a rejected edit.
//!
//! ```text
//! cargo run --example validate_config [path...]
//! ```

use std::path::PathBuf;

use tomk::config::{load_config, validate_config};
use tomk::kernel::crate_path;

fn main() {
    let mut paths: Vec<PathBuf> = std::env::args().skip(1).map(PathBuf::from).collect();
    if paths.is_empty() {
        let mut shipped: Vec<PathBuf> = std::fs::read_dir(crate_path("configs"))
            .expect("configs directory")
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        shipped.sort();
        paths = shipped;
    }
    for path in &paths {
        match load_config(path) {
            Ok(cfg) => {
                let violations = validate_config(&cfg);
                println!("{}: {} components, {} violations", cfg.name, cfg.components.len(), violations.len());
                for v in violations {
                    println!("  {}: {v}", v.rule());
                }
            }
            Err(e) => println!("{}: {e}", path.display()),
        }
    }

    let mut cfg = load_config(crate_path("configs/running.json")).expect("running.json");
    cfg.components[3].next.push("running_service".into());
    println!("\nlayout -> running_service added:");
    for v in validate_config(&cfg) {
        println!("  {}: {v}", v.rule());
    }
}
