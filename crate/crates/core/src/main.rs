use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use tomk::config::{load_config, validate_config};
use tomk::kernel::{Kernel, KernelOptions};
use tomk::services::ports::PortConfig;
use tomk::sim::{
    generate_watch_trace, run_scenario_blocking, ClockMode, RunOptions, ScenarioScript, SimulatedTrace, TraceKind,
};
use tomk::transport::{port_from_env, Server, DEFAULT_PORT};

#[derive(Parser)]
#[command(name = "tomk", version, about = "Context-aware dataflow kernel for wearable assistants")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a pipeline config and list any violations.
    Validate { file: PathBuf },
    /// Start the kernel and serve the WebSocket and HTTP interfaces.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run unregistered components as pass-through instead of failing.
        #[arg(long)]
        allow_skip: bool,
        #[arg(long, env = "TOMK_RECORD_DIR", default_value = "./sessions")]
        record_dir: PathBuf,
        #[arg(long, help = format!("Listen port [env: TOMK_PORT] [default: {DEFAULT_PORT}]"))]
        port: Option<u16>,
        #[arg(long, default_value = "0.0.0.0")]
        host: String,
        /// Take kernel time from inbound envelope timestamps.
        #[arg(long)]
        sim_clock: bool,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        fixtures_dir: Option<PathBuf>,
        #[arg(long, default_value = "jack")]
        user: String,
        /// Training plan name; omit for a free run.
        #[arg(long)]
        plan: Option<String>,
        /// JSON list of port configs (mock or http backends).
        #[arg(long)]
        ports: Option<PathBuf>,
    },
    /// Play a scenario script against a running kernel.
    Sim {
        #[arg(long)]
        script: PathBuf,
        #[arg(long, default_value = "ws://127.0.0.1:8080")]
        server: String,
        #[arg(long, value_enum)]
        clock: Option<Clock>,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Generate a watch trace and write it as JSON.
    Trace {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 600.0)]
        duration_s: f64,
        #[arg(long, default_value_t = 1000)]
        period_ms: u64,
        /// Constant speed, ramp start, triangle peak or noise mean.
        #[arg(long, default_value_t = 10.0)]
        speed: f64,
        /// Ramp end speed.
        #[arg(long, default_value_t = 12.0)]
        to: f64,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Clock {
    Simulated,
    Wall,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Constant,
    Ramp,
    Triangular,
    Noisy,
}

fn validate(file: PathBuf) -> Result<ExitCode, String> {
    let cfg = load_config(&file).map_err(|e| format!("{}: {e}", file.display()))?;
    let violations = validate_config(&cfg);
    if violations.is_empty() {
        println!("{}: ok ({} components, {} context rules)", cfg.name, cfg.components.len(), cfg.context.len());
        return Ok(ExitCode::SUCCESS);
    }
    for v in &violations {
        println!("{}: {} {v}", file.display(), v.rule());
    }
    Ok(ExitCode::FAILURE)
}

#[allow(clippy::too_many_arguments)]
fn run(
    config: PathBuf,
    allow_skip: bool,
    record_dir: PathBuf,
    addr: SocketAddr,
    sim_clock: bool,
    data_dir: Option<PathBuf>,
    fixtures_dir: Option<PathBuf>,
    user: String,
    plan: Option<String>,
    ports: Option<PathBuf>,
) -> Result<ExitCode, String> {
    let mut opts = KernelOptions { allow_skip, record_dir, sim_clock, user, plan, ..Default::default() };
    if let Some(d) = data_dir {
        opts.data_dir = d;
    }
    if let Some(d) = fixtures_dir {
        opts.fixtures_dir = d;
    }
    if let Some(p) = ports {
        let text = std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?;
        opts.ports = serde_json::from_str::<Vec<PortConfig>>(&text).map_err(|e| format!("{}: {e}", p.display()))?;
    }
    let kernel = Arc::new(Kernel::from_path(&config, opts).map_err(|e| e.to_string())?);
    for s in kernel.engine.skipped() {
        tracing::warn!(component = %s, "running in skip mode");
    }
    let server = Server::start(kernel.clone(), addr).map_err(|e| format!("bind {addr}: {e}"))?;
    println!("tomk listening on {} (config {})", server.local_addr(), config.display());

    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().map_err(|e| e.to_string())?;
    rt.block_on(async {
        let _ = tokio::signal::ctrl_c().await;
    });
    println!("shutting down");
    server.shutdown();
    kernel.shutdown();
    Ok(ExitCode::SUCCESS)
}

fn sim(script: PathBuf, server: String, clock: Option<Clock>, json: bool) -> Result<ExitCode, String> {
    let script = ScenarioScript::load(&script).map_err(|e| e.to_string())?;
    let opts = RunOptions {
        clock: clock.map(|c| match c {
            Clock::Simulated => ClockMode::Simulated,
            Clock::Wall => ClockMode::Wall,
        }),
        ..Default::default()
    };
    let report = run_scenario_blocking(&script, &server, &opts).map_err(|e| e.to_string())?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        for line in report.summary_lines() {
            println!("{line}");
        }
    }
    Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

#[allow(clippy::too_many_arguments)]
fn trace(kind: Kind, seed: u64, out: PathBuf, duration_s: f64, period_ms: u64, speed: f64, to: f64, sigma: f64) -> Result<ExitCode, String> {
    let kind = match kind {
        Kind::Constant => TraceKind::Constant { speed_kmh: speed },
        Kind::Ramp => TraceKind::Ramp { from_kmh: speed, to_kmh: to },
        Kind::Triangular => TraceKind::Triangular { peak_kmh: speed },
        Kind::Noisy => TraceKind::Noisy { base_kmh: speed, sigma_kmh: sigma, seed },
    };
    let samples = generate_watch_trace(&SimulatedTrace::new(kind, duration_s, period_ms)).map_err(|e| e.to_string())?;
    let text = serde_json::to_string_pretty(&samples).expect("samples serialize");
    std::fs::write(&out, text).map_err(|e| format!("{}: {e}", out.display()))?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let result = match Cli::parse().command {
        Command::Validate { file } => validate(file),
        Command::Run { config, allow_skip, record_dir, port, host, sim_clock, data_dir, fixtures_dir, user, plan, ports } => {
            match format!("{host}:{}", port.unwrap_or_else(port_from_env)).parse() {
                Ok(addr) => run(config, allow_skip, record_dir, addr, sim_clock, data_dir, fixtures_dir, user, plan, ports),
                Err(e) => Err(format!("bad listen address: {e}")),
            }
        }
        Command::Sim { script, server, clock, json } => sim(script, server, clock, json),
        Command::Trace { kind, seed, out, duration_s, period_ms, speed, to, sigma } => {
            trace(kind, seed, out, duration_s, period_ms, speed, to, sigma)
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
