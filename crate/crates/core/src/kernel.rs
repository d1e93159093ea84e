//! Wires a pipeline config, domain data and ports into a running engine
//! with recording attached.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::clock::{Clock, ManualClock, SystemClock};
use crate::config::{load_config, ConfigError, PipelineConfig};
use crate::engine::{Engine, EngineError, EngineOptions};
use crate::recording::{recover, RecordError, Recorder};
use crate::services::components::{standard_registry, Resources};
use crate::services::domain::{DataStore, DomainError, TrainingPlan, UserProfile};
use crate::services::ports::{FrameFixtures, PortConfig, PortError, Ports};

/// Repository defaults, resolved relative to the crate.
pub fn crate_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(rel)
}

#[derive(Debug, Error)]
pub enum KernelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Port(#[from] PortError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("unknown {what} {name:?}")]
    Unknown { what: &'static str, name: String },
    #[error("settings: {0}")]
    Settings(String),
}

#[derive(Clone)]
pub struct KernelOptions {
    pub allow_skip: bool,
    pub record_dir: PathBuf,
    pub data_dir: PathBuf,
    pub fixtures_dir: PathBuf,
    pub user: String,
    /// Plan name in the data store; falls back to a one-hour free run.
    pub plan: Option<String>,
    pub ports: Vec<PortConfig>,
    /// Replaces port construction from `ports` entirely.
    pub prebuilt_ports: Option<Ports>,
    /// Drive the kernel clock from inbound envelope timestamps.
    pub sim_clock: bool,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self {
            allow_skip: false,
            record_dir: std::env::var_os("TOMK_RECORD_DIR").map_or_else(|| PathBuf::from("./sessions"), PathBuf::from),
            data_dir: crate_path("data"),
            fixtures_dir: crate_path("fixtures"),
            user: "jack".into(),
            plan: Some("steady".into()),
            ports: Vec::new(),
            prebuilt_ports: None,
            sim_clock: false,
        }
    }
}

pub struct Kernel {
    pub engine: Engine,
    pub recorder: Arc<Recorder>,
    pub resources: Arc<Resources>,
    pub fixtures: Arc<FrameFixtures>,
    /// Set when the kernel runs on simulated time.
    pub sim_clock: Option<Arc<ManualClock>>,
    pub record_dir: PathBuf,
}

pub fn load_dictionary(fixtures_dir: &Path) -> Result<BTreeMap<String, String>, PortError> {
    let path = fixtures_dir.join("dictionary.json");
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    let text = std::fs::read_to_string(&path).map_err(|e| PortError::Setup(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| PortError::Setup(format!("{}: {e}", path.display())))
}

impl Kernel {
    pub fn from_path(path: impl AsRef<Path>, opts: KernelOptions) -> Result<Self, KernelError> {
        Self::build(load_config(path)?, opts)
    }

    pub fn build(config: PipelineConfig, opts: KernelOptions) -> Result<Self, KernelError> {
        let store = DataStore::load(&opts.data_dir)?;
        let profile = match store.profiles.get(&opts.user) {
            Some(p) => p.clone(),
            None if store.profiles.is_empty() => UserProfile::default(),
            None => return Err(KernelError::Unknown { what: "user", name: opts.user.clone() }),
        };
        let plan = match &opts.plan {
            Some(name) => store
                .plans
                .get(name)
                .cloned()
                .ok_or_else(|| KernelError::Unknown { what: "plan", name: name.clone() })?,
            None => TrainingPlan::free_run(3600.0),
        };
        let fixtures_dir = opts.fixtures_dir.join("frames");
        let fixtures =
            Arc::new(if fixtures_dir.is_dir() { FrameFixtures::load(&fixtures_dir)? } else { FrameFixtures::default() });
        let ports = match opts.prebuilt_ports.clone() {
            Some(p) => p,
            None => Ports::from_configs(&opts.ports, fixtures.clone(), load_dictionary(&opts.fixtures_dir)?)?,
        };
        let mut resources = Resources::new(profile, plan, ports);
        resources.routes = store.routes;
        resources.apply_settings(&config.settings).map_err(KernelError::Settings)?;
        let resources = Arc::new(resources);

        let sim_clock = opts.sim_clock.then(|| Arc::new(ManualClock::new(0)));
        let clock: Arc<dyn Clock> = match &sim_clock {
            Some(c) => c.clone(),
            None => Arc::new(SystemClock),
        };
        let engine_opts = EngineOptions { allow_skip: opts.allow_skip, clock, ..Default::default() };
        let engine = Engine::launch(config, &standard_registry(&resources), engine_opts)?;
        let recovered = recover(&opts.record_dir, None)?;
        if !recovered.is_empty() {
            tracing::warn!(count = recovered.len(), "recovered unsealed sessions");
        }
        let recorder = Recorder::attach(opts.record_dir.clone(), &engine);
        Ok(Self { engine, recorder, resources, fixtures, sim_clock, record_dir: opts.record_dir })
    }

    /// Stops recording (if active) and the engine.
    pub fn shutdown(&self) {
        if self.recorder.active_session().is_some() {
            if let Err(e) = self.recorder.stop_session() {
                tracing::warn!(error = %e, "could not seal session on shutdown");
            }
        }
        self.engine.stop();
    }
}
