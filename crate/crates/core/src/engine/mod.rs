//! The dataflow engine.
//!
//! Every declared component gets its own consumer thread and bounded inbox;
//! a handler sees one envelope at a time, distinct components run
//! concurrently. Emitted envelopes fan out along the (validated) `next` edges
//! in declared order.

mod inbox;
mod metrics;
mod registry;
mod report;

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex, OnceLock, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::clock::{Clock, SystemClock};
use crate::config::{validate_config, ComponentDescriptor, Layer, PipelineConfig, Violation};
use crate::context::{ContextError, ContextState, Decision, SwitchCause, Transition};
use crate::message::{Envelope, EnvelopeFactory, SourceId, TypeTag};

use inbox::{Control, Delivery, Inbox, Item, Push};
pub use metrics::{quantile, ComponentMetrics, MetricsTable};
pub use registry::{
    Component, ComponentError, ComponentFactory, ComponentRegistry, Emitter, FnComponent,
    HandlerBinding, PassThrough,
};
use report::Tracker;
pub use report::{DeliveryEvent, DeliveryHandle, DeliveryReport, Outcome};

/// Default capacity of the drop-oldest camera-frame lane.
pub const FRAME_LANE_CAPACITY: usize = 8;
/// Default capacity of the block-upstream lane used by every other tag.
pub const BLOCK_LANE_CAPACITY: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentState {
    Created,
    Running,
    Stopping,
    Stopped,
}

/// Sees every envelope a component is about to handle.
pub trait EnvelopeObserver: Send + Sync {
    fn on_handled(&self, component: &str, env: &Arc<Envelope>, recv_ms: u64);
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("invalid pipeline config: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidConfig(Vec<Violation>),
    #[error("no handler registered for component {0:?}")]
    UnresolvedHandler(String),
    #[error("pipeline already started")]
    AlreadyRunning,
    #[error("pipeline not started")]
    NotStarted,
    #[error("pipeline is stopped")]
    EngineStopped,
    #[error("unknown component {0:?}")]
    UnknownComponent(String),
    #[error("component {0:?} is skipped (no handler registered)")]
    SkippedComponent(String),
    #[error(transparent)]
    Context(#[from] ContextError),
}

#[derive(Clone)]
pub struct EngineOptions {
    /// Run declared-but-unregistered components in skip mode instead of
    /// failing startup.
    pub allow_skip: bool,
    pub clock: Arc<dyn Clock>,
    pub frame_capacity: usize,
    pub block_capacity: usize,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            allow_skip: false,
            clock: Arc::new(SystemClock),
            frame_capacity: FRAME_LANE_CAPACITY,
            block_capacity: BLOCK_LANE_CAPACITY,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StopReport {
    pub already_stopped: bool,
    /// Components whose exit point ran, in call order.
    pub exit_order: Vec<String>,
    pub failures: Vec<(String, String)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Created,
    Running,
    Stopping,
    Stopped,
}

type Observers = Arc<RwLock<Vec<Arc<dyn EnvelopeObserver>>>>;

struct Node {
    desc: ComponentDescriptor,
    binding: HandlerBinding,
    inbox: Inbox,
    source: SourceId,
    exit_calls: AtomicU64,
}

struct Shared {
    nodes: HashMap<String, Arc<Node>>,
    order: Vec<String>,
    routes: HashMap<String, Vec<String>>,
    skipped: Vec<String>,
    factory: EnvelopeFactory,
    clock: Arc<dyn Clock>,
    observers: Observers,
    stopping: AtomicBool,
}

struct Inner {
    config: PipelineConfig,
    options: EngineOptions,
    phase: Mutex<Phase>,
    shared: OnceLock<Arc<Shared>>,
    context: Mutex<ContextState>,
    observers: Observers,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

/// Handle to a pipeline; cheap to clone and safe to share across threads.
#[derive(Clone)]
pub struct Engine {
    inner: Arc<Inner>,
}

/// `next` lists with skipped components contracted out, duplicates removed.
fn effective_routes(cfg: &PipelineConfig, skipped: &[String]) -> HashMap<String, Vec<String>> {
    fn expand(cfg: &PipelineConfig, skipped: &[String], name: &str, out: &mut Vec<String>) {
        let Some(c) = cfg.component(name) else { return };
        for n in &c.next {
            if skipped.contains(n) {
                expand(cfg, skipped, n, out);
            } else if !out.contains(n) {
                out.push(n.clone());
            }
        }
    }
    cfg.components
        .iter()
        .filter(|c| !skipped.contains(&c.name))
        .map(|c| {
            let mut out = Vec::new();
            expand(cfg, skipped, &c.name, &mut out);
            (c.name.clone(), out)
        })
        .collect()
}

impl Engine {
    /// Validates the config; components are instantiated by [`Engine::start`].
    pub fn new(config: PipelineConfig, options: EngineOptions) -> Result<Self, EngineError> {
        let violations = validate_config(&config);
        if !violations.is_empty() {
            return Err(EngineError::InvalidConfig(violations));
        }
        let context = ContextState::new(&config.context);
        Ok(Self {
            inner: Arc::new(Inner {
                config,
                options,
                phase: Mutex::new(Phase::Created),
                shared: OnceLock::new(),
                context: Mutex::new(context),
                observers: Arc::new(RwLock::new(Vec::new())),
                threads: Mutex::new(Vec::new()),
            }),
        })
    }

    /// Convenience: `new` followed by `start`.
    pub fn launch(
        config: PipelineConfig,
        registry: &ComponentRegistry,
        options: EngineOptions,
    ) -> Result<Self, EngineError> {
        let engine = Self::new(config, options)?;
        engine.start(registry)?;
        Ok(engine)
    }

    /// Resolves every handler, instantiates components and starts their
    /// consumer threads.
    pub fn start(&self, registry: &ComponentRegistry) -> Result<(), EngineError> {
        let mut phase = self.inner.phase.lock().unwrap();
        if *phase != Phase::Created {
            return Err(EngineError::AlreadyRunning);
        }
        let cfg = &self.inner.config;
        let opts = &self.inner.options;

        let mut bindings = Vec::new();
        let mut skipped = Vec::new();
        for d in &cfg.components {
            match registry.resolve(d) {
                Some(b) => bindings.push((d.clone(), b.clone())),
                None if opts.allow_skip => {
                    tracing::warn!(component = %d.name, "no handler registered, running in skip mode");
                    skipped.push(d.name.clone());
                }
                None => return Err(EngineError::UnresolvedHandler(d.name.clone())),
            }
        }

        let routes = effective_routes(cfg, &skipped);
        let order: Vec<String> = cfg
            .topological_order()
            .expect("validated config is acyclic")
            .into_iter()
            .filter(|n| !skipped.contains(n))
            .collect();
        let switchable = self.inner.context.lock().unwrap().services.clone();

        let factory = EnvelopeFactory::new(opts.clock.clone());
        let mut nodes = HashMap::new();
        let mut instances = Vec::new();
        for (desc, binding) in bindings {
            let source = SourceId::new(crate::message::SourceKind::Component, desc.name.clone())
                .map_err(|_| EngineError::UnresolvedHandler(desc.name.clone()))?;
            factory.register(source.clone());
            let accepting = !switchable.contains(&desc.name);
            let component = binding.build(&desc);
            let node = Arc::new(Node {
                inbox: Inbox::new(opts.frame_capacity, opts.block_capacity, accepting),
                desc,
                binding,
                source,
                exit_calls: AtomicU64::new(0),
            });
            node.inbox.set_phase(ComponentState::Running);
            instances.push((node.clone(), component));
            nodes.insert(node.desc.name.clone(), node);
        }

        let shared = Arc::new(Shared {
            nodes,
            order,
            routes,
            skipped,
            factory,
            clock: opts.clock.clone(),
            observers: self.inner.observers.clone(),
            stopping: AtomicBool::new(false),
        });
        let mut threads = self.inner.threads.lock().unwrap();
        for (node, component) in instances {
            let shared = shared.clone();
            let handle = std::thread::Builder::new()
                .name(format!("tomk-{}", node.desc.name))
                .spawn(move || run_component(shared, node, component))
                .expect("spawn component thread");
            threads.push(handle);
        }
        let _ = self.inner.shared.set(shared);
        *phase = Phase::Running;
        Ok(())
    }

    fn running_shared(&self) -> Result<&Arc<Shared>, EngineError> {
        match *self.inner.phase.lock().unwrap() {
            Phase::Created => Err(EngineError::NotStarted),
            Phase::Stopping | Phase::Stopped => Err(EngineError::EngineStopped),
            Phase::Running => Ok(self.inner.shared.get().expect("running engine has state")),
        }
    }

    /// Enqueues `env` at component `at` without waiting for it to be handled.
    ///
    /// Envelopes entering an input-layer component are first shown to the
    /// context service, which may switch the active service before the
    /// envelope is routed. May block if the target's block-upstream lane is
    /// full.
    pub fn inject(&self, at: &str, env: impl Into<Arc<Envelope>>) -> Result<DeliveryHandle, EngineError> {
        let env = env.into();
        let shared = self.running_shared()?.clone();
        let Some(node) = shared.nodes.get(at) else {
            if shared.skipped.iter().any(|s| s == at) {
                return Err(EngineError::SkippedComponent(at.to_string()));
            }
            return Err(EngineError::UnknownComponent(at.to_string()));
        };
        if node.desc.layer == Layer::Input {
            self.observe_context(&env)?;
        }
        let tracker = Arc::new(Tracker::default());
        enqueue(&shared, at, env, Some(tracker.clone()));
        Ok(DeliveryHandle { tracker })
    }

    /// Delivers `env` at `at` and waits until it and everything emitted
    /// because of it has been handled or dropped.
    pub fn dispatch(&self, at: &str, env: impl Into<Arc<Envelope>>) -> Result<DeliveryReport, EngineError> {
        Ok(self.inject(at, env)?.wait())
    }

    fn observe_context(&self, env: &Envelope) -> Result<(), EngineError> {
        let mut ctx = self.inner.context.lock().unwrap();
        if ctx.services.is_empty() {
            return Ok(());
        }
        let decision = ctx.classify_input(env);
        if decision == Decision::Stay {
            return Ok(());
        }
        self.apply_locked(&mut ctx, decision)?;
        Ok(())
    }

    /// Switches the active service explicitly (`None` = idle).
    pub fn switch_service(
        &self,
        target: Option<&str>,
        cause: SwitchCause,
    ) -> Result<Option<Transition>, EngineError> {
        self.running_shared()?;
        let mut ctx = self.inner.context.lock().unwrap();
        let decision = Decision::SwitchTo {
            target: target.map(str::to_string),
            cause,
        };
        self.apply_locked(&mut ctx, decision)
    }

    // Runs with the context lock held, so routing to services is retargeted
    // atomically with respect to other input.
    fn apply_locked(
        &self,
        ctx: &mut ContextState,
        decision: Decision,
    ) -> Result<Option<Transition>, EngineError> {
        let now = self.inner.options.clock.now_ms();
        let Some(t) = ctx.apply_switch(decision, now)? else {
            return Ok(None);
        };
        let shared = self.inner.shared.get().expect("running engine has state");
        if let Some(node) = t.from.as_ref().and_then(|n| shared.nodes.get(n)) {
            let (tx, rx) = mpsc::channel();
            node.inbox.push_exit(Control::Exit { last: false, ack: tx });
            if let Ok(Some(Err(e))) = rx.recv() {
                tracing::warn!(component = %node.desc.name, error = %e, "exit point failed during switch");
            }
        }
        if let Some(node) = t.to.as_ref().and_then(|n| shared.nodes.get(n)) {
            let (tx, rx) = mpsc::channel();
            node.inbox.push_activate(Control::Activate(tx));
            let _ = rx.recv();
        }
        tracing::info!(from = ?t.from, to = ?t.to, "service switched");
        Ok(Some(t))
    }

    /// Drains the pipeline in topological order, then invokes every live
    /// instance's exit point sink-first. Idempotent.
    pub fn stop(&self) -> StopReport {
        {
            let mut phase = self.inner.phase.lock().unwrap();
            match *phase {
                Phase::Running => *phase = Phase::Stopping,
                Phase::Created => {
                    *phase = Phase::Stopped;
                    return StopReport {
                        already_stopped: true,
                        ..Default::default()
                    };
                }
                Phase::Stopping | Phase::Stopped => {
                    return StopReport {
                        already_stopped: true,
                        ..Default::default()
                    }
                }
            }
        }
        let shared = self.inner.shared.get().expect("started engine has state").clone();
        shared.stopping.store(true, Ordering::SeqCst);

        for name in &shared.order {
            let (tx, rx) = mpsc::channel();
            shared.nodes[name].inbox.push_control(Control::Barrier(tx), false);
            let _ = rx.recv();
        }

        let mut report = StopReport::default();
        for name in shared.order.iter().rev() {
            let node = &shared.nodes[name];
            node.inbox.set_phase(ComponentState::Stopping);
            let (tx, rx) = mpsc::channel();
            node.inbox.push_exit(Control::Exit { last: true, ack: tx });
            match rx.recv() {
                Ok(Some(Ok(()))) => report.exit_order.push(name.clone()),
                Ok(Some(Err(e))) => {
                    tracing::warn!(component = %name, error = %e, "exit point failed");
                    report.exit_order.push(name.clone());
                    report.failures.push((name.clone(), e));
                }
                Ok(None) | Err(_) => {}
            }
        }
        for handle in self.inner.threads.lock().unwrap().drain(..) {
            let _ = handle.join();
        }
        *self.inner.phase.lock().unwrap() = Phase::Stopped;
        report
    }

    pub fn snapshot_metrics(&self) -> MetricsTable {
        let now = self.inner.options.clock.now_ms();
        let Some(shared) = self.inner.shared.get() else {
            return MetricsTable {
                taken_at_ms: now,
                components: Vec::new(),
                skipped: Vec::new(),
            };
        };
        let components = self
            .inner
            .config
            .components
            .iter()
            .filter_map(|c| shared.nodes.get(&c.name))
            .map(|node| {
                let (state, active, counters) = node.inbox.snapshot();
                ComponentMetrics::from_counters(
                    &node.desc.name,
                    node.desc.layer,
                    state,
                    active,
                    &counters,
                    node.exit_calls.load(Ordering::SeqCst),
                )
            })
            .collect();
        MetricsTable {
            taken_at_ms: now,
            components,
            skipped: shared.skipped.clone(),
        }
    }

    /// Polls until no component has queued or in-progress work.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let Some(shared) = self.inner.shared.get() else {
            return true;
        };
        let deadline = Instant::now() + timeout;
        loop {
            if shared.nodes.values().all(|n| n.inbox.in_flight() == 0) {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            std::thread::sleep(Duration::from_millis(1));
        }
    }

    pub fn add_observer(&self, observer: Arc<dyn EnvelopeObserver>) {
        self.inner.observers.write().unwrap().push(observer);
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.inner.config
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.inner.options.clock
    }

    pub fn context(&self) -> ContextState {
        self.inner.context.lock().unwrap().clone()
    }

    pub fn is_running(&self) -> bool {
        *self.inner.phase.lock().unwrap() == Phase::Running
    }

    /// Instantiated input-layer components that listen for `tag`.
    pub fn input_components_for(&self, tag: &TypeTag) -> Vec<String> {
        let Some(shared) = self.inner.shared.get() else {
            return Vec::new();
        };
        self.inner
            .config
            .components
            .iter()
            .filter(|c| c.layer == Layer::Input)
            .filter_map(|c| shared.nodes.get(&c.name))
            .filter(|n| n.binding.accepts(tag))
            .map(|n| n.desc.name.clone())
            .collect()
    }

    /// Effective successors of a component after skip contraction.
    pub fn routes_from(&self, name: &str) -> Option<Vec<String>> {
        self.inner.shared.get()?.routes.get(name).cloned()
    }

    pub fn skipped(&self) -> Vec<String> {
        self.inner
            .shared
            .get()
            .map(|s| s.skipped.clone())
            .unwrap_or_default()
    }
}

fn enqueue(shared: &Shared, target: &str, env: Arc<Envelope>, tracker: Option<Arc<Tracker>>) {
    let Some(node) = shared.nodes.get(target) else { return };
    if let Some(t) = &tracker {
        t.begin();
        t.record(target, Outcome::Enqueued);
    }
    let delivery = Delivery {
        env,
        tracker,
        recv_ms: shared.clock.now_ms(),
    };
    match node.inbox.push(delivery) {
        Push::Enqueued { displaced } => {
            if let Some(t) = displaced.and_then(|d| d.tracker) {
                t.record(target, Outcome::Dropped);
                t.end();
            }
        }
        Push::Rejected(d) => {
            if let Some(t) = d.tracker {
                t.record(target, Outcome::Inactive);
                t.end();
            }
        }
    }
}

fn route(shared: &Shared, from: &str, emitted: &[Arc<Envelope>], tracker: &Option<Arc<Tracker>>) {
    let Some(targets) = shared.routes.get(from) else { return };
    for env in emitted {
        if env.is_quarantined() {
            continue;
        }
        for t in targets {
            enqueue(shared, t, env.clone(), tracker.clone());
        }
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        format!("panic: {s}")
    } else if let Some(s) = p.downcast_ref::<String>() {
        format!("panic: {s}")
    } else {
        "panic".to_string()
    }
}

fn discard(node: &Node, d: Delivery) {
    node.inbox.discard();
    if let Some(t) = d.tracker {
        t.record(&node.desc.name, Outcome::Dropped);
        t.end();
    }
}

fn handle_delivery(shared: &Shared, node: &Node, component: Option<&mut Box<dyn Component>>, d: Delivery) {
    let Some(component) = component else {
        return discard(node, d);
    };
    if shared.stopping.load(Ordering::SeqCst) && d.env.type_tag.is_frame() {
        return discard(node, d);
    }
    let name = node.desc.name.as_str();
    for obs in shared.observers.read().unwrap().iter() {
        obs.on_handled(name, &d.env, d.recv_ms);
    }
    let mut emitter = Emitter::new(&node.source, &shared.factory);
    let started = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(|| component.on_envelope(&d.env, &mut emitter)))
        .map_err(panic_message)
        .and_then(|r| r.map_err(|e| e.0));
    let latency = started.elapsed();
    match result {
        Ok(()) => {
            let emitted = emitter.into_emitted();
            if let Some(t) = &d.tracker {
                t.record(name, Outcome::Delivered);
            }
            route(shared, name, &emitted, &d.tracker);
            node.inbox.finish(emitted.len(), false, latency);
        }
        Err(e) => {
            tracing::warn!(component = name, error = %e, "entry point failed, envelope discarded");
            if let Some(t) = &d.tracker {
                t.record(name, Outcome::Failed(e));
            }
            node.inbox.finish(0, true, latency);
        }
    }
    if let Some(t) = d.tracker {
        t.end();
    }
}

fn run_exit(shared: &Shared, node: &Node, component: &mut Box<dyn Component>) -> Result<(), String> {
    node.exit_calls.fetch_add(1, Ordering::SeqCst);
    let mut emitter = Emitter::new(&node.source, &shared.factory);
    let result = catch_unwind(AssertUnwindSafe(|| component.on_exit(&mut emitter)))
        .map_err(panic_message)
        .and_then(|r| r.map_err(|e| e.0));
    if result.is_ok() {
        route(shared, &node.desc.name, &emitter.into_emitted(), &None);
    }
    result
}

fn run_component(shared: Arc<Shared>, node: Arc<Node>, component: Box<dyn Component>) {
    let mut component = Some(component);
    let mut exited = false;
    while let Some(item) = node.inbox.pop() {
        match item {
            Item::Envelope(d) => {
                let live = component.as_mut().filter(|_| !exited);
                handle_delivery(&shared, &node, live, d);
            }
            Item::Control(Control::Barrier(ack)) => {
                let _ = ack.send(());
            }
            Item::Control(Control::Activate(ack)) => {
                if exited || component.is_none() {
                    component = Some(node.binding.build(&node.desc));
                    exited = false;
                }
                let _ = ack.send(());
            }
            Item::Control(Control::Exit { last, ack }) => {
                let outcome = match component.as_mut() {
                    Some(c) if !exited => {
                        exited = true;
                        Some(run_exit(&shared, &node, c))
                    }
                    _ => None,
                };
                for d in node.inbox.drain() {
                    if let Some(t) = d.tracker {
                        t.record(&node.desc.name, Outcome::Dropped);
                        t.end();
                    }
                }
                if last {
                    node.inbox.set_phase(ComponentState::Stopped);
                    node.inbox.close();
                    let _ = ack.send(outcome);
                    break;
                }
                let _ = ack.send(outcome);
            }
        }
    }
}
