//! Engine components for the demonstration pipelines and the handler
//! registry that binds their entry/exit symbols.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::assist::{answer_query, translate_frame, QueryAnswer, QueryError, QuerySettings, Selection};
use super::coach::{
    coach_step, proactive_events, summarize_run, CoachError, CoachInstruction, CoachSettings, InstructionKind,
    RunSummary, RunningState,
};
use super::domain::{Modality, RouteInfo, TrainingPlan, UserProfile};
use super::layout::{LayoutManager, LayoutSettings};
use super::ports::{pixel_digest, Detection, Ports};
use crate::config::ComponentDescriptor;
use crate::engine::{Component, ComponentError, ComponentRegistry, Emitter, HandlerBinding, PassThrough};
use crate::message::payload::{
    AudioCue, CameraFrame, ControllerInput, GazeInput, GeoPoint, GestureInput, LocationFix, Overlay, VoiceInput,
    WatchSample,
};
use crate::message::{Envelope, Payload, TypeTag};

/// Where output-layer components hand feedback envelopes; returns how many
/// clients received it.
pub trait FeedbackSink: Send + Sync {
    fn deliver(&self, env: &Arc<Envelope>) -> usize;
}

/// Fans feedback out to every attached sink.
#[derive(Default)]
pub struct SinkHub {
    sinks: RwLock<Vec<Arc<dyn FeedbackSink>>>,
}

impl SinkHub {
    pub fn attach(&self, sink: Arc<dyn FeedbackSink>) {
        self.sinks.write().unwrap().push(sink);
    }
}

impl FeedbackSink for SinkHub {
    fn deliver(&self, env: &Arc<Envelope>) -> usize {
        self.sinks.read().unwrap().iter().map(|s| s.deliver(env)).sum()
    }
}

/// Keeps every delivered envelope; counts as one delivery each.
#[derive(Default)]
pub struct CollectingSink {
    seen: Mutex<Vec<Arc<Envelope>>>,
}

impl CollectingSink {
    pub fn take(&self) -> Vec<Arc<Envelope>> {
        std::mem::take(&mut self.seen.lock().unwrap())
    }

    pub fn snapshot(&self) -> Vec<Arc<Envelope>> {
        self.seen.lock().unwrap().clone()
    }
}

impl FeedbackSink for CollectingSink {
    fn deliver(&self, env: &Arc<Envelope>) -> usize {
        self.seen.lock().unwrap().push(env.clone());
        1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ServiceEvent {
    Coach { instruction: CoachInstruction },
    Summary { instruction: CoachInstruction, summary: RunSummary },
    Overlays { overlays: Vec<Overlay>, failed: usize },
    Answer { answer: QueryAnswer },
    Caption { text: String },
    Detections { objects: Vec<Detection> },
}

/// `service.internal` payload: an event plus the producer timestamp of the
/// input that caused it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceMessage {
    pub at_ms: u64,
    #[serde(flatten)]
    pub event: ServiceEvent,
}

impl Payload for ServiceMessage {
    const TAG: TypeTag = TypeTag::ServiceInternal;
}

fn emit_event(out: &mut Emitter<'_>, at_ms: u64, event: ServiceEvent) -> Result<(), ComponentError> {
    out.emit_payload(&ServiceMessage { at_ms, event })?;
    Ok(())
}

/// Everything the standard components share.
pub struct Resources {
    pub profile: UserProfile,
    pub plan: TrainingPlan,
    pub routes: BTreeMap<String, RouteInfo>,
    pub coach: CoachSettings,
    pub layout: LayoutSettings,
    pub query: QuerySettings,
    pub ports: Ports,
    pub sink: Arc<SinkHub>,
}

impl Resources {
    pub fn new(profile: UserProfile, plan: TrainingPlan, ports: Ports) -> Self {
        Self {
            profile,
            plan,
            routes: BTreeMap::new(),
            coach: CoachSettings::default(),
            layout: LayoutSettings::default(),
            query: QuerySettings::default(),
            ports,
            sink: Arc::new(SinkHub::default()),
        }
    }

    /// Overrides thresholds from a config's `settings` object
    /// (`coach`, `layout`, `query` keys).
    pub fn apply_settings(&mut self, settings: &serde_json::Map<String, serde_json::Value>) -> Result<(), String> {
        fn take<T: serde::de::DeserializeOwned>(
            settings: &serde_json::Map<String, serde_json::Value>,
            key: &str,
            into: &mut T,
        ) -> Result<(), String> {
            if let Some(v) = settings.get(key) {
                *into = serde_json::from_value(v.clone()).map_err(|e| format!("settings.{key}: {e}"))?;
            }
            Ok(())
        }
        take(settings, "coach", &mut self.coach)?;
        take(settings, "layout", &mut self.layout)?;
        take(settings, "query", &mut self.query)
    }
}

/// Input-layer widget: forwards what the client sent.
pub struct Widget;

impl Component for Widget {
    fn on_envelope(&mut self, env: &Arc<Envelope>, out: &mut Emitter<'_>) -> Result<(), ComponentError> {
        out.forward(env.clone());
        Ok(())
    }
}

/// Forwards everything and annotates camera frames with detected objects.
pub struct Yolov8 {
    res: Arc<Resources>,
}

impl Component for Yolov8 {
    fn on_envelope(&mut self, env: &Arc<Envelope>, out: &mut Emitter<'_>) -> Result<(), ComponentError> {
        out.forward(env.clone());
        if let Some(frame) = env.payload_as::<CameraFrame>() {
            let objects = self.res.ports.detect(&frame).map_err(|e| ComponentError(e.to_string()))?;
            if !objects.is_empty() {
                emit_event(out, env.ts_ms, ServiceEvent::Detections { objects })?;
            }
        }
        Ok(())
    }
}

pub struct RunningService {
    res: Arc<Resources>,
    state: RunningState,
    route: Option<String>,
    summarized: bool,
}

impl RunningService {
    pub fn new(res: Arc<Resources>) -> Self {
        let route = res.plan.route.clone();
        Self { res, state: RunningState::default(), route, summarized: false }
    }

    pub fn state(&self) -> &RunningState {
        &self.state
    }

    fn summarize(&mut self, at_ms: u64, out: &mut Emitter<'_>) -> Result<(), ComponentError> {
        if self.summarized {
            return Ok(());
        }
        let Ok(summary) = summarize_run(&self.state) else {
            return Ok(());
        };
        self.summarized = true;
        let modality = match self.res.profile.preferred_modality {
            Modality::Visual => Modality::Both,
            m => m,
        };
        let instruction = CoachInstruction { kind: InstructionKind::Summary, text: summary.text(), modality, ts_ms: at_ms };
        emit_event(out, at_ms, ServiceEvent::Summary { instruction, summary })
    }

    fn proactive(&mut self, location: Option<GeoPoint>, at_ms: u64, out: &mut Emitter<'_>) -> Result<(), ComponentError> {
        if self.state.finished || self.state.samples == 0 {
            return Ok(());
        }
        let route = self.route.as_ref().and_then(|r| self.res.routes.get(r));
        for instruction in proactive_events(&mut self.state, route, location, &self.res.profile, at_ms, &self.res.coach) {
            emit_event(out, at_ms, ServiceEvent::Coach { instruction })?;
        }
        Ok(())
    }

    fn select_route(&mut self, name: &str, at_ms: u64, out: &mut Emitter<'_>) -> Result<(), ComponentError> {
        let text = if self.res.routes.contains_key(name) {
            self.route = Some(name.to_string());
            format!("Route: {name}")
        } else {
            let known: Vec<_> = self.res.routes.keys().map(String::as_str).collect();
            format!("Unknown route {name:?}; choose one of {}", known.join(", "))
        };
        emit_event(out, at_ms, ServiceEvent::Caption { text })
    }
}

impl Component for RunningService {
    fn on_envelope(&mut self, env: &Arc<Envelope>, out: &mut Emitter<'_>) -> Result<(), ComponentError> {
        let at = env.ts_ms;
        match &env.type_tag {
            TypeTag::SensorWatch => {
                let sample: WatchSample = env.payload_as().ok_or("malformed watch sample")?;
                let r = &self.res;
                match coach_step(&mut self.state, &r.plan, &r.profile, &sample, at, &r.coach) {
                    Ok(instruction) if !instruction.kind.is_silent() => {
                        emit_event(out, at, ServiceEvent::Coach { instruction })?
                    }
                    Ok(_) => {}
                    Err(CoachError::PlanExhausted) => return self.summarize(at, out),
                    Err(e) => return Err(ComponentError(e.to_string())),
                }
                self.proactive(sample.location, at, out)
            }
            TypeTag::SensorLocation => {
                let fix: LocationFix = env.payload_as().ok_or("malformed location")?;
                self.proactive(Some(GeoPoint::new(fix.lat, fix.lon)), at, out)
            }
            TypeTag::InputVoice => {
                let v: VoiceInput = env.payload_as().ok_or("malformed voice input")?;
                let words: Vec<String> = v.transcript.split_whitespace().map(str::to_lowercase).collect();
                match words.iter().position(|w| w == "route") {
                    Some(i) if i + 1 < words.len() => self.select_route(&words[i + 1].clone(), at, out),
                    _ => Ok(()),
                }
            }
            TypeTag::InputController => {
                let c: ControllerInput = env.payload_as().ok_or("malformed controller input")?;
                match (c.action.as_str(), c.value) {
                    ("select_route", Some(name)) => self.select_route(&name, at, out),
                    _ => Ok(()),
                }
            }
            _ => Ok(()),
        }
    }

    fn on_exit(&mut self, out: &mut Emitter<'_>) -> Result<(), ComponentError> {
        let at = self.state.last_ms.unwrap_or_else(|| out.now_ms());
        self.summarize(at, out)
    }
}

pub struct TranslationService {
    res: Arc<Resources>,
    last_digest: Option<String>,
}

impl Component for TranslationService {
    fn on_envelope(&mut self, env: &Arc<Envelope>, out: &mut Emitter<'_>) -> Result<(), ComponentError> {
        let Some(frame) = env.payload_as::<CameraFrame>() else {
            return Ok(());
        };
        let digest = pixel_digest(&frame.pixels()?);
        if self.last_digest.as_ref() == Some(&digest) {
            return Ok(());
        }
        self.last_digest = Some(digest);
        match translate_frame(&frame, &self.res.ports, &self.res.profile.locale) {
            Ok(boxes) if boxes.is_empty() => Ok(()),
            Ok(boxes) => {
                let failed = boxes.iter().filter(|b| b.result.is_err()).count();
                let overlays = boxes.iter().map(|b| b.overlay()).collect();
                emit_event(out, env.ts_ms, ServiceEvent::Overlays { overlays, failed })
            }
            Err(e) => emit_event(out, env.ts_ms, ServiceEvent::Caption { text: format!("Translation unavailable: {e}") }),
        }
    }
}

pub struct QueryService {
    res: Arc<Resources>,
    frame: Option<CameraFrame>,
    selection: Option<Selection>,
}

impl Component for QueryService {
    fn on_envelope(&mut self, env: &Arc<Envelope>, out: &mut Emitter<'_>) -> Result<(), ComponentError> {
        match &env.type_tag {
            TypeTag::SensorCameraFrame => self.frame = env.payload_as(),
            TypeTag::InputGaze => {
                let g: GazeInput = env.payload_as().ok_or("malformed gaze")?;
                self.selection = Some(Selection::Gaze { x: g.x, y: g.y, dwell_ms: g.dwell_ms });
            }
            TypeTag::InputGesture => {
                let g: GestureInput = env.payload_as().ok_or("malformed gesture")?;
                if let (Some(x), Some(y)) = (g.x, g.y) {
                    self.selection = Some(Selection::Gesture { x, y });
                }
            }
            TypeTag::InputVoice => {
                let v: VoiceInput = env.payload_as().ok_or("malformed voice input")?;
                let r = &self.res;
                let event = match answer_query(self.selection.as_ref(), &v.transcript, self.frame.as_ref(), &r.ports, &r.query)
                {
                    Ok(answer) => ServiceEvent::Answer { answer },
                    Err(QueryError::NoSelection) => {
                        ServiceEvent::Caption { text: "Look at or point to an item, then ask again".into() }
                    }
                    Err(QueryError::Port(e)) => ServiceEvent::Caption { text: format!("No answer: {e}") },
                };
                emit_event(out, env.ts_ms, event)?;
            }
            _ => {}
        }
        Ok(())
    }
}

/// Turns service events and watch ticks into display directives and audio cues.
pub struct LayoutService {
    manager: LayoutManager,
}

impl LayoutService {
    fn display(&mut self, at_ms: u64, out: &mut Emitter<'_>) -> Result<(), ComponentError> {
        out.emit_payload(&self.manager.render(at_ms))?;
        Ok(())
    }

    fn speak(text: &str, out: &mut Emitter<'_>) -> Result<(), ComponentError> {
        out.emit_payload(&AudioCue { text: text.to_string() })?;
        Ok(())
    }
}

impl Component for LayoutService {
    fn on_envelope(&mut self, env: &Arc<Envelope>, out: &mut Emitter<'_>) -> Result<(), ComponentError> {
        match &env.type_tag {
            TypeTag::SensorWatch => self.display(env.ts_ms, out),
            TypeTag::ServiceInternal => {
                let msg: ServiceMessage = env.payload_as().ok_or("malformed service message")?;
                match msg.event {
                    ServiceEvent::Coach { instruction } | ServiceEvent::Summary { instruction, .. } => {
                        self.manager.push(&instruction);
                        self.display(msg.at_ms, out)?;
                        if matches!(instruction.modality, Modality::Audio | Modality::Both) {
                            Self::speak(&instruction.text, out)?;
                        }
                        Ok(())
                    }
                    ServiceEvent::Overlays { overlays, .. } => {
                        self.manager.set_overlays(overlays, msg.at_ms);
                        self.display(msg.at_ms, out)
                    }
                    ServiceEvent::Answer { answer } => {
                        self.manager.caption(answer.text.clone(), msg.at_ms);
                        self.display(msg.at_ms, out)?;
                        Self::speak(&answer.text, out)
                    }
                    ServiceEvent::Caption { text } => {
                        self.manager.caption(text, msg.at_ms);
                        self.display(msg.at_ms, out)
                    }
                    ServiceEvent::Detections { .. } => Ok(()),
                }
            }
            _ => Ok(()),
        }
    }
}

/// Output layer: hands feedback to the transport.
pub struct WebsocketOut {
    sink: Arc<SinkHub>,
}

impl Component for WebsocketOut {
    fn on_envelope(&mut self, env: &Arc<Envelope>, _out: &mut Emitter<'_>) -> Result<(), ComponentError> {
        if matches!(env.type_tag, TypeTag::FeedbackDisplay | TypeTag::FeedbackAudio) {
            self.sink.deliver(env);
        }
        Ok(())
    }
}

fn widget(name: &str, tags: Option<Vec<TypeTag>>) -> HandlerBinding {
    let b = HandlerBinding::new(&format!("widgets.{name}.receive"), &format!("widgets.{name}.stop"), |_| {
        Box::new(Widget)
    });
    match tags {
        Some(t) => b.accepting(t),
        None => b,
    }
}

fn service<F, C>(name: &str, entry: &str, res: &Arc<Resources>, make: F) -> HandlerBinding
where
    F: Fn(Arc<Resources>) -> C + Send + Sync + 'static,
    C: Component + 'static,
{
    let res = res.clone();
    HandlerBinding::new(&format!("{name}.{entry}"), &format!("{name}.stop"), move |_: &ComponentDescriptor| {
        Box::new(make(res.clone()))
    })
}

/// Bindings for every entry point used by the shipped configs.
pub fn standard_registry(res: &Arc<Resources>) -> ComponentRegistry {
    use TypeTag::*;
    let mut reg = ComponentRegistry::new();
    reg.register(widget("device", None))
        .register(widget("camera", Some(vec![SensorCameraFrame])))
        .register(widget("watch", Some(vec![SensorWatch, SensorLocation])))
        .register(widget("voice", Some(vec![InputVoice])))
        .register(widget("pointer", Some(vec![InputGaze, InputGesture, InputController])))
        .register(HandlerBinding::new("passthrough.forward", "passthrough.stop", |_| Box::new(PassThrough)))
        .register(service("yolov8", "detect", res, |res| Yolov8 { res }))
        .register(service("running_service", "on_data", res, RunningService::new))
        .register(service("translation_service", "on_data", res, |res| TranslationService { res, last_digest: None }))
        .register(service("query_service", "on_data", res, |res| QueryService { res, frame: None, selection: None }))
        .register(service("layout", "on_data", res, |res| LayoutService {
            manager: LayoutManager::new(res.layout.clone()),
        }))
        .register(service("websocket_out", "send", res, |res| WebsocketOut { sink: res.sink.clone() }));
    reg
}
