//! Typed payload schemas, one per registered type tag.

use std::collections::BTreeSet;

use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::TypeTag;

/// Payload types bound to a single type tag.
pub trait Payload: Serialize + DeserializeOwned {
    const TAG: TypeTag;

    /// Range and consistency checks beyond what the JSON shape enforces.
    fn check(&self) -> Result<(), String> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }

    pub fn check(&self) -> Result<(), String> {
        if !(-90.0..=90.0).contains(&self.lat) {
            return Err(format!("lat {} outside [-90, 90]", self.lat));
        }
        if !(-180.0..=180.0).contains(&self.lon) {
            return Err(format!("lon {} outside [-180, 180]", self.lon));
        }
        Ok(())
    }
}

/// `sensor.watch`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WatchSample {
    pub heart_rate_bpm: f64,
    pub speed_kmh: f64,
    pub calories_kcal: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<GeoPoint>,
}

impl Payload for WatchSample {
    const TAG: TypeTag = TypeTag::SensorWatch;

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    fn check(&self) -> Result<(), String> {
        if !(0.0..=300.0).contains(&self.heart_rate_bpm) {
            return Err(format!("heart_rate_bpm {} outside [0, 300]", self.heart_rate_bpm));
        }
        if !(0.0..=45.0).contains(&self.speed_kmh) {
            return Err(format!("speed_kmh {} outside [0, 45]", self.speed_kmh));
        }
        if !(self.calories_kcal >= 0.0) {
            return Err(format!("calories_kcal {} is negative", self.calories_kcal));
        }
        match &self.location {
            Some(p) => p.check(),
            None => Ok(()),
        }
    }
}

/// `sensor.camera_frame`: raw rgb8 pixels carried as base64.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CameraFrame {
    pub data_b64: String,
    pub width: u32,
    pub height: u32,
    pub format: String,
}

impl CameraFrame {
    pub fn from_rgb8(width: u32, height: u32, pixels: &[u8]) -> Self {
        Self {
            data_b64: base64::engine::general_purpose::STANDARD.encode(pixels),
            width,
            height,
            format: "rgb8".to_string(),
        }
    }

    pub fn pixels(&self) -> Result<Vec<u8>, String> {
        base64::engine::general_purpose::STANDARD
            .decode(&self.data_b64)
            .map_err(|e| format!("data_b64: {e}"))
    }
}

impl Payload for CameraFrame {
    const TAG: TypeTag = TypeTag::SensorCameraFrame;

    fn check(&self) -> Result<(), String> {
        if self.format != "rgb8" {
            return Err(format!("unsupported frame format {:?}", self.format));
        }
        let expected = self.width as usize * self.height as usize * 3;
        let got = self.pixels()?.len();
        if got != expected {
            return Err(format!("{got} pixel bytes for {}x{} rgb8", self.width, self.height));
        }
        Ok(())
    }
}

/// `sensor.location`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationFix {
    pub lat: f64,
    pub lon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy_m: Option<f64>,
}

impl Payload for LocationFix {
    const TAG: TypeTag = TypeTag::SensorLocation;

    fn check(&self) -> Result<(), String> {
        GeoPoint::new(self.lat, self.lon).check()
    }
}

/// `input.voice`: an already-transcribed utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoiceInput {
    pub transcript: String,
}

impl Payload for VoiceInput {
    const TAG: TypeTag = TypeTag::InputVoice;
}

/// `input.gesture`: mid-air or ring-mouse gesture, optionally pointing at
/// frame coordinates or selecting a named option.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GestureInput {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
}

impl Payload for GestureInput {
    const TAG: TypeTag = TypeTag::InputGesture;
}

/// `input.gaze`: fixation point in camera-frame pixels and its dwell time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazeInput {
    pub x: f64,
    pub y: f64,
    pub dwell_ms: u64,
}

impl Payload for GazeInput {
    const TAG: TypeTag = TypeTag::InputGaze;
}

/// `input.controller`
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControllerInput {
    pub action: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
}

impl Payload for ControllerInput {
    const TAG: TypeTag = TypeTag::InputController;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotId {
    Time,
    Primary,
    Alert,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub id: SlotId,
    pub content: String,
    pub ttl_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BoundingBox {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x as f64
            && y >= self.y as f64
            && x < (self.x + self.w) as f64
            && y < (self.y + self.h) as f64
    }
}

/// Text anchored over a region of the camera view.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overlay {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub text: String,
}

/// `feedback.display`
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutDirective {
    pub slots: Vec<Slot>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overlays: Vec<Overlay>,
    /// Producer timestamp of the envelope that triggered this directive.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis_ts_ms: Option<u64>,
}

impl LayoutDirective {
    pub fn slot(&self, id: SlotId) -> Option<&Slot> {
        self.slots.iter().find(|s| s.id == id)
    }
}

impl Payload for LayoutDirective {
    const TAG: TypeTag = TypeTag::FeedbackDisplay;

    fn check(&self) -> Result<(), String> {
        if self.slots.len() > 3 {
            return Err(format!("{} slots, at most 3 allowed", self.slots.len()));
        }
        let distinct: BTreeSet<_> = self.slots.iter().map(|s| s.id).collect();
        if distinct.len() != self.slots.len() {
            return Err("duplicate slot id".into());
        }
        Ok(())
    }
}

/// `feedback.audio`
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AudioCue {
    pub text: String,
}

impl Payload for AudioCue {
    const TAG: TypeTag = TypeTag::FeedbackAudio;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    Ohmd,
    Watch,
    Phone,
    Web,
    Sim,
}

/// Client greeting, the first frame on every data-channel connection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Handshake {
    pub client_id: String,
    pub device_kind: DeviceKind,
    pub declared_inputs: BTreeSet<TypeTag>,
    pub declared_outputs: BTreeSet<TypeTag>,
    pub protocol_version: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplyStatus {
    Ok,
    Error,
}

/// Kernel answer to a handshake (ack or rejection).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandshakeReply {
    pub status: ReplyStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<String>,
    /// `"simulated"` or `"wall"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clock: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// `control.handshake` carries either direction of the exchange.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HandshakeMessage {
    Hello(Handshake),
    Reply(HandshakeReply),
}

impl Payload for HandshakeMessage {
    const TAG: TypeTag = TypeTag::ControlHandshake;
}

/// `control.heartbeat`. A `sync` token asks the kernel to echo the heartbeat
/// once the engine has gone idle.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Heartbeat {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sync: Option<u64>,
}

impl Payload for Heartbeat {
    const TAG: TypeTag = TypeTag::ControlHeartbeat;
}

/// `control.switch_service`
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchService {
    pub name: String,
}

impl Payload for SwitchService {
    const TAG: TypeTag = TypeTag::ControlSwitchService;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordAction {
    Start,
    Stop,
}

/// `control.record`
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordCommand {
    pub action: RecordAction,
}

impl Payload for RecordCommand {
    const TAG: TypeTag = TypeTag::ControlRecord;
}

fn check_as<P: Payload>(value: &Value) -> Result<(), String> {
    let parsed: P = serde_json::from_value(value.clone()).map_err(|e| e.to_string())?;
    parsed.check()
}

/// Validates `payload` against the schema registered for `tag`.
///
/// `service.internal` accepts any object; unknown tags are not checked here
/// (they are quarantined by the caller).
pub fn check_payload(tag: &TypeTag, payload: &Value) -> Result<(), String> {
    if !payload.is_object() {
        return Err("payload must be a JSON object".into());
    }
    match tag {
        TypeTag::SensorWatch => check_as::<WatchSample>(payload),
        TypeTag::SensorCameraFrame => check_as::<CameraFrame>(payload),
        TypeTag::SensorLocation => check_as::<LocationFix>(payload),
        TypeTag::InputVoice => check_as::<VoiceInput>(payload),
        TypeTag::InputGesture => check_as::<GestureInput>(payload),
        TypeTag::InputGaze => check_as::<GazeInput>(payload),
        TypeTag::InputController => check_as::<ControllerInput>(payload),
        TypeTag::FeedbackDisplay => check_as::<LayoutDirective>(payload),
        TypeTag::FeedbackAudio => check_as::<AudioCue>(payload),
        TypeTag::ControlHandshake => check_as::<HandshakeMessage>(payload),
        TypeTag::ControlHeartbeat => check_as::<Heartbeat>(payload),
        TypeTag::ControlSwitchService => check_as::<SwitchService>(payload),
        TypeTag::ControlRecord => check_as::<RecordCommand>(payload),
        TypeTag::ServiceInternal | TypeTag::Unknown(_) => Ok(()),
    }
}
