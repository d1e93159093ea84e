use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Segment before the first dot of a type tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Namespace {
    Sensor,
    Input,
    Feedback,
    Control,
    Service,
}

impl Namespace {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sensor" => Some(Self::Sensor),
            "input" => Some(Self::Input),
            "feedback" => Some(Self::Feedback),
            "control" => Some(Self::Control),
            "service" => Some(Self::Service),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sensor => "sensor",
            Self::Input => "input",
            Self::Feedback => "feedback",
            Self::Control => "control",
            Self::Service => "service",
        }
    }
}

/// Registered envelope type vocabulary.
///
/// Tags outside the vocabulary are still representable as [`TypeTag::Unknown`]
/// so that frames from newer devices can be quarantined instead of tearing
/// down the connection.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TypeTag {
    SensorWatch,
    SensorCameraFrame,
    SensorLocation,
    InputVoice,
    InputGesture,
    InputGaze,
    InputController,
    FeedbackDisplay,
    FeedbackAudio,
    ControlHandshake,
    ControlHeartbeat,
    ControlSwitchService,
    ControlRecord,
    ServiceInternal,
    Unknown(String),
}

impl TypeTag {
    pub const KNOWN: [TypeTag; 14] = [
        TypeTag::SensorWatch,
        TypeTag::SensorCameraFrame,
        TypeTag::SensorLocation,
        TypeTag::InputVoice,
        TypeTag::InputGesture,
        TypeTag::InputGaze,
        TypeTag::InputController,
        TypeTag::FeedbackDisplay,
        TypeTag::FeedbackAudio,
        TypeTag::ControlHandshake,
        TypeTag::ControlHeartbeat,
        TypeTag::ControlSwitchService,
        TypeTag::ControlRecord,
        TypeTag::ServiceInternal,
    ];

    /// Parses a dotted tag. Never fails: anything outside the vocabulary
    /// becomes `Unknown`.
    pub fn parse(s: &str) -> Self {
        match s {
            "sensor.watch" => Self::SensorWatch,
            "sensor.camera_frame" => Self::SensorCameraFrame,
            "sensor.location" => Self::SensorLocation,
            "input.voice" => Self::InputVoice,
            "input.gesture" => Self::InputGesture,
            "input.gaze" => Self::InputGaze,
            "input.controller" => Self::InputController,
            "feedback.display" => Self::FeedbackDisplay,
            "feedback.audio" => Self::FeedbackAudio,
            "control.handshake" => Self::ControlHandshake,
            "control.heartbeat" => Self::ControlHeartbeat,
            "control.switch_service" => Self::ControlSwitchService,
            "control.record" => Self::ControlRecord,
            "service.internal" => Self::ServiceInternal,
            other => Self::Unknown(other.to_string()),
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            Self::SensorWatch => "sensor.watch",
            Self::SensorCameraFrame => "sensor.camera_frame",
            Self::SensorLocation => "sensor.location",
            Self::InputVoice => "input.voice",
            Self::InputGesture => "input.gesture",
            Self::InputGaze => "input.gaze",
            Self::InputController => "input.controller",
            Self::FeedbackDisplay => "feedback.display",
            Self::FeedbackAudio => "feedback.audio",
            Self::ControlHandshake => "control.handshake",
            Self::ControlHeartbeat => "control.heartbeat",
            Self::ControlSwitchService => "control.switch_service",
            Self::ControlRecord => "control.record",
            Self::ServiceInternal => "service.internal",
            Self::Unknown(s) => s,
        }
    }

    pub fn is_known(&self) -> bool {
        !matches!(self, Self::Unknown(_))
    }

    /// Namespace of the tag; `None` for unknown tags whose prefix is not a
    /// registered namespace either.
    pub fn namespace(&self) -> Option<Namespace> {
        let s = self.as_str();
        Namespace::parse(s.split('.').next().unwrap_or(s))
    }

    /// Camera frames ride the drop-oldest lane; everything else must not drop.
    pub fn is_frame(&self) -> bool {
        matches!(self, Self::SensorCameraFrame)
    }
}

impl fmt::Display for TypeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for TypeTag {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for TypeTag {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(TypeTag::parse(&s))
    }
}
