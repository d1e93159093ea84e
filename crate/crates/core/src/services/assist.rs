//! Menu translation overlay and gaze/gesture object queries.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ports::{PortError, Ports};
use crate::message::payload::{BoundingBox, CameraFrame, Overlay};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslatedBox {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub source: String,
    pub result: Result<String, PortError>,
}

impl TranslatedBox {
    pub fn overlay(&self) -> Overlay {
        let text = match &self.result {
            Ok(t) => t.clone(),
            Err(_) => format!("{} (?)", self.source),
        };
        Overlay { bbox: self.bbox, text }
    }
}

/// Recognize, translate and adapt every text box in the frame. Box failures
/// are reported per box; only a recognition failure fails the whole frame.
pub fn translate_frame(frame: &CameraFrame, ports: &Ports, locale: &str) -> Result<Vec<TranslatedBox>, PortError> {
    let boxes = ports.recognize(frame)?;
    Ok(boxes
        .into_iter()
        .map(|b| {
            let result = ports.translate(&b.text, locale).and_then(|t| ports.adapt(&t, locale));
            TranslatedBox { bbox: b.bbox, source: b.text, result }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "by", rename_all = "snake_case")]
pub enum Selection {
    Gaze { x: f64, y: f64, dwell_ms: u64 },
    Gesture { x: f64, y: f64 },
}

impl Selection {
    /// The selected point, if this selection counts.
    pub fn point(&self, min_dwell_ms: u64) -> Option<(f64, f64)> {
        match *self {
            Selection::Gaze { x, y, dwell_ms } => (dwell_ms >= min_dwell_ms).then_some((x, y)),
            Selection::Gesture { x, y } => Some((x, y)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuerySettings {
    pub min_dwell_ms: u64,
}

impl Default for QuerySettings {
    fn default() -> Self {
        Self { min_dwell_ms: 1500 }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QueryError {
    #[error("nothing selected")]
    NoSelection,
    #[error(transparent)]
    Port(#[from] PortError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAnswer {
    pub label: String,
    pub question: String,
    pub text: String,
}

pub fn answer_query(
    selection: Option<&Selection>,
    transcript: &str,
    frame: Option<&CameraFrame>,
    ports: &Ports,
    settings: &QuerySettings,
) -> Result<QueryAnswer, QueryError> {
    let (x, y) = selection.and_then(|s| s.point(settings.min_dwell_ms)).ok_or(QueryError::NoSelection)?;
    let frame = frame.ok_or(QueryError::NoSelection)?;
    let detections = ports.detect(frame)?;
    let target = detections
        .iter()
        .filter(|d| d.bbox.contains(x, y))
        .max_by(|a, b| a.score.total_cmp(&b.score))
        .ok_or(QueryError::NoSelection)?;
    let text = ports.answer(&target.label, transcript)?;
    Ok(QueryAnswer {
        label: target.label.clone(),
        question: transcript.to_string(),
        text,
    })
}
