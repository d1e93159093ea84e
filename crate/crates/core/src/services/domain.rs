//! User profile, training plans and routes consumed by the running coach.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::message::payload::GeoPoint;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid {what}: {reason}")]
    Invalid { what: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Visual,
    Audio,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    pub default_target_speed_kmh: f64,
    pub preferred_modality: Modality,
    #[serde(default = "default_locale")]
    pub locale: String,
}

fn default_locale() -> String {
    "en".into()
}

impl UserProfile {
    pub fn check(&self) -> Result<(), DomainError> {
        if !(self.default_target_speed_kmh > 0.0 && self.default_target_speed_kmh <= 30.0) {
            return Err(DomainError::Invalid {
                what: format!("profile {}", self.user_id),
                reason: format!("default_target_speed_kmh {} outside (0, 30]", self.default_target_speed_kmh),
            });
        }
        Ok(())
    }
}

impl Default for UserProfile {
    fn default() -> Self {
        Self {
            user_id: "default".into(),
            default_target_speed_kmh: 10.0,
            preferred_modality: Modality::Visual,
            locale: default_locale(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    Speed,
    Distance,
}

/// One leg of a plan, bounded by time or distance. A missing target falls
/// back to the profile's default speed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_speed_kmh: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPlan {
    pub name: String,
    pub mode: PlanMode,
    pub segments: Vec<Segment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub route: Option<String>,
}

impl TrainingPlan {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn check(&self) -> Result<(), DomainError> {
        let invalid = |reason: String| DomainError::Invalid {
            what: format!("plan {}", self.name),
            reason,
        };
        if self.segments.is_empty() {
            return Err(invalid("no segments".into()));
        }
        for (i, s) in self.segments.iter().enumerate() {
            match (s.duration_s, s.distance_m) {
                (Some(d), None) if d > 0.0 => {}
                (None, Some(m)) if m > 0.0 => {}
                _ => return Err(invalid(format!("segment {i} needs exactly one positive duration_s or distance_m"))),
            }
            if s.target_speed_kmh.is_some_and(|t| !(t > 0.0)) {
                return Err(invalid(format!("segment {i} target must be positive")));
            }
        }
        Ok(())
    }

    /// One open-ended segment at the profile's default speed.
    pub fn free_run(duration_s: f64) -> Self {
        Self {
            name: "free_run".into(),
            mode: PlanMode::Speed,
            segments: vec![Segment {
                duration_s: Some(duration_s),
                distance_m: None,
                target_speed_kmh: None,
            }],
            route: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaypointKind {
    Waterpoint,
    TrafficLight,
    TurnLeft,
    TurnRight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    /// Index into the route polyline.
    pub index: usize,
    pub kind: WaypointKind,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteInfo {
    pub name: String,
    pub polyline: Vec<GeoPoint>,
    #[serde(default)]
    pub waypoints: Vec<Waypoint>,
}

impl RouteInfo {
    pub fn check(&self) -> Result<(), DomainError> {
        let invalid = |reason: String| DomainError::Invalid {
            what: format!("route {}", self.name),
            reason,
        };
        if self.polyline.len() < 2 {
            return Err(invalid("polyline needs at least 2 points".into()));
        }
        for p in &self.polyline {
            p.check().map_err(invalid)?;
        }
        if let Some(w) = self.waypoints.iter().find(|w| w.index >= self.polyline.len()) {
            return Err(invalid(format!("waypoint {:?} index {} out of bounds", w.label, w.index)));
        }
        Ok(())
    }

    pub fn waypoint_position(&self, w: &Waypoint) -> GeoPoint {
        self.polyline[w.index]
    }
}

/// Domain data loaded from `profiles/`, `plans/` and `routes/` under one root.
#[derive(Debug, Clone, Default)]
pub struct DataStore {
    pub profiles: BTreeMap<String, UserProfile>,
    pub plans: BTreeMap<String, TrainingPlan>,
    pub routes: BTreeMap<String, RouteInfo>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, DomainError> {
    let text = std::fs::read_to_string(path).map_err(|source| DomainError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| DomainError::Parse {
        path: path.display().to_string(),
        source,
    })
}

fn json_files(dir: &Path) -> Result<Vec<(String, std::path::PathBuf)>, DomainError> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let entries = std::fs::read_dir(dir).map_err(|source| DomainError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut out: Vec<_> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .filter_map(|p| Some((p.file_stem()?.to_string_lossy().into_owned(), p)))
        .collect();
    out.sort();
    Ok(out)
}

impl DataStore {
    pub fn load(root: impl AsRef<Path>) -> Result<Self, DomainError> {
        let root = root.as_ref();
        let mut store = Self::default();
        for (name, path) in json_files(&root.join("profiles"))? {
            let p: UserProfile = read_json(&path)?;
            p.check()?;
            store.profiles.insert(name, p);
        }
        for (name, path) in json_files(&root.join("plans"))? {
            let p: TrainingPlan = read_json(&path)?;
            p.check()?;
            store.plans.insert(name, p);
        }
        for (name, path) in json_files(&root.join("routes"))? {
            let r: RouteInfo = read_json(&path)?;
            r.check()?;
            store.routes.insert(name, r);
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_speed_bounds() {
        let mut p = UserProfile::default();
        assert!(p.check().is_ok());
        p.default_target_speed_kmh = 0.0;
        assert!(p.check().is_err());
        p.default_target_speed_kmh = 30.5;
        assert!(p.check().is_err());
    }

    #[test]
    fn plan_needs_segments_with_positive_bounds() {
        let mut plan = TrainingPlan::free_run(60.0);
        assert!(plan.check().is_ok());
        plan.segments[0].target_speed_kmh = Some(-1.0);
        assert!(plan.check().is_err());
        plan.segments.clear();
        assert!(plan.check().is_err());
    }

    #[test]
    fn route_waypoints_in_bounds() {
        let route = RouteInfo {
            name: "r".into(),
            polyline: vec![GeoPoint::new(1.0, 103.0), GeoPoint::new(1.001, 103.0)],
            waypoints: vec![Waypoint {
                index: 2,
                kind: WaypointKind::Waterpoint,
                label: "fountain".into(),
            }],
        };
        assert!(route.check().is_err());
    }
}
