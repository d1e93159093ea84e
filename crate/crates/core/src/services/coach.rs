//! Running coach: speed band rule, proactive route events and the run summary.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::domain::{Modality, RouteInfo, TrainingPlan, UserProfile, WaypointKind};
use crate::message::payload::{GeoPoint, WatchSample};

const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CoachError {
    #[error("training plan exhausted")]
    PlanExhausted,
    #[error("run has no samples")]
    EmptyRun,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionKind {
    SpeedUp,
    SlowDown,
    MaintainSilent,
    Encourage,
    DangerAlert,
    Direction,
    Waterpoint,
    Summary,
}

impl InstructionKind {
    pub fn is_silent(self) -> bool {
        self == InstructionKind::MaintainSilent
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoachInstruction {
    pub kind: InstructionKind,
    pub text: String,
    pub modality: Modality,
    pub ts_ms: u64,
}

impl CoachInstruction {
    pub fn silent(ts_ms: u64) -> Self {
        Self {
            kind: InstructionKind::MaintainSilent,
            text: String::new(),
            modality: Modality::Visual,
            ts_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoachSettings {
    pub band_kmh: f64,
    pub persistence_samples: u32,
    pub refractory_ms: u64,
    pub smoothing_window: usize,
    pub danger_radius_m: f64,
    pub cue_radius_m: f64,
    pub encourage_every_s: f64,
}

impl Default for CoachSettings {
    fn default() -> Self {
        Self {
            band_kmh: 0.5,
            persistence_samples: 3,
            refractory_ms: 10_000,
            smoothing_window: 5,
            danger_radius_m: 30.0,
            cue_radius_m: 50.0,
            encourage_every_s: 300.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningState {
    pub started_ms: Option<u64>,
    pub last_ms: Option<u64>,
    pub elapsed_s: f64,
    pub distance_m: f64,
    pub segment: usize,
    pub segment_start_s: f64,
    pub segment_start_m: f64,
    pub window: VecDeque<WatchSample>,
    pub samples: u64,
    pub last_speed_kmh: Option<f64>,
    pub below_run: u32,
    pub above_run: u32,
    pub last_fired_ms: BTreeMap<InstructionKind, u64>,
    pub alerted_waypoints: BTreeSet<usize>,
    pub encouragements: u64,
    pub counts: BTreeMap<InstructionKind, u64>,
    pub finished: bool,
}

impl RunningState {
    pub fn smoothed_speed(&self) -> Option<f64> {
        if self.window.is_empty() {
            return None;
        }
        Some(self.window.iter().map(|s| s.speed_kmh).sum::<f64>() / self.window.len() as f64)
    }

    fn count(&mut self, kind: InstructionKind) {
        *self.counts.entry(kind).or_default() += 1;
    }

    /// Integrates the sample into elapsed time and distance.
    fn advance(&mut self, sample: &WatchSample, now_ms: u64, window: usize) {
        match (self.started_ms, self.last_ms, self.last_speed_kmh) {
            (Some(start), Some(last), Some(prev)) => {
                let now_ms = now_ms.max(last);
                let dt = (now_ms - last) as f64 / 1000.0;
                self.distance_m += (prev + sample.speed_kmh) / 2.0 * dt / 3.6;
                self.elapsed_s = (now_ms - start) as f64 / 1000.0;
                self.last_ms = Some(now_ms);
            }
            _ => {
                self.started_ms = Some(now_ms);
                self.last_ms = Some(now_ms);
            }
        }
        self.last_speed_kmh = Some(sample.speed_kmh);
        self.samples += 1;
        self.window.push_back(sample.clone());
        while self.window.len() > window.max(1) {
            self.window.pop_front();
        }
    }

    /// Moves past every segment whose bound has been met. Returns false once
    /// the plan has no segment left.
    fn roll_segments(&mut self, plan: &TrainingPlan) -> bool {
        while let Some(seg) = plan.segments.get(self.segment) {
            match (seg.duration_s, seg.distance_m) {
                (Some(d), _) if self.elapsed_s - self.segment_start_s >= d => {
                    self.segment_start_s += d;
                    self.segment_start_m = self.distance_m;
                }
                (None, Some(m)) if self.distance_m - self.segment_start_m >= m => {
                    self.segment_start_m += m;
                    self.segment_start_s = self.elapsed_s;
                }
                _ => return true,
            }
            self.segment += 1;
        }
        false
    }
}

pub fn target_speed(plan: &TrainingPlan, profile: &UserProfile, segment: usize) -> f64 {
    plan.segments
        .get(segment)
        .and_then(|s| s.target_speed_kmh)
        .unwrap_or(profile.default_target_speed_kmh)
}

/// Advances the run by one watch sample and decides on a speed instruction.
pub fn coach_step(
    rs: &mut RunningState,
    plan: &TrainingPlan,
    profile: &UserProfile,
    sample: &WatchSample,
    now_ms: u64,
    settings: &CoachSettings,
) -> Result<CoachInstruction, CoachError> {
    if rs.finished {
        return Err(CoachError::PlanExhausted);
    }
    rs.advance(sample, now_ms, settings.smoothing_window);
    if !rs.roll_segments(plan) {
        rs.finished = true;
        return Err(CoachError::PlanExhausted);
    }
    let target = target_speed(plan, profile, rs.segment);
    let smoothed = rs.smoothed_speed().unwrap_or(sample.speed_kmh);
    if smoothed < target - settings.band_kmh {
        rs.below_run += 1;
        rs.above_run = 0;
    } else if smoothed > target + settings.band_kmh {
        rs.above_run += 1;
        rs.below_run = 0;
    } else {
        rs.below_run = 0;
        rs.above_run = 0;
    }
    let kind = if rs.below_run >= settings.persistence_samples {
        InstructionKind::SpeedUp
    } else if rs.above_run >= settings.persistence_samples {
        InstructionKind::SlowDown
    } else {
        return Ok(CoachInstruction::silent(now_ms));
    };
    let cooled = rs
        .last_fired_ms
        .get(&kind)
        .is_none_or(|&last| now_ms.saturating_sub(last) >= settings.refractory_ms);
    if !cooled {
        return Ok(CoachInstruction::silent(now_ms));
    }
    rs.last_fired_ms.insert(kind, now_ms);
    rs.count(kind);
    let verb = if kind == InstructionKind::SpeedUp { "Speed up" } else { "Slow down" };
    Ok(CoachInstruction {
        kind,
        text: format!("{verb}: {smoothed:.1} km/h, target {target:.1}"),
        modality: profile.preferred_modality,
        ts_ms: now_ms,
    })
}

pub fn haversine_m(a: GeoPoint, b: GeoPoint) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dp = p2 - p1;
    let dl = (b.lon - a.lon).to_radians();
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Route and duration driven suggestions. Each waypoint fires at most once.
pub fn proactive_events(
    rs: &mut RunningState,
    route: Option<&RouteInfo>,
    location: Option<GeoPoint>,
    profile: &UserProfile,
    now_ms: u64,
    settings: &CoachSettings,
) -> Vec<CoachInstruction> {
    let mut out = Vec::new();
    if let (Some(route), Some(here)) = (route, location) {
        for (i, w) in route.waypoints.iter().enumerate() {
            if rs.alerted_waypoints.contains(&i) {
                continue;
            }
            let d = haversine_m(here, route.waypoint_position(w));
            let (kind, radius, text, modality) = match w.kind {
                WaypointKind::TrafficLight => (
                    InstructionKind::DangerAlert,
                    settings.danger_radius_m,
                    format!("Caution: traffic light ahead ({})", w.label),
                    Modality::Both,
                ),
                WaypointKind::TurnLeft => (
                    InstructionKind::Direction,
                    settings.cue_radius_m,
                    format!("Turn left at {}", w.label),
                    profile.preferred_modality,
                ),
                WaypointKind::TurnRight => (
                    InstructionKind::Direction,
                    settings.cue_radius_m,
                    format!("Turn right at {}", w.label),
                    profile.preferred_modality,
                ),
                WaypointKind::Waterpoint => (
                    InstructionKind::Waterpoint,
                    settings.cue_radius_m,
                    format!("Water at {}", w.label),
                    profile.preferred_modality,
                ),
            };
            if d <= radius {
                rs.alerted_waypoints.insert(i);
                rs.count(kind);
                out.push(CoachInstruction { kind, text, modality, ts_ms: now_ms });
            }
        }
    }
    if settings.encourage_every_s > 0.0 {
        let due = (rs.elapsed_s / settings.encourage_every_s).floor() as u64;
        if due > rs.encouragements {
            rs.encouragements = due;
            rs.count(InstructionKind::Encourage);
            let minutes = (rs.elapsed_s / 60.0).round();
            out.push(CoachInstruction {
                kind: InstructionKind::Encourage,
                text: format!("{minutes} minutes in, keep it up!"),
                modality: profile.preferred_modality,
                ts_ms: now_ms,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub distance_m: f64,
    pub duration_s: f64,
    pub avg_speed_kmh: f64,
    pub instructions: BTreeMap<InstructionKind, u64>,
}

impl RunSummary {
    pub fn text(&self) -> String {
        format!(
            "Run complete: {:.2} km in {:.0} min, avg {:.1} km/h",
            self.distance_m / 1000.0,
            self.duration_s / 60.0,
            self.avg_speed_kmh
        )
    }
}

pub fn summarize_run(rs: &RunningState) -> Result<RunSummary, CoachError> {
    if rs.samples == 0 {
        return Err(CoachError::EmptyRun);
    }
    let avg = if rs.elapsed_s > 0.0 { 3.6 * rs.distance_m / rs.elapsed_s } else { 0.0 };
    Ok(RunSummary {
        distance_m: rs.distance_m,
        duration_s: rs.elapsed_s,
        avg_speed_kmh: avg,
        instructions: rs.counts.clone(),
    })
}
