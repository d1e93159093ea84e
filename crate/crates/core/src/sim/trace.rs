use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::message::payload::{GeoPoint, WatchSample};
use crate::services::coach::haversine_m;
use crate::services::domain::RouteInfo;

pub const MAX_SPEED_KMH: f64 = 45.0;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid trace spec: {0}")]
pub struct InvalidSpec(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceKind {
    Constant { speed_kmh: f64 },
    Ramp { from_kmh: f64, to_kmh: f64 },
    /// 0 up to `peak_kmh` at the midpoint and back down.
    Triangular { peak_kmh: f64 },
    /// Gaussian noise around a base speed.
    Noisy { base_kmh: f64, sigma_kmh: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedTrace {
    #[serde(flatten)]
    pub kind: TraceKind,
    pub duration_s: f64,
    pub period_ms: u64,
}

impl SimulatedTrace {
    pub fn new(kind: TraceKind, duration_s: f64, period_ms: u64) -> Self {
        Self { kind, duration_s, period_ms }
    }

    pub fn sample_count(&self) -> usize {
        (self.duration_s * 1000.0 / self.period_ms as f64).floor() as usize
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn check(&self) -> Result<(), InvalidSpec> {
        let bad = |m: String| Err(InvalidSpec(m));
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return bad(format!("duration_s {} must be positive", self.duration_s));
        }
        if self.period_ms == 0 {
            return bad("period_ms must be positive".into());
        }
        if self.sample_count() == 0 {
            return bad("duration shorter than one period".into());
        }
        let speeds: Vec<f64> = match self.kind {
            TraceKind::Constant { speed_kmh } => vec![speed_kmh],
            TraceKind::Ramp { from_kmh, to_kmh } => vec![from_kmh, to_kmh],
            TraceKind::Triangular { peak_kmh } => vec![peak_kmh],
            TraceKind::Noisy { base_kmh, sigma_kmh, .. } => {
                if !(sigma_kmh >= 0.0) {
                    return bad(format!("sigma_kmh {sigma_kmh} must be non-negative"));
                }
                vec![base_kmh]
            }
        };
        match speeds.iter().find(|v| !(0.0..=MAX_SPEED_KMH).contains(*v)) {
            Some(v) => bad(format!("speed {v} outside [0, {MAX_SPEED_KMH}]")),
            None => Ok(()),
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Speeds at `t = i * period` for each sample index.
pub fn trace_speeds(spec: &SimulatedTrace) -> Result<Vec<f64>, InvalidSpec> {
    spec.check()?;
    let n = spec.sample_count();
    let d = spec.duration_s;
    let t = |i: usize| i as f64 * spec.period_ms as f64 / 1000.0;
    Ok(match spec.kind {
        TraceKind::Constant { speed_kmh } => vec![speed_kmh; n],
        TraceKind::Ramp { from_kmh, to_kmh } => (0..n).map(|i| from_kmh + (to_kmh - from_kmh) * t(i) / d).collect(),
        TraceKind::Triangular { peak_kmh } => {
            let half = d / 2.0;
            (0..n).map(|i| peak_kmh * (1.0 - (t(i) - half).abs() / half)).collect()
        }
        TraceKind::Noisy { base_kmh, sigma_kmh, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| (base_kmh + sigma_kmh * gaussian(&mut rng)).clamp(0.0, MAX_SPEED_KMH)).collect()
        }
    })
}

/// Watch samples for the trace; heart rate and calories follow speed.
pub fn generate_watch_trace(spec: &SimulatedTrace) -> Result<Vec<WatchSample>, InvalidSpec> {
    let dt_h = spec.period_ms as f64 / 3_600_000.0;
    let mut kcal = 0.0;
    Ok(trace_speeds(spec)?
        .into_iter()
        .map(|v| {
            let s = WatchSample {
                heart_rate_bpm: (70.0 + 8.0 * v).min(220.0).round(),
                speed_kmh: v,
                calories_kcal: (kcal * 10.0_f64).round() / 10.0,
                location: None,
            };
            kcal += 65.0 * v * dt_h;
            s
        })
        .collect())
}

/// Position after `distance_m` along the polyline, clamped to its end.
pub fn point_along(polyline: &[GeoPoint], distance_m: f64) -> GeoPoint {
    let mut left = distance_m.max(0.0);
    for w in polyline.windows(2) {
        let seg = haversine_m(w[0], w[1]);
        if left <= seg && seg > 0.0 {
            let f = left / seg;
            return GeoPoint::new(w[0].lat + (w[1].lat - w[0].lat) * f, w[0].lon + (w[1].lon - w[0].lon) * f);
        }
        left -= seg;
    }
    *polyline.last().expect("route has points")
}

/// As [`generate_watch_trace`], with locations advancing along `route` by the
/// trapezoidal distance covered.
pub fn generate_watch_trace_along(spec: &SimulatedTrace, route: &RouteInfo) -> Result<Vec<WatchSample>, InvalidSpec> {
    let mut samples = generate_watch_trace(spec)?;
    let dt_s = spec.period_ms as f64 / 1000.0;
    let mut dist = 0.0;
    let mut prev: Option<f64> = None;
    for s in &mut samples {
        if let Some(p) = prev {
            dist += (p + s.speed_kmh) / 2.0 * dt_s / 3.6;
        }
        prev = Some(s.speed_kmh);
        let p = point_along(&route.polyline, dist);
        s.location = Some(GeoPoint::new((p.lat * 1e7).round() / 1e7, (p.lon * 1e7).round() / 1e7));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_count_and_values() {
        let s = generate_watch_trace(&SimulatedTrace::new(TraceKind::Constant { speed_kmh: 10.0 }, 600.0, 1000)).unwrap();
        assert_eq!(s.len(), 600);
        assert!(s.iter().all(|x| x.speed_kmh == 10.0));
    }

    #[test]
    fn noisy_is_reproducible() {
        let spec = SimulatedTrace::new(TraceKind::Noisy { base_kmh: 9.0, sigma_kmh: 1.5, seed: 42 }, 120.0, 500);
        let a = generate_watch_trace(&spec).unwrap();
        let b = generate_watch_trace(&spec).unwrap();
        assert_eq!(a, b);
        let other = SimulatedTrace::new(TraceKind::Noisy { base_kmh: 9.0, sigma_kmh: 1.5, seed: 43 }, 120.0, 500);
        assert_ne!(a, generate_watch_trace(&other).unwrap());
    }

    #[test]
    fn triangular_peaks_mid_trace() {
        let v = trace_speeds(&SimulatedTrace::new(TraceKind::Triangular { peak_kmh: 10.0 }, 600.0, 1000)).unwrap();
        let peak = v.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(v.iter().position(|&x| x == peak), Some(300));
        assert_eq!(peak, 10.0);
        assert_eq!(v[0], 0.0);
    }

    #[test]
    fn ramp_endpoints() {
        let v = trace_speeds(&SimulatedTrace::new(TraceKind::Ramp { from_kmh: 6.0, to_kmh: 12.0 }, 60.0, 1000)).unwrap();
        assert_eq!(v[0], 6.0);
        assert!((v[59] - (6.0 + 6.0 * 59.0 / 60.0)).abs() < 1e-12);
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            SimulatedTrace::new(TraceKind::Constant { speed_kmh: 10.0 }, 0.0, 1000),
            SimulatedTrace::new(TraceKind::Constant { speed_kmh: 10.0 }, 10.0, 0),
            SimulatedTrace::new(TraceKind::Constant { speed_kmh: 50.0 }, 10.0, 1000),
            SimulatedTrace::new(TraceKind::Noisy { base_kmh: 5.0, sigma_kmh: -1.0, seed: 0 }, 10.0, 1000),
            SimulatedTrace::new(TraceKind::Constant { speed_kmh: 5.0 }, 0.5, 1000),
        ] {
            assert!(generate_watch_trace(&spec).is_err(), "{spec:?}");
        }
    }

    #[test]
    fn along_route_moves_forward() {
        let route = RouteInfo {
            name: "r".into(),
            polyline: vec![GeoPoint::new(1.0, 103.0), GeoPoint::new(1.01, 103.0)],
            waypoints: vec![],
        };
        let s = generate_watch_trace_along(&SimulatedTrace::new(TraceKind::Constant { speed_kmh: 36.0 }, 11.0, 1000), &route)
            .unwrap();
        let start = s[0].location.unwrap();
        let end = s[10].location.unwrap();
        assert_eq!(start, GeoPoint::new(1.0, 103.0));
        assert!((haversine_m(start, end) - 100.0).abs() < 0.1);
    }
}
