use serde::Serialize;

use super::inbox::Counters;
use super::ComponentState;
use crate::config::Layer;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentMetrics {
    pub name: String,
    pub layer: Layer,
    pub state: ComponentState,
    pub active: bool,
    pub received: u64,
    pub emitted: u64,
    pub processed: u64,
    pub dropped: u64,
    pub failed: u64,
    pub in_flight: u64,
    pub latency_p50_us: u64,
    pub latency_p95_us: u64,
    pub exit_calls: u64,
}

impl ComponentMetrics {
    pub(crate) fn from_counters(
        name: &str,
        layer: Layer,
        state: ComponentState,
        active: bool,
        c: &Counters,
        exit_calls: u64,
    ) -> Self {
        let mut lat: Vec<u64> = c.latencies_us.iter().copied().collect();
        lat.sort_unstable();
        Self {
            name: name.to_string(),
            layer,
            state,
            active,
            received: c.received,
            emitted: c.emitted,
            processed: c.processed,
            dropped: c.dropped,
            failed: c.failed,
            in_flight: c.in_flight,
            latency_p50_us: quantile(&lat, 0.50),
            latency_p95_us: quantile(&lat, 0.95),
            exit_calls,
        }
    }

    /// received = processed + dropped + in_flight
    pub fn is_conserved(&self) -> bool {
        self.received == self.processed + self.dropped + self.in_flight
    }
}

/// Nearest-rank quantile of a sorted slice; 0 when empty.
pub fn quantile(sorted: &[u64], q: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsTable {
    pub taken_at_ms: u64,
    pub components: Vec<ComponentMetrics>,
    pub skipped: Vec<String>,
}

impl MetricsTable {
    pub fn get(&self, name: &str) -> Option<&ComponentMetrics> {
        self.components.iter().find(|c| c.name == name)
    }

    pub fn total_dropped(&self) -> u64 {
        self.components.iter().map(|c| c.dropped).sum()
    }
}
