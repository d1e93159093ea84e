use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "outcome", content = "detail")]
pub enum Outcome {
    /// Accepted into the component's inbox.
    Enqueued,
    /// Entry point ran to completion.
    Delivered,
    /// Displaced or discarded by lane policy, shutdown, or a service switch.
    Dropped,
    /// Refused at the inbox because the component is inactive or stopped.
    Inactive,
    /// Entry point returned an error or panicked; the envelope was discarded.
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DeliveryEvent {
    pub component: String,
    #[serde(flatten)]
    pub outcome: Outcome,
}

/// Everything that happened to one dispatched envelope and its descendants,
/// in the order it happened.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DeliveryReport {
    pub events: Vec<DeliveryEvent>,
}

impl DeliveryReport {
    /// Components whose entry point completed, in causal order (repeats kept).
    pub fn delivered(&self) -> Vec<&str> {
        self.events
            .iter()
            .filter(|e| e.outcome == Outcome::Delivered)
            .map(|e| e.component.as_str())
            .collect()
    }

    pub fn count(&self, component: &str, pred: impl Fn(&Outcome) -> bool) -> usize {
        self.events
            .iter()
            .filter(|e| e.component == component && pred(&e.outcome))
            .count()
    }

    pub fn dropped(&self, component: &str) -> usize {
        self.count(component, |o| matches!(o, Outcome::Dropped | Outcome::Inactive))
    }
}

#[derive(Default)]
struct TrackerState {
    outstanding: usize,
    events: Vec<DeliveryEvent>,
}

/// Shared by an injected envelope and everything emitted because of it.
#[derive(Default)]
pub(crate) struct Tracker {
    state: Mutex<TrackerState>,
    idle: Condvar,
}

impl Tracker {
    pub fn begin(&self) {
        self.state.lock().unwrap().outstanding += 1;
    }

    pub fn record(&self, component: &str, outcome: Outcome) {
        self.state.lock().unwrap().events.push(DeliveryEvent {
            component: component.to_string(),
            outcome,
        });
    }

    pub fn end(&self) {
        let mut st = self.state.lock().unwrap();
        st.outstanding -= 1;
        if st.outstanding == 0 {
            self.idle.notify_all();
        }
    }

    fn wait(&self, timeout: Option<Duration>) -> Option<DeliveryReport> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut st = self.state.lock().unwrap();
        while st.outstanding > 0 {
            st = match deadline {
                None => self.idle.wait(st).unwrap(),
                Some(d) => {
                    let left = d.checked_duration_since(Instant::now())?;
                    self.idle.wait_timeout(st, left).unwrap().0
                }
            };
        }
        Some(DeliveryReport {
            events: st.events.clone(),
        })
    }
}

/// Returned by a non-blocking inject; resolves once the envelope and all of
/// its descendants have been handled or dropped.
pub struct DeliveryHandle {
    pub(crate) tracker: Arc<Tracker>,
}

impl DeliveryHandle {
    pub fn wait(self) -> DeliveryReport {
        self.tracker.wait(None).expect("untimed wait completes")
    }

    pub fn wait_timeout(&self, timeout: Duration) -> Option<DeliveryReport> {
        self.tracker.wait(Some(timeout))
    }
}
