use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::trace::{generate_watch_trace, generate_watch_trace_along, SimulatedTrace};
use super::SimError;
use crate::message::payload::{DeviceKind, LayoutDirective};
use crate::message::{check_payload, Envelope, Namespace, TypeTag};
use crate::services::domain::RouteInfo;
use crate::services::ports::FrameFixtures;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    Simulated,
    Wall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimClient {
    pub id: String,
    pub device_kind: DeviceKind,
    #[serde(default)]
    pub inputs: BTreeSet<TypeTag>,
    #[serde(default)]
    pub outputs: BTreeSet<TypeTag>,
}

/// One envelope to send. The payload is given inline or named from the frame
/// fixtures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmitTemplate {
    #[serde(rename = "type")]
    pub type_tag: TypeTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture: Option<String>,
}

/// A generated watch trace, sent one sample per period from `at_ms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    #[serde(flatten)]
    pub spec: SimulatedTrace,
    /// Route whose polyline supplies sample locations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub route: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expectation {
    #[serde(rename = "type")]
    pub type_tag: TypeTag,
    /// Substring of the compact payload JSON.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_overlays: Option<usize>,
    pub timeout_ms: u64,
}

impl Expectation {
    pub fn matches(&self, env: &Envelope) -> bool {
        if env.type_tag != self.type_tag {
            return false;
        }
        if let Some(needle) = &self.contains {
            if !serde_json::to_string(&env.payload).unwrap_or_default().contains(needle.as_str()) {
                return false;
            }
        }
        match self.min_overlays {
            Some(n) => env.payload_as::<LayoutDirective>().is_some_and(|d| d.overlays.len() >= n),
            None => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub at_ms: u64,
    pub client: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emit: Option<EmitTemplate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<TraceStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect: Option<Expectation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScript {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    /// Pipeline config the script was written against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<String>,
    pub clients: Vec<SimClient>,
    pub steps: Vec<Step>,
}

fn script_err(step: Option<usize>, reason: impl Into<String>) -> SimError {
    SimError::ScriptError { step, reason: reason.into() }
}

/// A concrete send or check on the scenario timeline.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Event {
    Emit { client: usize, type_tag: TypeTag, payload: Value },
    Check { step: usize, client: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct TimedEvent {
    pub t_ms: u64,
    pub event: Event,
}

impl ScenarioScript {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| script_err(None, format!("{}: {e}", path.display())))?;
        let script: Self = serde_json::from_str(&text).map_err(|e| script_err(None, format!("{}: {e}", path.display())))?;
        script.validate()?;
        Ok(script)
    }

    pub fn client_index(&self, id: &str) -> Option<usize> {
        self.clients.iter().position(|c| c.id == id)
    }

    /// Structural checks that need no fixtures or routes.
    pub fn validate(&self) -> Result<(), SimError> {
        if self.clients.is_empty() {
            return Err(script_err(None, "no clients"));
        }
        let mut ids = BTreeSet::new();
        for c in &self.clients {
            if !ids.insert(c.id.as_str()) {
                return Err(script_err(None, format!("duplicate client {:?}", c.id)));
            }
            if c.inputs.is_empty() && c.outputs.is_empty() {
                return Err(script_err(None, format!("client {:?} declares nothing", c.id)));
            }
        }
        let mut last = 0;
        for (i, s) in self.steps.iter().enumerate() {
            let err = |r: String| Err(script_err(Some(i), r));
            if s.at_ms < last {
                return err(format!("at_ms {} before previous step at {last}", s.at_ms));
            }
            last = s.at_ms;
            let Some(client) = self.client_index(&s.client).map(|c| &self.clients[c]) else {
                return err(format!("undeclared client {:?}", s.client));
            };
            let kinds = [s.emit.is_some(), s.trace.is_some(), s.expect.is_some()];
            if kinds.iter().filter(|k| **k).count() != 1 {
                return err("step needs exactly one of emit, trace, expect".into());
            }
            if let Some(e) = &s.emit {
                if !e.type_tag.is_known() {
                    return err(format!("unknown type {}", e.type_tag));
                }
                match e.type_tag.namespace() {
                    Some(Namespace::Sensor | Namespace::Input) if !client.inputs.contains(&e.type_tag) => {
                        return err(format!("{} not declared by {}", e.type_tag, client.id));
                    }
                    Some(Namespace::Feedback) | Some(Namespace::Service) | None => {
                        return err(format!("clients cannot emit {}", e.type_tag));
                    }
                    _ => {}
                }
                if e.payload.is_some() == e.fixture.is_some() {
                    return err("emit needs exactly one of payload, fixture".into());
                }
                if let Some(p) = &e.payload {
                    check_payload(&e.type_tag, p).map_err(|r| script_err(Some(i), r))?;
                }
                if e.fixture.is_some() && e.type_tag != TypeTag::SensorCameraFrame {
                    return err("fixtures only supply sensor.camera_frame".into());
                }
            }
            if let Some(t) = &s.trace {
                if !client.inputs.contains(&TypeTag::SensorWatch) {
                    return err(format!("{} does not declare sensor.watch", client.id));
                }
                t.spec.check().map_err(|e| script_err(Some(i), e.to_string()))?;
            }
            if let Some(x) = &s.expect {
                if !client.outputs.contains(&x.type_tag) {
                    return err(format!("{} does not declare output {}", client.id, x.type_tag));
                }
            }
        }
        Ok(())
    }

    /// Expands traces and fixtures into a time-ordered event list. Sends at
    /// a given instant precede checks due at the same instant.
    pub(crate) fn timeline(
        &self,
        fixtures: &FrameFixtures,
        routes: &BTreeMap<String, RouteInfo>,
    ) -> Result<Vec<TimedEvent>, SimError> {
        self.validate()?;
        let mut events: Vec<(u64, u8, usize, TimedEvent)> = Vec::new();
        let mut push = |t_ms: u64, event: Event| {
            let rank = matches!(event, Event::Check { .. }) as u8;
            let n = events.len();
            events.push((t_ms, rank, n, TimedEvent { t_ms, event }));
        };
        for (i, s) in self.steps.iter().enumerate() {
            let client = self.client_index(&s.client).expect("validated");
            if let Some(e) = &s.emit {
                let payload = match (&e.payload, &e.fixture) {
                    (Some(p), _) => p.clone(),
                    (None, Some(name)) => {
                        let frame = fixtures
                            .frame(name)
                            .ok_or_else(|| script_err(Some(i), format!("unknown fixture {name:?}")))?;
                        serde_json::to_value(frame).expect("frame serializes")
                    }
                    (None, None) => unreachable!("validated"),
                };
                push(s.at_ms, Event::Emit { client, type_tag: e.type_tag.clone(), payload });
            }
            if let Some(t) = &s.trace {
                let samples = match &t.route {
                    Some(name) => {
                        let route =
                            routes.get(name).ok_or_else(|| script_err(Some(i), format!("unknown route {name:?}")))?;
                        generate_watch_trace_along(&t.spec, route)
                    }
                    None => generate_watch_trace(&t.spec),
                }
                .map_err(|e| script_err(Some(i), e.to_string()))?;
                for (k, sample) in samples.iter().enumerate() {
                    push(
                        s.at_ms + k as u64 * t.spec.period_ms,
                        Event::Emit {
                            client,
                            type_tag: TypeTag::SensorWatch,
                            payload: serde_json::to_value(sample).expect("sample serializes"),
                        },
                    );
                }
            }
            if let Some(x) = &s.expect {
                push(s.at_ms + x.timeout_ms, Event::Check { step: i, client });
            }
        }
        events.sort_by_key(|(t, rank, n, _)| (*t, *rank, *n));
        Ok(events.into_iter().map(|(.., e)| e).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn script(steps: Value) -> ScenarioScript {
        serde_json::from_value(json!({
            "name": "t",
            "clients": [
                {"id": "watch-1", "device_kind": "watch", "inputs": ["sensor.watch"]},
                {"id": "ohmd-1", "device_kind": "ohmd", "inputs": ["input.voice"], "outputs": ["feedback.display"]}
            ],
            "steps": steps
        }))
        .unwrap()
    }

    #[test]
    fn parses_and_expands_a_trace() {
        let s = script(json!([
            {"at_ms": 0, "client": "ohmd-1", "emit": {"type": "input.voice", "payload": {"transcript": "start running"}}},
            {"at_ms": 1000, "client": "watch-1",
             "trace": {"kind": "constant", "speed_kmh": 8.0, "duration_s": 3, "period_ms": 1000}},
            {"at_ms": 1000, "client": "ohmd-1", "expect": {"type": "feedback.display", "contains": "Speed up", "timeout_ms": 1500}}
        ]));
        let tl = s.timeline(&FrameFixtures::default(), &BTreeMap::new()).unwrap();
        let times: Vec<u64> = tl.iter().map(|e| e.t_ms).collect();
        assert_eq!(times, vec![0, 1000, 2000, 2500, 3000]);
        assert!(matches!(tl[3].event, Event::Check { step: 2, client: 1 }));
    }

    #[test]
    fn checks_follow_sends_at_the_same_instant() {
        let s = script(json!([
            {"at_ms": 0, "client": "ohmd-1", "expect": {"type": "feedback.display", "timeout_ms": 1000}},
            {"at_ms": 1000, "client": "ohmd-1", "emit": {"type": "input.voice", "payload": {"transcript": "hi"}}}
        ]));
        let tl = s.timeline(&FrameFixtures::default(), &BTreeMap::new()).unwrap();
        assert!(matches!(tl[0].event, Event::Emit { .. }));
        assert!(matches!(tl[1].event, Event::Check { .. }));
    }

    #[test]
    fn rejects_bad_scripts() {
        let cases = [
            json!([{"at_ms": 5, "client": "ohmd-1", "emit": {"type": "input.voice", "payload": {"transcript": "a"}}},
                   {"at_ms": 4, "client": "ohmd-1", "emit": {"type": "input.voice", "payload": {"transcript": "b"}}}]),
            json!([{"at_ms": 0, "client": "nobody", "emit": {"type": "input.voice", "payload": {"transcript": "a"}}}]),
            json!([{"at_ms": 0, "client": "watch-1", "emit": {"type": "input.voice", "payload": {"transcript": "a"}}}]),
            json!([{"at_ms": 0, "client": "ohmd-1", "emit": {"type": "input.voice", "payload": {"words": 1}}}]),
            json!([{"at_ms": 0, "client": "watch-1", "expect": {"type": "feedback.display", "timeout_ms": 10}}]),
            json!([{"at_ms": 0, "client": "ohmd-1"}]),
        ];
        for (n, steps) in cases.into_iter().enumerate() {
            assert!(matches!(script(steps).validate(), Err(SimError::ScriptError { .. })), "case {n}");
        }
    }

    #[test]
    fn expect_without_timeout_does_not_parse() {
        let r: Result<Step, _> = serde_json::from_value(json!(
            {"at_ms": 0, "client": "ohmd-1", "expect": {"type": "feedback.display"}}
        ));
        assert!(r.is_err());
    }

    #[test]
    fn missing_fixture_is_a_script_error() {
        let mut s = script(json!([]));
        s.clients[1].inputs.insert(TypeTag::SensorCameraFrame);
        s.steps.push(Step {
            at_ms: 0,
            client: "ohmd-1".into(),
            emit: Some(EmitTemplate { type_tag: TypeTag::SensorCameraFrame, payload: None, fixture: Some("nope".into()) }),
            trace: None,
            expect: None,
        });
        let e = s.timeline(&FrameFixtures::default(), &BTreeMap::new()).unwrap_err();
        assert!(matches!(e, SimError::ScriptError { step: Some(0), .. }));
    }
}
