//! Pipeline configuration: the declarative routing graph.
//!
//! ```json
//! {"name": "running",
//!  "components": [{"name": "camera", "layer": "input", "entry_point": "...",
//!                  "exit_point": "...", "next": ["yolov8"]}],
//!  "context": [{"service": "running_service", "voice_keywords": ["run"], "tags": [], "priority": 1}]}
//! ```

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Input,
    Processing,
    Service,
    Output,
}

impl Layer {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "input" => Some(Self::Input),
            "processing" => Some(Self::Processing),
            "service" => Some(Self::Service),
            "output" => Some(Self::Output),
            _ => None,
        }
    }

    /// Whether an edge `self -> to` respects the layer ordering.
    pub fn may_feed(self, to: Layer) -> bool {
        use Layer::*;
        matches!(
            (self, to),
            (Input, Processing)
                | (Input, Service)
                | (Processing, Processing)
                | (Processing, Service)
                | (Processing, Output)
                | (Service, Service)
                | (Service, Output)
        )
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layer::Input => "input",
            Layer::Processing => "processing",
            Layer::Service => "service",
            Layer::Output => "output",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentDescriptor {
    pub name: String,
    pub layer: Layer,
    pub entry_point: String,
    pub exit_point: String,
    #[serde(default)]
    pub next: Vec<String>,
}

/// Trigger declaration for one switchable service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextRuleDecl {
    pub service: String,
    #[serde(default)]
    pub voice_keywords: Vec<String>,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default)]
    pub priority: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub name: String,
    pub components: Vec<ComponentDescriptor>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub context: Vec<ContextRuleDecl>,
    /// Free-form per-service settings (e.g. coach thresholds), keyed by
    /// component name.
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub settings: serde_json::Map<String, Value>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    SyntaxError {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("missing field `{field}` in {locus}")]
    MissingField { locus: String, field: String },
    #[error("invalid value for `{field}` in {locus}: {message}")]
    InvalidField {
        locus: String,
        field: String,
        message: String,
    },
    #[error("duplicate component {0:?}")]
    DuplicateComponent(String),
    #[error("pipeline declares no components")]
    EmptyPipeline,
    #[error("unknown component {0:?}")]
    UnknownComponent(String),
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

/// A structural rule broken by a parsed config.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Violation {
    DanglingReference { from: String, to: String },
    EdgeIntoInput { from: String, to: String },
    IllegalLayerEdge { from: String, to: String },
    NonEmptyOutputNext { component: String },
    Cycle { path: Vec<String> },
    EmptyHandler { component: String, which: &'static str },
    MissingInputLayer,
    MissingOutputLayer,
    UnknownContextService { service: String },
}

impl Violation {
    pub fn rule(&self) -> &'static str {
        match self {
            Self::DanglingReference { .. } => "DanglingReference",
            Self::EdgeIntoInput { .. } => "EdgeIntoInput",
            Self::IllegalLayerEdge { .. } => "IllegalLayerEdge",
            Self::NonEmptyOutputNext { .. } => "NonEmptyOutputNext",
            Self::Cycle { .. } => "Cycle",
            Self::EmptyHandler { .. } => "EmptyHandler",
            Self::MissingInputLayer => "MissingInputLayer",
            Self::MissingOutputLayer => "MissingOutputLayer",
            Self::UnknownContextService { .. } => "UnknownContextService",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: ", self.rule())?;
        match self {
            Self::DanglingReference { from, to } => write!(f, "{from} -> {to} (undeclared)"),
            Self::EdgeIntoInput { from, to } => write!(f, "{from} -> {to}"),
            Self::IllegalLayerEdge { from, to } => write!(f, "{from} -> {to}"),
            Self::NonEmptyOutputNext { component } => write!(f, "{component}"),
            Self::Cycle { path } => write!(f, "{}", path.join(" -> ")),
            Self::EmptyHandler { component, which } => write!(f, "{component}.{which}"),
            Self::MissingInputLayer => write!(f, "no input-layer component"),
            Self::MissingOutputLayer => write!(f, "no output-layer component"),
            Self::UnknownContextService { service } => write!(f, "{service}"),
        }
    }
}

fn syntax_error(e: serde_json::Error) -> ConfigError {
    ConfigError::SyntaxError {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

fn take_str(
    obj: &serde_json::Map<String, Value>,
    locus: &str,
    field: &str,
) -> Result<String, ConfigError> {
    match obj.get(field) {
        None | Some(Value::Null) => Err(ConfigError::MissingField {
            locus: locus.into(),
            field: field.into(),
        }),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(ConfigError::InvalidField {
            locus: locus.into(),
            field: field.into(),
            message: "expected string".into(),
        }),
    }
}

fn parse_component(v: &Value, index: usize) -> Result<ComponentDescriptor, ConfigError> {
    let mut locus = format!("components[{index}]");
    let Value::Object(obj) = v else {
        return Err(ConfigError::InvalidField {
            locus,
            field: "components".into(),
            message: "expected object".into(),
        });
    };
    let name = take_str(obj, &locus, "name")?;
    locus = format!("component {name:?}");
    let layer_text = take_str(obj, &locus, "layer")?;
    let layer = Layer::parse(&layer_text).ok_or_else(|| ConfigError::InvalidField {
        locus: locus.clone(),
        field: "layer".into(),
        message: format!("{layer_text:?} is not one of input|processing|service|output"),
    })?;
    let entry_point = take_str(obj, &locus, "entry_point")?;
    let exit_point = take_str(obj, &locus, "exit_point")?;
    let next = match obj.get("next") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .map(|n| {
                n.as_str().map(str::to_string).ok_or_else(|| ConfigError::InvalidField {
                    locus: locus.clone(),
                    field: "next".into(),
                    message: "expected list of component names".into(),
                })
            })
            .collect::<Result<_, _>>()?,
        Some(_) => {
            return Err(ConfigError::InvalidField {
                locus,
                field: "next".into(),
                message: "expected list of component names".into(),
            })
        }
    };
    Ok(ComponentDescriptor {
        name,
        layer,
        entry_point,
        exit_point,
        next,
    })
}

/// Parses a configuration document. Structural rules are checked separately
/// by [`validate_config`].
pub fn parse_config(text: &str) -> Result<PipelineConfig, ConfigError> {
    let root: Value = serde_json::from_str(text).map_err(syntax_error)?;
    let Value::Object(obj) = &root else {
        return Err(ConfigError::InvalidField {
            locus: "document".into(),
            field: "(root)".into(),
            message: "expected object".into(),
        });
    };
    let name = take_str(obj, "pipeline", "name")?;
    let components = match obj.get("components") {
        None | Some(Value::Null) => {
            return Err(ConfigError::MissingField {
                locus: "pipeline".into(),
                field: "components".into(),
            })
        }
        Some(Value::Array(items)) => items
            .iter()
            .enumerate()
            .map(|(i, v)| parse_component(v, i))
            .collect::<Result<Vec<_>, _>>()?,
        Some(_) => {
            return Err(ConfigError::InvalidField {
                locus: "pipeline".into(),
                field: "components".into(),
                message: "expected list".into(),
            })
        }
    };
    if components.is_empty() {
        return Err(ConfigError::EmptyPipeline);
    }
    let mut seen = HashSet::new();
    for c in &components {
        if !seen.insert(c.name.as_str()) {
            return Err(ConfigError::DuplicateComponent(c.name.clone()));
        }
    }
    let context = match obj.get("context") {
        None | Some(Value::Null) => Vec::new(),
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| ConfigError::InvalidField {
            locus: "pipeline".into(),
            field: "context".into(),
            message: e.to_string(),
        })?,
    };
    let settings = match obj.get("settings") {
        None | Some(Value::Null) => serde_json::Map::new(),
        Some(Value::Object(m)) => m.clone(),
        Some(_) => {
            return Err(ConfigError::InvalidField {
                locus: "pipeline".into(),
                field: "settings".into(),
                message: "expected object".into(),
            })
        }
    };
    Ok(PipelineConfig {
        name,
        components,
        context,
        settings,
    })
}

pub fn load_config(path: impl AsRef<Path>) -> Result<PipelineConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_config(&text)
}

impl PipelineConfig {
    pub fn component(&self, name: &str) -> Option<&ComponentDescriptor> {
        self.components.iter().find(|c| c.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization is infallible")
    }

    pub fn names_in_layer(&self, layer: Layer) -> impl Iterator<Item = &str> {
        self.components
            .iter()
            .filter(move |c| c.layer == layer)
            .map(|c| c.name.as_str())
    }

    /// Topological order (declaration order breaks ties). `None` if cyclic.
    pub fn topological_order(&self) -> Option<Vec<String>> {
        let index: HashMap<&str, usize> = self
            .components
            .iter()
            .enumerate()
            .map(|(i, c)| (c.name.as_str(), i))
            .collect();
        let mut indegree = vec![0usize; self.components.len()];
        for c in &self.components {
            for n in &c.next {
                if let Some(&j) = index.get(n.as_str()) {
                    indegree[j] += 1;
                }
            }
        }
        let mut ready: BTreeSet<usize> = (0..indegree.len()).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(self.components.len());
        while let Some(i) = ready.pop_first() {
            order.push(self.components[i].name.clone());
            for n in &self.components[i].next {
                if let Some(&j) = index.get(n.as_str()) {
                    indegree[j] -= 1;
                    if indegree[j] == 0 {
                        ready.insert(j);
                    }
                }
            }
        }
        (order.len() == self.components.len()).then_some(order)
    }
}

fn find_cycle(cfg: &PipelineConfig) -> Option<Vec<String>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Active,
        Done,
    }
    let index: HashMap<&str, usize> = cfg
        .components
        .iter()
        .enumerate()
        .map(|(i, c)| (c.name.as_str(), i))
        .collect();
    let mut marks = vec![Mark::New; cfg.components.len()];

    fn visit(
        i: usize,
        cfg: &PipelineConfig,
        index: &HashMap<&str, usize>,
        marks: &mut [Mark],
        stack: &mut Vec<usize>,
    ) -> Option<Vec<String>> {
        marks[i] = Mark::Active;
        stack.push(i);
        for n in &cfg.components[i].next {
            let Some(&j) = index.get(n.as_str()) else { continue };
            match marks[j] {
                Mark::Active => {
                    let start = stack.iter().position(|&k| k == j).unwrap();
                    let mut path: Vec<String> =
                        stack[start..].iter().map(|&k| cfg.components[k].name.clone()).collect();
                    path.push(cfg.components[j].name.clone());
                    return Some(path);
                }
                Mark::New => {
                    if let Some(p) = visit(j, cfg, index, marks, stack) {
                        return Some(p);
                    }
                }
                Mark::Done => {}
            }
        }
        stack.pop();
        marks[i] = Mark::Done;
        None
    }

    for i in 0..cfg.components.len() {
        if marks[i] == Mark::New {
            if let Some(p) = visit(i, cfg, &index, &mut marks, &mut Vec::new()) {
                return Some(p);
            }
        }
    }
    None
}

/// Checks every structural rule; an empty list means the config is valid.
pub fn validate_config(cfg: &PipelineConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    let by_name: HashMap<&str, &ComponentDescriptor> =
        cfg.components.iter().map(|c| (c.name.as_str(), c)).collect();

    for c in &cfg.components {
        if c.entry_point.trim().is_empty() {
            out.push(Violation::EmptyHandler {
                component: c.name.clone(),
                which: "entry_point",
            });
        }
        if c.exit_point.trim().is_empty() {
            out.push(Violation::EmptyHandler {
                component: c.name.clone(),
                which: "exit_point",
            });
        }
        if c.layer == Layer::Output && !c.next.is_empty() {
            out.push(Violation::NonEmptyOutputNext {
                component: c.name.clone(),
            });
        }
        for n in &c.next {
            let Some(target) = by_name.get(n.as_str()) else {
                out.push(Violation::DanglingReference {
                    from: c.name.clone(),
                    to: n.clone(),
                });
                continue;
            };
            if target.layer == Layer::Input {
                out.push(Violation::EdgeIntoInput {
                    from: c.name.clone(),
                    to: n.clone(),
                });
            } else if c.layer != Layer::Output && !c.layer.may_feed(target.layer) {
                out.push(Violation::IllegalLayerEdge {
                    from: c.name.clone(),
                    to: n.clone(),
                });
            }
        }
    }
    if let Some(path) = find_cycle(cfg) {
        out.push(Violation::Cycle { path });
    }
    if !cfg.components.iter().any(|c| c.layer == Layer::Input) {
        out.push(Violation::MissingInputLayer);
    }
    if !cfg.components.iter().any(|c| c.layer == Layer::Output) {
        out.push(Violation::MissingOutputLayer);
    }
    for rule in &cfg.context {
        let ok = by_name
            .get(rule.service.as_str())
            .is_some_and(|c| c.layer == Layer::Service);
        if !ok {
            out.push(Violation::UnknownContextService {
                service: rule.service.clone(),
            });
        }
    }
    out
}

/// Transitive closure of `start` over `next` edges (excluding `start` unless
/// it lies on a cycle).
pub fn descendant_set(cfg: &PipelineConfig, start: &str) -> Result<BTreeSet<String>, ConfigError> {
    let by_name: HashMap<&str, &ComponentDescriptor> =
        cfg.components.iter().map(|c| (c.name.as_str(), c)).collect();
    let root = by_name
        .get(start)
        .ok_or_else(|| ConfigError::UnknownComponent(start.to_string()))?;
    let mut seen = BTreeSet::new();
    let mut queue: VecDeque<&str> = root.next.iter().map(String::as_str).collect();
    while let Some(n) = queue.pop_front() {
        if !seen.insert(n.to_string()) {
            continue;
        }
        if let Some(c) = by_name.get(n) {
            queue.extend(c.next.iter().map(String::as_str));
        }
    }
    Ok(seen)
}
