//! External capability ports (OCR, translation, detection, language model)
//! with fixture-backed mocks and a JSON-over-HTTP adapter.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::mpsc;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::message::payload::{BoundingBox, CameraFrame};

pub const DEFAULT_PORT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortName {
    Ocr,
    Translator,
    Detector,
    Model,
}

impl std::fmt::Display for PortName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PortName::Ocr => "ocr",
            PortName::Translator => "translator",
            PortName::Detector => "detector",
            PortName::Model => "model",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PortError {
    #[error("port {port} timed out after {elapsed_ms} ms")]
    PortTimeout { port: PortName, elapsed_ms: u64 },
    #[error("port {port} failed: {message}")]
    Failed { port: PortName, message: String },
    #[error("port setup: {0}")]
    Setup(String),
}

impl PortError {
    fn failed(port: PortName, message: impl Into<String>) -> Self {
        PortError::Failed { port, message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextBox {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub label: String,
    #[serde(default = "one")]
    pub score: f64,
}

fn one() -> f64 {
    1.0
}

pub trait TextRecognizer: Send + Sync {
    fn recognize(&self, frame: &CameraFrame) -> Result<Vec<TextBox>, PortError>;
}

pub trait Translator: Send + Sync {
    fn translate(&self, text: &str, locale: &str) -> Result<String, PortError>;
}

pub trait LanguageModel: Send + Sync {
    /// Rewrites a literal translation for the local context.
    fn adapt(&self, text: &str, locale: &str) -> Result<String, PortError>;
    fn answer(&self, label: &str, question: &str) -> Result<String, PortError>;
}

pub trait ObjectDetector: Send + Sync {
    fn detect(&self, frame: &CameraFrame) -> Result<Vec<Detection>, PortError>;
}

/// Artificial latency, fixed or uniform in `[min_ms, max_ms]`, seeded.
#[derive(Debug)]
pub struct Delay {
    min_ms: u64,
    max_ms: u64,
    rng: Mutex<ChaCha8Rng>,
    log: Mutex<Vec<u64>>,
}

impl Delay {
    pub fn none() -> Arc<Self> {
        Self::uniform(0, 0, 0)
    }

    pub fn fixed(ms: u64) -> Arc<Self> {
        Self::uniform(ms, ms, 0)
    }

    pub fn uniform(min_ms: u64, max_ms: u64, seed: u64) -> Arc<Self> {
        Arc::new(Self {
            min_ms,
            max_ms: max_ms.max(min_ms),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            log: Mutex::new(Vec::new()),
        })
    }

    /// Sleeps for the next sampled delay and returns it.
    pub fn apply(&self) -> u64 {
        let ms = if self.max_ms == self.min_ms {
            self.min_ms
        } else {
            self.rng.lock().unwrap().random_range(self.min_ms..=self.max_ms)
        };
        self.log.lock().unwrap().push(ms);
        if ms > 0 {
            std::thread::sleep(Duration::from_millis(ms));
        }
        ms
    }

    /// Every delay sampled so far, in call order.
    pub fn history(&self) -> Vec<u64> {
        self.log.lock().unwrap().clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureBox {
    #[serde(flatten)]
    pub bbox: BoundingBox,
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub label: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureTruth {
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<FixtureBox>,
}

/// Ground truth for fixture frames, looked up by a digest of the pixel bytes.
#[derive(Debug, Clone, Default)]
pub struct FrameFixtures {
    by_digest: HashMap<String, FixtureTruth>,
    frames: BTreeMap<String, CameraFrame>,
}

pub fn pixel_digest(pixels: &[u8]) -> String {
    Sha256::digest(pixels).iter().map(|b| format!("{b:02x}")).collect()
}

impl FrameFixtures {
    /// Loads every `<name>.rgb` with its `<name>.boxes.json` sidecar.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, PortError> {
        let dir = dir.as_ref();
        let mut fx = Self::default();
        let entries = std::fs::read_dir(dir).map_err(|e| PortError::Setup(format!("{}: {e}", dir.display())))?;
        let mut paths: Vec<_> = entries.filter_map(Result::ok).map(|e| e.path()).collect();
        paths.sort();
        for path in paths.into_iter().filter(|p| p.extension().is_some_and(|e| e == "rgb")) {
            let name = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let pixels = std::fs::read(&path).map_err(|e| PortError::Setup(format!("{}: {e}", path.display())))?;
            let sidecar = dir.join(format!("{name}.boxes.json"));
            let text =
                std::fs::read_to_string(&sidecar).map_err(|e| PortError::Setup(format!("{}: {e}", sidecar.display())))?;
            let truth: FixtureTruth =
                serde_json::from_str(&text).map_err(|e| PortError::Setup(format!("{}: {e}", sidecar.display())))?;
            fx.insert(&name, &pixels, truth)?;
        }
        Ok(fx)
    }

    pub fn insert(&mut self, name: &str, pixels: &[u8], truth: FixtureTruth) -> Result<(), PortError> {
        let frame = CameraFrame::from_rgb8(truth.width, truth.height, pixels);
        crate::message::payload::Payload::check(&frame).map_err(|e| PortError::Setup(format!("{name}: {e}")))?;
        self.by_digest.insert(pixel_digest(pixels), truth);
        self.frames.insert(name.to_string(), frame);
        Ok(())
    }

    pub fn frame(&self, name: &str) -> Option<&CameraFrame> {
        self.frames.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.frames.keys().map(String::as_str)
    }

    pub fn truth(&self, frame: &CameraFrame) -> Option<&FixtureTruth> {
        let pixels = frame.pixels().ok()?;
        self.by_digest.get(&pixel_digest(&pixels))
    }
}

pub struct FixtureOcr {
    fixtures: Arc<FrameFixtures>,
    delay: Arc<Delay>,
}

impl FixtureOcr {
    pub fn new(fixtures: Arc<FrameFixtures>, delay: Arc<Delay>) -> Self {
        Self { fixtures, delay }
    }
}

impl TextRecognizer for FixtureOcr {
    fn recognize(&self, frame: &CameraFrame) -> Result<Vec<TextBox>, PortError> {
        self.delay.apply();
        Ok(self
            .fixtures
            .truth(frame)
            .map(|t| {
                t.boxes
                    .iter()
                    .filter_map(|b| Some(TextBox { bbox: b.bbox, text: b.text.clone()? }))
                    .collect()
            })
            .unwrap_or_default())
    }
}

pub struct FixtureDetector {
    fixtures: Arc<FrameFixtures>,
    delay: Arc<Delay>,
}

impl FixtureDetector {
    pub fn new(fixtures: Arc<FrameFixtures>, delay: Arc<Delay>) -> Self {
        Self { fixtures, delay }
    }
}

impl ObjectDetector for FixtureDetector {
    fn detect(&self, frame: &CameraFrame) -> Result<Vec<Detection>, PortError> {
        self.delay.apply();
        Ok(self
            .fixtures
            .truth(frame)
            .map(|t| {
                t.boxes
                    .iter()
                    .filter_map(|b| Some(Detection { bbox: b.bbox, label: b.label.clone()?, score: 1.0 }))
                    .collect()
            })
            .unwrap_or_default())
    }
}

pub struct DictionaryTranslator {
    dictionary: BTreeMap<String, String>,
    delay: Arc<Delay>,
}

impl DictionaryTranslator {
    pub fn new(dictionary: BTreeMap<String, String>, delay: Arc<Delay>) -> Self {
        Self { dictionary, delay }
    }

    pub fn load(path: impl AsRef<Path>, delay: Arc<Delay>) -> Result<Self, PortError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| PortError::Setup(format!("{}: {e}", path.display())))?;
        let dictionary = serde_json::from_str(&text).map_err(|e| PortError::Setup(format!("{}: {e}", path.display())))?;
        Ok(Self::new(dictionary, delay))
    }
}

impl Translator for DictionaryTranslator {
    fn translate(&self, text: &str, _locale: &str) -> Result<String, PortError> {
        self.delay.apply();
        self.dictionary
            .get(text)
            .cloned()
            .ok_or_else(|| PortError::failed(PortName::Translator, format!("no entry for {text:?}")))
    }
}

/// Returns its inputs: `adapt` is the identity, `answer` quotes label and question.
pub struct EchoModel {
    delay: Arc<Delay>,
}

impl EchoModel {
    pub fn new(delay: Arc<Delay>) -> Self {
        Self { delay }
    }
}

impl LanguageModel for EchoModel {
    fn adapt(&self, text: &str, _locale: &str) -> Result<String, PortError> {
        self.delay.apply();
        Ok(text.to_string())
    }

    fn answer(&self, label: &str, question: &str) -> Result<String, PortError> {
        self.delay.apply();
        Ok(format!("About the {label}: \"{question}\""))
    }
}

/// Posts `{"op": ..., ...}` to one endpoint and reads a JSON reply.
pub struct HttpPort {
    name: PortName,
    endpoint: String,
    client: OnceLock<reqwest::blocking::Client>,
}

impl HttpPort {
    pub fn new(name: PortName, endpoint: impl Into<String>) -> Self {
        Self { name, endpoint: endpoint.into(), client: OnceLock::new() }
    }

    fn call(&self, body: Value) -> Result<Value, PortError> {
        let client = self.client.get_or_init(reqwest::blocking::Client::new);
        let resp = client
            .post(&self.endpoint)
            .json(&body)
            .send()
            .map_err(|e| PortError::failed(self.name, e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(PortError::failed(self.name, format!("HTTP {status}")));
        }
        resp.json().map_err(|e| PortError::failed(self.name, e.to_string()))
    }

    fn field<T: serde::de::DeserializeOwned>(&self, mut v: Value, key: &str) -> Result<T, PortError> {
        serde_json::from_value(v[key].take()).map_err(|e| PortError::failed(self.name, format!("{key}: {e}")))
    }
}

impl TextRecognizer for HttpPort {
    fn recognize(&self, frame: &CameraFrame) -> Result<Vec<TextBox>, PortError> {
        let v = self.call(json!({"op": "recognize", "frame": frame}))?;
        self.field(v, "boxes")
    }
}

impl Translator for HttpPort {
    fn translate(&self, text: &str, locale: &str) -> Result<String, PortError> {
        let v = self.call(json!({"op": "translate", "text": text, "locale": locale}))?;
        self.field(v, "text")
    }
}

impl LanguageModel for HttpPort {
    fn adapt(&self, text: &str, locale: &str) -> Result<String, PortError> {
        let v = self.call(json!({"op": "adapt", "text": text, "locale": locale}))?;
        self.field(v, "text")
    }

    fn answer(&self, label: &str, question: &str) -> Result<String, PortError> {
        let v = self.call(json!({"op": "answer", "label": label, "question": question}))?;
        self.field(v, "text")
    }
}

impl ObjectDetector for HttpPort {
    fn detect(&self, frame: &CameraFrame) -> Result<Vec<Detection>, PortError> {
        let v = self.call(json!({"op": "detect", "frame": frame}))?;
        self.field(v, "detections")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortConfig {
    pub port: PortName,
    pub kind: PortKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub delay_ms: u64,
    #[serde(default)]
    pub delay_max_ms: Option<u64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub timeout_ms: Option<u64>,
}

/// The set of ports a kernel's services call, each behind a timeout.
#[derive(Clone)]
pub struct Ports {
    pub ocr: Arc<dyn TextRecognizer>,
    pub translator: Arc<dyn Translator>,
    pub detector: Arc<dyn ObjectDetector>,
    pub model: Arc<dyn LanguageModel>,
    pub timeouts: BTreeMap<PortName, Duration>,
}

impl Ports {
    /// Fixture mocks with no delay.
    pub fn mock(fixtures: Arc<FrameFixtures>, dictionary: BTreeMap<String, String>) -> Self {
        Self {
            ocr: Arc::new(FixtureOcr::new(fixtures.clone(), Delay::none())),
            translator: Arc::new(DictionaryTranslator::new(dictionary, Delay::none())),
            detector: Arc::new(FixtureDetector::new(fixtures, Delay::none())),
            model: Arc::new(EchoModel::new(Delay::none())),
            timeouts: BTreeMap::new(),
        }
    }

    /// Starts from [`Ports::mock`] and replaces each configured port.
    pub fn from_configs(
        configs: &[PortConfig],
        fixtures: Arc<FrameFixtures>,
        dictionary: BTreeMap<String, String>,
    ) -> Result<Self, PortError> {
        let mut ports = Self::mock(fixtures.clone(), dictionary.clone());
        for c in configs {
            if let Some(ms) = c.timeout_ms {
                ports.timeouts.insert(c.port, Duration::from_millis(ms));
            }
            match c.kind {
                PortKind::Mock => {
                    let delay = Delay::uniform(c.delay_ms, c.delay_max_ms.unwrap_or(c.delay_ms), c.seed);
                    match c.port {
                        PortName::Ocr => ports.ocr = Arc::new(FixtureOcr::new(fixtures.clone(), delay)),
                        PortName::Detector => ports.detector = Arc::new(FixtureDetector::new(fixtures.clone(), delay)),
                        PortName::Translator => {
                            ports.translator = Arc::new(DictionaryTranslator::new(dictionary.clone(), delay))
                        }
                        PortName::Model => ports.model = Arc::new(EchoModel::new(delay)),
                    }
                }
                PortKind::Http => {
                    let endpoint = c
                        .endpoint
                        .clone()
                        .ok_or_else(|| PortError::Setup(format!("http port {} needs an endpoint", c.port)))?;
                    let http = Arc::new(HttpPort::new(c.port, endpoint));
                    match c.port {
                        PortName::Ocr => ports.ocr = http,
                        PortName::Detector => ports.detector = http,
                        PortName::Translator => ports.translator = http,
                        PortName::Model => ports.model = http,
                    }
                }
            }
        }
        Ok(ports)
    }

    pub fn timeout(&self, port: PortName) -> Duration {
        self.timeouts.get(&port).copied().unwrap_or(DEFAULT_PORT_TIMEOUT)
    }

    /// Runs `f` on a helper thread and gives up after the port's timeout.
    /// A timed out call keeps running in the background; its result is discarded.
    pub fn guarded<T, F>(&self, port: PortName, f: F) -> Result<T, PortError>
    where
        T: Send + 'static,
        F: FnOnce() -> Result<T, PortError> + Send + 'static,
    {
        let timeout = self.timeout(port);
        let started = Instant::now();
        let (tx, rx) = mpsc::sync_channel(1);
        std::thread::Builder::new()
            .name(format!("port-{port}"))
            .spawn(move || {
                let _ = tx.send(f());
            })
            .map_err(|e| PortError::failed(port, e.to_string()))?;
        match rx.recv_timeout(timeout) {
            Ok(r) => r,
            Err(mpsc::RecvTimeoutError::Timeout) => Err(PortError::PortTimeout {
                port,
                elapsed_ms: started.elapsed().as_millis() as u64,
            }),
            Err(mpsc::RecvTimeoutError::Disconnected) => Err(PortError::failed(port, "port call panicked")),
        }
    }

    pub fn recognize(&self, frame: &CameraFrame) -> Result<Vec<TextBox>, PortError> {
        let (p, frame) = (self.ocr.clone(), frame.clone());
        self.guarded(PortName::Ocr, move || p.recognize(&frame))
    }

    pub fn translate(&self, text: &str, locale: &str) -> Result<String, PortError> {
        let (p, text, locale) = (self.translator.clone(), text.to_string(), locale.to_string());
        self.guarded(PortName::Translator, move || p.translate(&text, &locale))
    }

    pub fn adapt(&self, text: &str, locale: &str) -> Result<String, PortError> {
        let (p, text, locale) = (self.model.clone(), text.to_string(), locale.to_string());
        self.guarded(PortName::Model, move || p.adapt(&text, &locale))
    }

    pub fn answer(&self, label: &str, question: &str) -> Result<String, PortError> {
        let (p, label, question) = (self.model.clone(), label.to_string(), question.to_string());
        self.guarded(PortName::Model, move || p.answer(&label, &question))
    }

    pub fn detect(&self, frame: &CameraFrame) -> Result<Vec<Detection>, PortError> {
        let (p, frame) = (self.detector.clone(), frame.clone());
        self.guarded(PortName::Detector, move || p.detect(&frame))
    }
}

#[cfg(test)]
pub(crate) fn tiny_fixtures() -> Arc<FrameFixtures> {
    let mut fx = FrameFixtures::default();
    let pixels: Vec<u8> = (0..4 * 4 * 3).map(|i| i as u8).collect();
    let truth = FixtureTruth {
        width: 4,
        height: 4,
        boxes: vec![FixtureBox {
            bbox: BoundingBox { x: 0, y: 0, w: 2, h: 2 },
            text: Some("茶".into()),
            label: Some("tea".into()),
        }],
    };
    fx.insert("tiny", &pixels, truth).unwrap();
    Arc::new(fx)
}
