//! Uniform prediction interface with a content-addressed result cache.
//!
//! External models speak newline-delimited JSON. Each request line is
//!
//! ```text
//! {"id":"<volume id>","frames":F,"height":H,"width":W,"pixels":"<base64>"}
//! ```
//!
//! where `pixels` is standard padded base64 of the raw frame-major, row-major
//! 8-bit buffer. Each response line is `{"id":"<volume id>","probability":P}`.
//! Responses are matched by id and may arrive in any order. Labels are always
//! derived locally from the probability (0.5 maps to 0).
//!
//! A subprocess model reads request lines on stdin and writes response lines
//! on stdout for as long as it runs. An HTTP model receives a batch of request
//! lines as the body of one `POST` and answers with the response lines.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::RwLock;
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{label_for, SegmentMap, Volume};
use crate::synth::{synthetic_classifier, SyntheticConstants};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("model timed out waiting for '{id}'")]
    Timeout { id: String },
    #[error("malformed response for '{id}': {detail}")]
    Malformed { id: String, detail: String },
    #[error("probability {probability} out of range for '{id}'")]
    OutOfRange { id: String, probability: f64 },
    #[error("model transport failed for '{id}': {detail}")]
    Transport { id: String, detail: String },
    #[error("'{id}': {detail}")]
    Model { id: String, detail: String },
    #[error("invalid model configuration: {0}")]
    Config(String),
}

impl GatewayError {
    /// The volume id the failure is attributed to.
    pub fn id(&self) -> Option<&str> {
        match self {
            Self::Timeout { id }
            | Self::Malformed { id, .. }
            | Self::OutOfRange { id, .. }
            | Self::Transport { id, .. }
            | Self::Model { id, .. } => Some(id),
            Self::Config(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: u8,
    pub probability: f64,
    pub model: String,
}

impl Prediction {
    pub fn new(probability: f64, model: impl Into<String>) -> Self {
        Self {
            label: label_for(probability),
            probability,
            model: model.into(),
        }
    }
}

/// One item to classify. Backends that work on segment maps require `segmap`.
#[derive(Debug, Clone, Copy)]
pub struct PredictRequest<'a> {
    pub volume: &'a Volume,
    pub segmap: Option<&'a SegmentMap>,
}

impl<'a> PredictRequest<'a> {
    pub fn new(volume: &'a Volume, segmap: Option<&'a SegmentMap>) -> Self {
        Self { volume, segmap }
    }
}

/// A model that turns a batch of volumes into probabilities, in input order.
pub trait Backend: Send + Sync {
    fn model_id(&self) -> &str;

    /// Whether segment maps influence the output (and so the cache key).
    fn uses_segmap(&self) -> bool {
        false
    }

    fn predict_batch(&self, items: &[PredictRequest<'_>]) -> Result<Vec<f64>, GatewayError>;
}

/// The closed-form thickness classifier.
#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    constants: SyntheticConstants,
}

impl SyntheticBackend {
    pub fn new(constants: SyntheticConstants) -> Self {
        Self { constants }
    }
}

impl Backend for SyntheticBackend {
    fn model_id(&self) -> &str {
        "synthetic"
    }

    fn uses_segmap(&self) -> bool {
        true
    }

    fn predict_batch(&self, items: &[PredictRequest<'_>]) -> Result<Vec<f64>, GatewayError> {
        items
            .iter()
            .map(|item| {
                let id = item.volume.id().to_string();
                let segmap = item.segmap.ok_or_else(|| GatewayError::Model {
                    id: id.clone(),
                    detail: "synthetic classifier needs a segment map".into(),
                })?;
                synthetic_classifier(item.volume, segmap, &self.constants)
                    .map(|(_, p)| p)
                    .map_err(|e| GatewayError::Model {
                        id,
                        detail: e.to_string(),
                    })
            })
            .collect()
    }
}

#[derive(Debug, Serialize)]
pub struct WireRequest<'a> {
    pub id: &'a str,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: String,
}

impl<'a> WireRequest<'a> {
    pub fn from_volume(v: &'a Volume) -> Self {
        let d = v.dims();
        Self {
            id: v.id(),
            frames: d.frames,
            height: d.height,
            width: d.width,
            pixels: base64::engine::general_purpose::STANDARD.encode(v.pixels()),
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("serializable request")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub id: String,
    pub probability: f64,
}

/// Matches response lines to `ids` and validates each probability.
pub fn match_responses<'a, I>(ids: &[&str], lines: I) -> Result<Vec<f64>, GatewayError>
where
    I: IntoIterator<Item = &'a str>,
{
    let position: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let mut out: Vec<Option<f64>> = vec![None; ids.len()];
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let resp = parse_response(line, ids)?;
        let Some(&i) = position.get(resp.id.as_str()) else {
            return Err(GatewayError::Malformed {
                id: resp.id,
                detail: "response for an id that was not requested".into(),
            });
        };
        out[i] = Some(resp.probability);
    }
    out.into_iter()
        .zip(ids)
        .map(|(p, id)| {
            p.ok_or_else(|| GatewayError::Malformed {
                id: id.to_string(),
                detail: "no response".into(),
            })
        })
        .collect()
}

fn parse_response(line: &str, ids: &[&str]) -> Result<WireResponse, GatewayError> {
    let resp: WireResponse = serde_json::from_str(line).map_err(|e| GatewayError::Malformed {
        id: guess_id(line, ids),
        detail: e.to_string(),
    })?;
    if !(0.0..=1.0).contains(&resp.probability) {
        return Err(GatewayError::OutOfRange {
            id: resp.id,
            probability: resp.probability,
        });
    }
    Ok(resp)
}

/// Best-effort id for error messages about unparsable lines.
fn guess_id(line: &str, ids: &[&str]) -> String {
    serde_json::from_str::<serde_json::Value>(line)
        .ok()
        .and_then(|v| v.get("id").and_then(|i| i.as_str()).map(str::to_string))
        .or_else(|| ids.first().map(|s| s.to_string()))
        .unwrap_or_default()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    Subprocess,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalModelConfig {
    pub transport: Transport,
    /// Shell command line or URL.
    pub endpoint: String,
    pub timeout: Duration,
    pub batch_size: usize,
}

impl ExternalModelConfig {
    pub fn new(transport: Transport, endpoint: impl Into<String>) -> Self {
        Self {
            transport,
            endpoint: endpoint.into(),
            timeout: Duration::from_secs(30),
            batch_size: 16,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.timeout.is_zero() {
            return Err(GatewayError::Config("timeout must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(GatewayError::Config("batch size must be >= 1".into()));
        }
        if self.endpoint.trim().is_empty() {
            return Err(GatewayError::Config("empty endpoint".into()));
        }
        Ok(())
    }
}

/// Which model to use: `synthetic`, `cmd:<shell command>` or `http:<url>`.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Synthetic,
    External(ExternalModelConfig),
}

impl std::str::FromStr for ModelSpec {
    type Err = GatewayError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "synthetic" {
            return Ok(Self::Synthetic);
        }
        if let Some(cmd) = s.strip_prefix("cmd:") {
            let cfg = ExternalModelConfig::new(Transport::Subprocess, cmd);
            cfg.validate()?;
            return Ok(Self::External(cfg));
        }
        if s.starts_with("http://") || s.starts_with("https://") {
            return Ok(Self::External(ExternalModelConfig::new(Transport::Http, s)));
        }
        if let Some(rest) = s.strip_prefix("http:") {
            let url = if rest.starts_with("http://") || rest.starts_with("https://") {
                rest.to_string()
            } else {
                format!("http://{}", rest.trim_start_matches('/'))
            };
            let cfg = ExternalModelConfig::new(Transport::Http, url);
            cfg.validate()?;
            return Ok(Self::External(cfg));
        }
        Err(GatewayError::Config(format!(
            "unknown model '{s}' (expected synthetic, cmd:<command> or http:<url>)"
        )))
    }
}

#[cfg(feature = "external")]
pub use external::{HttpBackend, SubprocessBackend};

#[cfg(feature = "external")]
mod external {
    use std::io::{BufRead, BufReader, Write};
    use std::process::{Child, ChildStdin, Command, Stdio};
    use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
    use std::sync::Mutex;
    use std::time::Instant;

    use super::*;

    struct Connection {
        child: Child,
        stdin: ChildStdin,
        lines: Receiver<std::io::Result<String>>,
    }

    impl Drop for Connection {
        fn drop(&mut self) {
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
    }

    /// A long-running model process; requests on one connection are
    /// serialized.
    pub struct SubprocessBackend {
        config: ExternalModelConfig,
        model_id: String,
        conn: Mutex<Option<Connection>>,
    }

    impl SubprocessBackend {
        pub fn new(config: ExternalModelConfig) -> Result<Self, GatewayError> {
            config.validate()?;
            Ok(Self {
                model_id: format!("cmd:{}", config.endpoint),
                config,
                conn: Mutex::new(None),
            })
        }

        fn spawn(&self) -> std::io::Result<Connection> {
            let mut child = Command::new("sh")
                .arg("-c")
                .arg(&self.config.endpoint)
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .stderr(Stdio::inherit())
                .spawn()?;
            let stdin = child.stdin.take().expect("piped stdin");
            let stdout = child.stdout.take().expect("piped stdout");
            let (tx, rx) = mpsc::channel();
            std::thread::spawn(move || {
                for line in BufReader::new(stdout).lines() {
                    let stop = line.is_err();
                    if tx.send(line).is_err() || stop {
                        break;
                    }
                }
            });
            Ok(Connection {
                child,
                stdin,
                lines: rx,
            })
        }

        fn exchange(
            &self,
            conn: &mut Connection,
            ids: &[&str],
            body: &str,
        ) -> Result<Vec<f64>, GatewayError> {
            let first = ids.first().copied().unwrap_or_default().to_string();
            conn.stdin
                .write_all(body.as_bytes())
                .and_then(|_| conn.stdin.flush())
                .map_err(|e| GatewayError::Transport {
                    id: first.clone(),
                    detail: e.to_string(),
                })?;
            let deadline = Instant::now() + self.config.timeout;
            let mut pending: HashSet<&str> = ids.iter().copied().collect();
            let mut received = Vec::with_capacity(ids.len());
            while !pending.is_empty() {
                let wait = deadline.saturating_duration_since(Instant::now());
                let line = match conn.lines.recv_timeout(wait) {
                    Ok(Ok(line)) => line,
                    Ok(Err(e)) => {
                        return Err(GatewayError::Transport {
                            id: first,
                            detail: e.to_string(),
                        })
                    }
                    Err(RecvTimeoutError::Timeout) => {
                        let mut left: Vec<_> = pending.into_iter().collect();
                        left.sort_by_key(|id| ids.iter().position(|x| x == id));
                        return Err(GatewayError::Timeout {
                            id: left[0].to_string(),
                        });
                    }
                    Err(RecvTimeoutError::Disconnected) => {
                        return Err(GatewayError::Transport {
                            id: first,
                            detail: "model process closed its output".into(),
                        })
                    }
                };
                if line.trim().is_empty() {
                    continue;
                }
                let resp = parse_response(&line, ids)?;
                if !pending.remove(resp.id.as_str()) {
                    return Err(GatewayError::Malformed {
                        id: resp.id,
                        detail: "unexpected or repeated response id".into(),
                    });
                }
                received.push(serde_json::to_string(&resp).expect("serializable"));
            }
            match_responses(ids, received.iter().map(String::as_str))
        }
    }

    impl Backend for SubprocessBackend {
        fn model_id(&self) -> &str {
            &self.model_id
        }

        fn predict_batch(&self, items: &[PredictRequest<'_>]) -> Result<Vec<f64>, GatewayError> {
            let ids: Vec<&str> = items.iter().map(|i| i.volume.id()).collect();
            let mut body = String::new();
            for item in items {
                body.push_str(&WireRequest::from_volume(item.volume).to_line());
                body.push('\n');
            }
            let mut guard = self.conn.lock().unwrap_or_else(|p| p.into_inner());
            if guard.is_none() {
                *guard = Some(self.spawn().map_err(|e| GatewayError::Transport {
                    id: ids.first().copied().unwrap_or_default().to_string(),
                    detail: e.to_string(),
                })?);
            }
            let result = self.exchange(guard.as_mut().expect("connected"), &ids, &body);
            if result.is_err() {
                // the stream may hold stale responses now
                *guard = None;
            }
            result
        }
    }

    /// Posts each batch as newline-delimited JSON to a URL.
    pub struct HttpBackend {
        config: ExternalModelConfig,
        model_id: String,
        agent: ureq::Agent,
    }

    impl HttpBackend {
        pub fn new(config: ExternalModelConfig) -> Result<Self, GatewayError> {
            config.validate()?;
            let agent = ureq::Agent::config_builder()
                .timeout_global(Some(config.timeout))
                .build()
                .into();
            Ok(Self {
                model_id: format!("http:{}", config.endpoint),
                config,
                agent,
            })
        }
    }

    impl Backend for HttpBackend {
        fn model_id(&self) -> &str {
            &self.model_id
        }

        fn predict_batch(&self, items: &[PredictRequest<'_>]) -> Result<Vec<f64>, GatewayError> {
            let ids: Vec<&str> = items.iter().map(|i| i.volume.id()).collect();
            let first = ids.first().copied().unwrap_or_default().to_string();
            let mut body = String::new();
            for item in items {
                body.push_str(&WireRequest::from_volume(item.volume).to_line());
                body.push('\n');
            }
            let map_err = |e: ureq::Error| match e {
                ureq::Error::Timeout(_) => GatewayError::Timeout { id: first.clone() },
                other => GatewayError::Transport {
                    id: first.clone(),
                    detail: other.to_string(),
                },
            };
            let mut resp = self
                .agent
                .post(&self.config.endpoint)
                .header("Content-Type", "application/x-ndjson")
                .send(body.as_str())
                .map_err(map_err)?;
            let text = resp.body_mut().read_to_string().map_err(map_err)?;
            match_responses(&ids, text.lines())
        }
    }
}

/// Builds the backend for a model spec.
pub fn backend_for(
    spec: &ModelSpec,
    constants: Option<&SyntheticConstants>,
) -> Result<Box<dyn Backend>, GatewayError> {
    match spec {
        ModelSpec::Synthetic => Ok(Box::new(SyntheticBackend::new(
            constants.cloned().unwrap_or_default(),
        ))),
        #[cfg(feature = "external")]
        ModelSpec::External(cfg) => match cfg.transport {
            Transport::Subprocess => Ok(Box::new(SubprocessBackend::new(cfg.clone())?)),
            Transport::Http => Ok(Box::new(HttpBackend::new(cfg.clone())?)),
        },
        #[cfg(not(feature = "external"))]
        ModelSpec::External(_) => Err(GatewayError::Config(
            "external models are not available in this build".into(),
        )),
    }
}

type CacheKey = [u8; 32];

/// Shareable front for a backend with a digest-keyed cache.
pub struct Gateway {
    backend: Box<dyn Backend>,
    batch_size: usize,
    cache: RwLock<HashMap<CacheKey, f64>>,
    transport_calls: AtomicUsize,
}

impl Gateway {
    pub fn new(backend: Box<dyn Backend>, batch_size: usize) -> Self {
        Self {
            backend,
            batch_size: batch_size.max(1),
            cache: RwLock::new(HashMap::new()),
            transport_calls: AtomicUsize::new(0),
        }
    }

    pub fn synthetic(constants: SyntheticConstants) -> Self {
        Self::new(Box::new(SyntheticBackend::new(constants)), 64)
    }

    pub fn from_spec(
        spec: &ModelSpec,
        constants: Option<&SyntheticConstants>,
    ) -> Result<Self, GatewayError> {
        let batch = match spec {
            ModelSpec::Synthetic => 64,
            ModelSpec::External(cfg) => cfg.batch_size,
        };
        Ok(Self::new(backend_for(spec, constants)?, batch))
    }

    pub fn model_id(&self) -> &str {
        self.backend.model_id()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Number of backend batch calls made so far.
    pub fn transport_calls(&self) -> usize {
        self.transport_calls.load(Ordering::Relaxed)
    }

    fn key(&self, item: &PredictRequest<'_>) -> CacheKey {
        let mut h = Sha256::new();
        h.update(self.backend.model_id().as_bytes());
        h.update([0]);
        let d = item.volume.dims();
        for x in [d.frames, d.height, d.width] {
            h.update((x as u64).to_le_bytes());
        }
        h.update(item.volume.pixels());
        if self.backend.uses_segmap() {
            match item.segmap {
                Some(m) => {
                    h.update([1]);
                    h.update(m.labels());
                }
                None => h.update([0]),
            }
        }
        h.finalize().into()
    }

    pub fn predict(&self, volume: &Volume, segmap: Option<&SegmentMap>) -> Result<Prediction, GatewayError> {
        let mut out = self.predict_many(&[PredictRequest::new(volume, segmap)])?;
        Ok(out.pop().expect("one prediction"))
    }

    /// Predicts every item, in order. Cache misses are sent to the backend in
    /// batches of at most `batch_size` distinct volumes with distinct ids.
    pub fn predict_many(&self, items: &[PredictRequest<'_>]) -> Result<Vec<Prediction>, GatewayError> {
        let keys: Vec<CacheKey> = items.iter().map(|i| self.key(i)).collect();
        let mut misses: Vec<usize> = Vec::new();
        {
            let cache = self.cache.read().unwrap_or_else(|p| p.into_inner());
            let mut queued = HashSet::new();
            for (i, k) in keys.iter().enumerate() {
                if !cache.contains_key(k) && queued.insert(*k) {
                    misses.push(i);
                }
            }
        }
        let mut start = 0;
        while start < misses.len() {
            let mut ids = HashSet::new();
            let mut end = start;
            while end < misses.len()
                && end - start < self.batch_size
                && ids.insert(items[misses[end]].volume.id())
            {
                end += 1;
            }
            let batch: Vec<PredictRequest<'_>> = misses[start..end].iter().map(|&i| items[i]).collect();
            self.transport_calls.fetch_add(1, Ordering::Relaxed);
            let probs = self.backend.predict_batch(&batch)?;
            if probs.len() != batch.len() {
                return Err(GatewayError::Malformed {
                    id: batch[0].volume.id().to_string(),
                    detail: format!("{} responses for {} requests", probs.len(), batch.len()),
                });
            }
            let mut cache = self.cache.write().unwrap_or_else(|p| p.into_inner());
            for (&i, p) in misses[start..end].iter().zip(probs) {
                if !(0.0..=1.0).contains(&p) {
                    return Err(GatewayError::OutOfRange {
                        id: items[i].volume.id().to_string(),
                        probability: p,
                    });
                }
                cache.insert(keys[i], p);
            }
            start = end;
        }
        let cache = self.cache.read().unwrap_or_else(|p| p.into_inner());
        Ok(keys
            .iter()
            .map(|k| Prediction::new(cache[k], self.backend.model_id()))
            .collect())
    }
}
