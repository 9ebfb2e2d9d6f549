//! Language-model oracle: answer parsing, soft labels, backends and the
//! persistent answer cache.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::math::softmax;

/// Largest value an answer entry may take.
pub const MAX_LOGIT: u8 = 9;

/// Per-class integer scores in `0..=9`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LogitVector(Vec<u8>);

impl LogitVector {
    pub fn new(values: Vec<u8>) -> Result<Self> {
        if values.iter().any(|&v| v > MAX_LOGIT) {
            return Err(Error::Domain(format!("logits out of range: {values:?}")));
        }
        Ok(LogitVector(values))
    }

    /// Equal scores for every class; the parse-failure fallback.
    pub fn uniform(c: usize) -> Self {
        LogitVector(vec![0; c])
    }

    pub fn values(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Probability vector over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SoftLabel(Vec<f64>);

impl SoftLabel {
    /// Wraps a vector that is already on the probability simplex.
    pub fn new(p: Vec<f64>) -> Result<Self> {
        let total: f64 = p.iter().sum();
        if p.is_empty()
            || p.iter().any(|&x| x < 0.0 || !x.is_finite())
            || (total - 1.0).abs() > 1e-9
        {
            return Err(Error::Domain(format!("not a probability vector: {p:?}")));
        }
        Ok(SoftLabel(p))
    }

    pub fn uniform(c: usize) -> Self {
        SoftLabel(vec![1.0 / c as f64; c])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    pub fn argmax(&self) -> usize {
        crate::math::argmax(&self.0)
    }
}

/// Softmax over the integer logits.
pub fn to_soft_label(z: &LogitVector) -> SoftLabel {
    let values: Vec<f64> = z.values().iter().map(|&v| f64::from(v)).collect();
    SoftLabel(softmax(&values))
}

/// Pulls the first bracketed, comma-separated list of exactly `c` integers
/// out of an answer. Entries are clamped to `0..=9`.
pub fn extract_logits(answer: &str, c: usize) -> Result<LogitVector> {
    if c < 2 {
        return Err(Error::Domain(format!("need at least two classes, got {c}")));
    }
    let mut rest = answer;
    while let Some(open) = rest.find('[') {
        let after = &rest[open + 1..];
        let Some(close) = after.find(']') else { break };
        let inner = &after[..close];
        let parsed: Option<Vec<i64>> = inner
            .split(',')
            .map(|tok| tok.trim().parse::<i64>().ok())
            .collect();
        if let Some(values) = parsed {
            if values.len() == c {
                let clamped = values
                    .into_iter()
                    .map(|v| v.clamp(0, i64::from(MAX_LOGIT)) as u8)
                    .collect();
                return Ok(LogitVector(clamped));
            }
        }
        rest = after;
    }
    Err(Error::Parse(format!(
        "no bracketed list of {c} integers in answer `{}`",
        answer.chars().take(200).collect::<String>()
    )))
}

/// Deterministic stand-in for a language model:
/// `(1 - p) * onehot(label) + p * uniform(c)`.
pub fn mock_soft_label(label: Option<usize>, noise: f64, c: usize) -> Result<SoftLabel> {
    let label =
        label.ok_or_else(|| Error::Oracle("mock oracle needs a ground-truth label".into()))?;
    if label >= c {
        return Err(Error::Oracle(format!(
            "label {label} out of range for {c} classes"
        )));
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(Error::Config(format!(
            "mock noise must lie in [0, 1], got {noise}"
        )));
    }
    let base = noise / c as f64;
    let mut p = vec![base; c];
    p[label] += 1.0 - noise;
    Ok(SoftLabel(p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub backend: BackendKind,
    pub endpoint: Option<String>,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
    pub max_retries: u32,
    /// Initial retry delay, doubled after every failed attempt.
    pub retry_backoff_ms: u64,
    pub max_in_flight: usize,
    pub cache_path: Option<PathBuf>,
    pub mock_noise: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            backend: BackendKind::Mock,
            endpoint: None,
            model: "mock".into(),
            api_key_env: None,
            timeout_secs: 60,
            max_retries: 3,
            retry_backoff_ms: 500,
            max_in_flight: 4,
            cache_path: None,
            mock_noise: 0.0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backend == BackendKind::Remote {
            if self.endpoint.as_deref().is_none_or(str::is_empty) {
                return Err(Error::Config("remote oracle needs an endpoint".into()));
            }
            if self.api_key_env.as_deref().is_none_or(str::is_empty) {
                return Err(Error::Config(
                    "remote oracle needs an API-key variable name".into(),
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.mock_noise) {
            return Err(Error::Config("mock noise must lie in [0, 1]".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }
}

/// Failure of a single backend request.
#[derive(Debug, Clone)]
pub struct BackendError {
    pub message: String,
    pub retryable: bool,
}

/// Something that answers a prompt with free text.
pub trait ChatBackend: Send + Sync {
    fn complete(
        &self,
        node: usize,
        prompt: &str,
        classes: usize,
    ) -> std::result::Result<String, BackendError>;
}

/// Answers with `round(9 * mock_soft_label)` for the node's true class.
pub struct MockBackend {
    labels: Vec<usize>,
    noise: f64,
}

impl MockBackend {
    pub fn new(labels: Vec<usize>, noise: f64) -> Self {
        MockBackend { labels, noise }
    }
}

impl ChatBackend for MockBackend {
    fn complete(
        &self,
        node: usize,
        _prompt: &str,
        classes: usize,
    ) -> std::result::Result<String, BackendError> {
        let soft =
            mock_soft_label(self.labels.get(node).copied(), self.noise, classes).map_err(|e| {
                BackendError {
                    message: e.to_string(),
                    retryable: false,
                }
            })?;
        let digits: Vec<String> = soft
            .probs()
            .iter()
            .map(|p| ((p * f64::from(MAX_LOGIT)).round() as u8).to_string())
            .collect();
        Ok(format!(
            "The probabilities of the paper belonging to each category are: [{}].",
            digits.join(", ")
        ))
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    content: String,
}

/// OpenAI-compatible chat-completion client.
pub struct RemoteBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    token: String,
}

impl RemoteBackend {
    pub fn new(cfg: &OracleConfig) -> Result<Self> {
        cfg.validate()?;
        let var = cfg.api_key_env.clone().unwrap_or_default();
        let token = std::env::var(&var)
            .map_err(|_| Error::Config(format!("environment variable {var} is not set")))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| Error::Oracle(e.to_string()))?;
        Ok(RemoteBackend {
            client,
            endpoint: cfg.endpoint.clone().unwrap_or_default(),
            model: cfg.model.clone(),
            token,
        })
    }
}

/// JSON body sent for one prompt.
pub fn chat_request_body(model: &str, prompt: &str) -> serde_json::Value {
    serde_json::to_value(ChatRequest {
        model,
        messages: [ChatMessage {
            role: "user",
            content: prompt,
        }],
        temperature: 0.0,
    })
    .expect("request serializes")
}

impl ChatBackend for RemoteBackend {
    fn complete(
        &self,
        _node: usize,
        prompt: &str,
        _classes: usize,
    ) -> std::result::Result<String, BackendError> {
        let transient = |message: String| BackendError {
            message,
            retryable: true,
        };
        let response = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.token)
            .json(&chat_request_body(&self.model, prompt))
            .send()
            .map_err(|e| transient(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let retryable =
                status.is_server_error() || status.as_u16() == 429 || status.as_u16() == 408;
            return Err(BackendError {
                message: format!("endpoint returned {status}"),
                retryable,
            });
        }
        let body: ChatResponse = response.json().map_err(|e| transient(e.to_string()))?;
        body.choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| transient("response has no choices".into()))
    }
}

pub fn prompt_sha256(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub node: usize,
    pub prompt_sha256: String,
    pub logits: LogitVector,
    pub model: String,
}

struct CacheState {
    entries: HashMap<(usize, String), LogitVector>,
    file: Option<File>,
}

/// JSON-lines answer cache keyed by (node, prompt hash). Every insert is
/// appended and flushed immediately so an interrupted run can resume.
pub struct LogitCache {
    path: Option<PathBuf>,
    state: Mutex<CacheState>,
}

impl LogitCache {
    pub fn in_memory() -> Self {
        LogitCache {
            path: None,
            state: Mutex::new(CacheState {
                entries: HashMap::new(),
                file: None,
            }),
        }
    }

    /// Opens (or creates) a cache file. A truncated trailing line from a
    /// crashed run is skipped.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        if path.exists() {
            let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheRecord>(&line) {
                    Ok(rec) => {
                        entries.insert((rec.node, rec.prompt_sha256), rec.logits);
                    }
                    Err(e) => log::warn!("skipping cache line {}: {e}", i + 1),
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(LogitCache {
            path: Some(path),
            state: Mutex::new(CacheState {
                entries,
                file: Some(file),
            }),
        })
    }

    pub fn get(&self, node: usize, prompt_hash: &str) -> Option<LogitVector> {
        let state = self.state.lock().expect("cache lock");
        state.entries.get(&(node, prompt_hash.to_string())).cloned()
    }

    pub fn put(&self, record: CacheRecord) -> Result<()> {
        let mut state = self.state.lock().expect("cache lock");
        if let Some(file) = state.file.as_mut() {
            let line = serde_json::to_string(&record)?;
            let path = self.path.clone().unwrap_or_default();
            writeln!(file, "{line}").map_err(|e| Error::io(&path, e))?;
            file.flush().map_err(|e| Error::io(&path, e))?;
        }
        state
            .entries
            .insert((record.node, record.prompt_sha256), record.logits);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.state.lock().expect("cache lock").entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleStats {
    /// Backend requests actually issued.
    pub calls: usize,
    pub cache_hits: usize,
    /// Nodes that fell back to uniform logits after unparseable answers.
    pub parse_fallbacks: usize,
}

/// Cached, retrying front end over a [`ChatBackend`].
pub struct Oracle {
    backend: Box<dyn ChatBackend>,
    cache: LogitCache,
    model: String,
    max_retries: u32,
    backoff: Duration,
    max_in_flight: usize,
    calls: AtomicUsize,
    hits: AtomicUsize,
    fallbacks: AtomicUsize,
}

impl Oracle {
    /// Builds the configured backend. The mock backend needs ground-truth labels.
    pub fn from_config(cfg: &OracleConfig, labels: Option<&[usize]>) -> Result<Self> {
        cfg.validate()?;
        let backend: Box<dyn ChatBackend> = match cfg.backend {
            BackendKind::Mock => {
                let labels = labels
                    .ok_or_else(|| Error::Oracle("mock oracle needs ground-truth labels".into()))?;
                Box::new(MockBackend::new(labels.to_vec(), cfg.mock_noise))
            }
            BackendKind::Remote => Box::new(RemoteBackend::new(cfg)?),
        };
        let cache = match &cfg.cache_path {
            Some(p) => LogitCache::open(p)?,
            None => LogitCache::in_memory(),
        };
        Ok(Self::with_backend(backend, cache, cfg))
    }

    pub fn with_backend(
        backend: Box<dyn ChatBackend>,
        cache: LogitCache,
        cfg: &OracleConfig,
    ) -> Self {
        Oracle {
            backend,
            cache,
            model: cfg.model.clone(),
            max_retries: cfg.max_retries,
            backoff: Duration::from_millis(cfg.retry_backoff_ms),
            max_in_flight: cfg.max_in_flight.max(1),
            calls: AtomicUsize::new(0),
            hits: AtomicUsize::new(0),
            fallbacks: AtomicUsize::new(0),
        }
    }

    pub fn stats(&self) -> OracleStats {
        OracleStats {
            calls: self.calls.load(Ordering::SeqCst),
            cache_hits: self.hits.load(Ordering::SeqCst),
            parse_fallbacks: self.fallbacks.load(Ordering::SeqCst),
        }
    }

    pub fn cache(&self) -> &LogitCache {
        &self.cache
    }

    /// Logits for one node's prompt: served from the cache when possible,
    /// otherwise queried with retries. Answers that never parse degrade to
    /// uniform logits, which are not cached.
    pub fn infer(&self, node: usize, prompt: &str, classes: usize) -> Result<LogitVector> {
        if prompt.is_empty() {
            return Err(Error::Domain("empty prompt".into()));
        }
        let hash = prompt_sha256(prompt);
        if let Some(hit) = self.cache.get(node, &hash) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok(hit);
        }
        let mut last_transport: Option<String> = None;
        for attempt in 0..=self.max_retries {
            if attempt > 0 && last_transport.is_some() {
                std::thread::sleep(self.backoff * 2u32.saturating_pow(attempt - 1));
            }
            self.calls.fetch_add(1, Ordering::SeqCst);
            match self.backend.complete(node, prompt, classes) {
                Ok(answer) => match extract_logits(&answer, classes) {
                    Ok(logits) => {
                        self.cache.put(CacheRecord {
                            node,
                            prompt_sha256: hash,
                            logits: logits.clone(),
                            model: self.model.clone(),
                        })?;
                        return Ok(logits);
                    }
                    Err(e) => {
                        log::debug!("node {node}: attempt {attempt}: {e}");
                        last_transport = None;
                    }
                },
                Err(e) if e.retryable => {
                    log::debug!("node {node}: attempt {attempt}: {}", e.message);
                    last_transport = Some(e.message);
                }
                Err(e) => return Err(Error::Oracle(format!("node {node}: {}", e.message))),
            }
        }
        if let Some(msg) = last_transport {
            return Err(Error::Oracle(format!(
                "node {node}: giving up after {} attempts: {msg}",
                self.max_retries + 1
            )));
        }
        log::warn!("node {node}: unparseable answers, falling back to uniform logits");
        self.fallbacks.fetch_add(1, Ordering::SeqCst);
        Ok(LogitVector::uniform(classes))
    }

    /// Runs [`Oracle::infer`] for many nodes with at most `max_in_flight`
    /// requests outstanding. The first error (by node id) is returned.
    pub fn infer_many(
        &self,
        requests: &[(usize, String)],
        classes: usize,
    ) -> Result<BTreeMap<usize, LogitVector>> {
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<(usize, Result<LogitVector>)>> =
            Mutex::new(Vec::with_capacity(requests.len()));
        let workers = self.max_in_flight.min(requests.len()).max(1);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some((node, prompt)) = requests.get(i) else {
                        break;
                    };
                    let out = self.infer(*node, prompt, classes);
                    results.lock().expect("results lock").push((*node, out));
                });
            }
        });
        let mut collected = results.into_inner().expect("results lock");
        collected.sort_by_key(|(node, _)| *node);
        collected
            .into_iter()
            .map(|(n, r)| r.map(|z| (n, z)))
            .collect()
    }
}
