//! Model backends and the resumable batch runner.
//!
//! A [`Backend`] turns one rendered prompt into raw text. [`query`] wraps a
//! backend call with retries. [`run_batch`] drives a whole manifest through
//! a fixed pool of `max_in_flight` workers and appends finished records to a
//! JSONL results file through a single writer, in manifest order. Instances
//! whose record is already present are skipped, so an interrupted run is
//! resumed simply by running it again.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::corpus::Label;
use crate::io::stable_hash;
use crate::normalize::Verdict;
use crate::prompts::{split_persona, PromptInstance, PromptVariant};

pub const DEFAULT_AUTH_ENV: &str = "PERSONA_BIAS_API_KEY";
pub const REFUSAL_TEXT: &str = "I cannot perform this action";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("invalid backend spec: {0}")]
    InvalidSpec(String),
    #[error("invalid generation params: {0}")]
    InvalidParams(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("results file {path} is locked by another run (remove {lock} if stale)")]
    Locked { path: PathBuf, lock: PathBuf },
    #[error("{path}: corrupt record on line {line}: {message}")]
    CorruptResults {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("results file holds instance {0} generated with a different model or params")]
    ForeignResults(String),
    #[error("manifest lists instance {0} more than once")]
    DuplicateInstance(String),
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: u32,
    pub max_tokens: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            top_p: 0.1,
            top_k: 5,
            max_tokens: 256,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(ModelError::InvalidParams(format!("temperature {}", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(ModelError::InvalidParams(format!("top_p {}", self.top_p)));
        }
        if self.top_k == 0 || self.max_tokens == 0 {
            return Err(ModelError::InvalidParams("top_k and max_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// Cache key over everything that determines a response.
pub fn cache_key(model_id: &str, rendered_text: &str, params: &GenerationParams) -> String {
    let p = format!(
        "t={:?};p={:?};k={};m={}",
        params.temperature, params.top_p, params.top_k, params.max_tokens
    );
    stable_hash([model_id, rendered_text, p.as_str()])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub instance_key: String,
    pub cache_key: String,
    pub post_id: String,
    pub variant: PromptVariant,
    pub persona_country: Option<String>,
    pub language_code: String,
    pub model_id: String,
    pub raw_output: String,
    #[serde(default)]
    pub verdict: Option<Verdict>,
    pub attempt_count: u32,
    pub latency_ms: u64,
}

/// An instance that could not be answered; kept out of the results file so
/// it is retried on the next run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub instance_key: String,
    pub post_id: String,
    pub model_id: String,
    pub attempt_count: u32,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QueryOutcome {
    Done(GenerationRecord),
    Failed(FailureRecord),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub text: String,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transient: {0}")]
    Transient(String),
    #[error("permanent: {0}")]
    Permanent(String),
    #[error("auth: {0}")]
    Auth(String),
}

pub trait Backend: Send + Sync {
    fn model_id(&self) -> &str;

    fn generate(&self, instance: &PromptInstance, params: &GenerationParams)
        -> Result<Reply, BackendError>;

    /// Whether the non-standard `top_k` field is still being sent.
    fn top_k_sent(&self) -> Option<bool> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Remote,
    Mock,
}

/// Offline stand-in that injects a per-country false-negative rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockPolicy {
    pub base_fnr: f64,
    #[serde(default)]
    pub per_country_fnr_multiplier: BTreeMap<String, f64>,
    #[serde(default)]
    pub invalid_rate: f64,
    #[serde(default)]
    pub seed: u64,
    /// Draw misses independently per instance instead of once per post.
    #[serde(default)]
    pub independent_draws: bool,
}

impl MockPolicy {
    pub fn validate(&self) -> Result<(), ModelError> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.base_fnr) || !unit(self.invalid_rate) {
            return Err(ModelError::InvalidSpec(
                "mock base_fnr and invalid_rate must lie in [0, 1]".into(),
            ));
        }
        if let Some((c, m)) = self
            .per_country_fnr_multiplier
            .iter()
            .find(|(_, m)| !(**m >= 0.0 && m.is_finite()))
        {
            return Err(ModelError::InvalidSpec(format!("multiplier {m} for {c}")));
        }
        Ok(())
    }

    pub fn fnr_for(&self, country: Option<&str>) -> f64 {
        let mult = country
            .and_then(|c| self.per_country_fnr_multiplier.get(c))
            .copied()
            .unwrap_or(1.0);
        (self.base_fnr * mult).clamp(0.0, 1.0)
    }

    fn uniform(&self, stream: &str, key: &str) -> f64 {
        let h = stable_hash([self.seed.to_string().as_str(), stream, key]);
        let bits = u64::from_str_radix(&h[..16], 16).expect("hex digest");
        (bits >> 11) as f64 / (1u64 << 53) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub kind: BackendKind,
    #[serde(default)]
    pub base_url: Option<String>,
    pub model_id: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_retry_budget")]
    pub retry_budget: u32,
    #[serde(default = "default_retry_base_ms")]
    pub retry_base_ms: u64,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub persona_in_system_role: bool,
    #[serde(default)]
    pub mock_rules: Option<MockPolicy>,
}

fn default_in_flight() -> usize {
    8
}
fn default_retry_budget() -> u32 {
    3
}
fn default_retry_base_ms() -> u64 {
    1000
}
fn default_timeout_secs() -> u64 {
    120
}

impl BackendSpec {
    pub fn mock(model_id: &str, policy: MockPolicy) -> Self {
        Self {
            kind: BackendKind::Mock,
            base_url: None,
            model_id: model_id.to_string(),
            auth_env: None,
            max_in_flight: default_in_flight(),
            retry_budget: default_retry_budget(),
            retry_base_ms: default_retry_base_ms(),
            timeout_secs: default_timeout_secs(),
            persona_in_system_role: false,
            mock_rules: Some(policy),
        }
    }

    pub fn remote(model_id: &str, base_url: &str) -> Self {
        Self {
            kind: BackendKind::Remote,
            base_url: Some(base_url.to_string()),
            auth_env: Some(DEFAULT_AUTH_ENV.to_string()),
            mock_rules: None,
            ..Self::mock(model_id, MockPolicy::default())
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.max_in_flight == 0 {
            return Err(ModelError::InvalidSpec("max_in_flight must be positive".into()));
        }
        if self.model_id.is_empty() {
            return Err(ModelError::InvalidSpec("model_id is empty".into()));
        }
        match self.kind {
            BackendKind::Remote if self.base_url.is_none() => {
                Err(ModelError::InvalidSpec("remote backend requires base_url".into()))
            }
            BackendKind::Mock => match &self.mock_rules {
                None => Err(ModelError::InvalidSpec("mock backend requires mock_rules".into())),
                Some(p) => p.validate(),
            },
            BackendKind::Remote => Ok(()),
        }
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            retries: self.retry_budget,
            base_delay: Duration::from_millis(self.retry_base_ms),
        }
    }

    /// Build the backend. `gold` is required by the mock, which needs the
    /// gold labels to decide what to answer.
    pub fn open(&self, gold: Option<&HashMap<String, Label>>) -> Result<Box<dyn Backend>, ModelError> {
        self.validate()?;
        match self.kind {
            BackendKind::Mock => {
                let gold = gold.ok_or_else(|| {
                    ModelError::InvalidSpec("mock backend needs gold labels".into())
                })?;
                Ok(Box::new(MockBackend::new(
                    &self.model_id,
                    self.mock_rules.clone().expect("validated"),
                    gold.clone(),
                )))
            }
            BackendKind::Remote => {
                let env = self.auth_env.as_deref().unwrap_or(DEFAULT_AUTH_ENV);
                let token = std::env::var(env).ok().filter(|t| !t.is_empty());
                Ok(Box::new(RemoteBackend::new(
                    self.base_url.as_deref().expect("validated"),
                    &self.model_id,
                    token,
                    Duration::from_secs(self.timeout_secs),
                    self.persona_in_system_role,
                )))
            }
        }
    }
}

impl Default for MockPolicy {
    fn default() -> Self {
        Self {
            base_fnr: 0.0,
            per_country_fnr_multiplier: BTreeMap::new(),
            invalid_rate: 0.0,
            seed: 0,
            independent_draws: false,
        }
    }
}

pub struct MockBackend {
    model_id: String,
    policy: MockPolicy,
    gold: HashMap<String, Label>,
}

impl MockBackend {
    pub fn new(model_id: &str, policy: MockPolicy, gold: HashMap<String, Label>) -> Self {
        Self {
            model_id: model_id.to_string(),
            policy,
            gold,
        }
    }
}

impl Backend for MockBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn generate(&self, inst: &PromptInstance, _params: &GenerationParams) -> Result<Reply, BackendError> {
        let label = *self
            .gold
            .get(&inst.post_id)
            .ok_or_else(|| BackendError::Permanent(format!("no gold label for {}", inst.post_id)))?;
        let p = &self.policy;
        let reply = |text: &str| Ok(Reply { text: text.to_string(), latency_ms: 0 });
        if p.invalid_rate > 0.0 && p.uniform("invalid", &inst.instance_key) < p.invalid_rate {
            return reply(REFUSAL_TEXT);
        }
        if label == Label::Neutral {
            return reply(Label::Neutral.answer_word());
        }
        // one latent "difficulty" per post unless draws are independent
        let draw_key = if p.independent_draws { &inst.instance_key } else { &inst.post_id };
        if p.uniform("miss", draw_key) < p.fnr_for(inst.persona_country.as_deref()) {
            reply(Label::Neutral.answer_word())
        } else {
            reply(Label::Hate.answer_word())
        }
    }
}

/// Client for a chat-completions style endpoint (`POST {base_url}/chat/completions`).
pub struct RemoteBackend {
    agent: ureq::Agent,
    url: String,
    model_id: String,
    token: Option<String>,
    persona_in_system_role: bool,
    send_top_k: AtomicBool,
}

impl RemoteBackend {
    pub fn new(
        base_url: &str,
        model_id: &str,
        token: Option<String>,
        timeout: Duration,
        persona_in_system_role: bool,
    ) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            model_id: model_id.to_string(),
            token,
            persona_in_system_role,
            send_top_k: AtomicBool::new(true),
        }
    }

    pub fn request_body(&self, inst: &PromptInstance, params: &GenerationParams) -> serde_json::Value {
        let messages = match split_persona(&inst.rendered_text) {
            (Some(persona), body) if self.persona_in_system_role => json!([
                {"role": "system", "content": persona},
                {"role": "user", "content": body},
            ]),
            _ => json!([{"role": "user", "content": inst.rendered_text}]),
        };
        let mut body = json!({
            "model": self.model_id,
            "messages": messages,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_tokens,
        });
        if self.send_top_k.load(Ordering::Relaxed) {
            body["top_k"] = json!(params.top_k);
        }
        body
    }
}

impl Backend for RemoteBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn top_k_sent(&self) -> Option<bool> {
        Some(self.send_top_k.load(Ordering::Relaxed))
    }

    fn generate(&self, inst: &PromptInstance, params: &GenerationParams) -> Result<Reply, BackendError> {
        let body = self.request_body(inst, params);
        let mut req = self.agent.post(&self.url);
        if let Some(token) = &self.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let start = Instant::now();
        let mut resp = req
            .send_json(&body)
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        let latency_ms = start.elapsed().as_millis() as u64;
        match status {
            200..=299 => {
                let v: serde_json::Value = serde_json::from_str(&text)
                    .map_err(|e| BackendError::Permanent(format!("bad response body: {e}")))?;
                let content = v["choices"][0]["message"]["content"]
                    .as_str()
                    .ok_or_else(|| BackendError::Permanent("response has no message content".into()))?;
                Ok(Reply {
                    text: content.to_string(),
                    latency_ms,
                })
            }
            401 | 403 => Err(BackendError::Auth(format!("HTTP {status}"))),
            400 if text.contains("top_k") && self.send_top_k.swap(false, Ordering::Relaxed) => {
                log::warn!("endpoint rejected top_k; continuing without it");
                Err(BackendError::Transient("top_k rejected".into()))
            }
            408 | 429 | 500..=599 => Err(BackendError::Transient(format!("HTTP {status}"))),
            _ => Err(BackendError::Permanent(format!("HTTP {status}: {text}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `n` (0-based): base · 2ⁿ plus up to 25% jitter.
    pub fn backoff(&self, n: u32) -> Duration {
        let base = self.base_delay.mul_f64(2f64.powi(n as i32));
        base.mul_f64(1.0 + rand::rng().random_range(0.0..0.25))
    }
}

/// One instance through one backend, retrying transient failures.
/// Authentication failures abort with an error; anything else that does not
/// produce text ends as a [`FailureRecord`].
pub fn query(
    backend: &dyn Backend,
    inst: &PromptInstance,
    params: &GenerationParams,
    retry: &RetryPolicy,
) -> Result<QueryOutcome, ModelError> {
    let mut attempts = 0u32;
    loop {
        attempts += 1;
        let err = match backend.generate(inst, params) {
            Ok(reply) => {
                return Ok(QueryOutcome::Done(GenerationRecord {
                    instance_key: inst.instance_key.clone(),
                    cache_key: cache_key(backend.model_id(), &inst.rendered_text, params),
                    post_id: inst.post_id.clone(),
                    variant: inst.variant,
                    persona_country: inst.persona_country.clone(),
                    language_code: inst.language_code.clone(),
                    model_id: backend.model_id().to_string(),
                    raw_output: reply.text,
                    verdict: None,
                    attempt_count: attempts,
                    latency_ms: reply.latency_ms,
                }))
            }
            Err(BackendError::Auth(msg)) => return Err(ModelError::Auth(msg)),
            Err(BackendError::Transient(msg)) if attempts <= retry.retries => {
                log::debug!("{}: attempt {attempts} failed: {msg}", inst.instance_key);
                std::thread::sleep(retry.backoff(attempts - 1));
                continue;
            }
            Err(e) => e,
        };
        return Ok(QueryOutcome::Failed(FailureRecord {
            instance_key: inst.instance_key.clone(),
            post_id: inst.post_id.clone(),
            model_id: backend.model_id().to_string(),
            attempt_count: attempts,
            error: err.to_string(),
        }));
    }
}

#[derive(Debug, Clone, Default)]
pub struct BatchOptions {
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    /// Set to stop handing out new instances; the run ends cleanly and can be resumed.
    pub cancel: Option<Arc<AtomicBool>>,
}

impl BatchOptions {
    pub fn from_spec(spec: &BackendSpec) -> Self {
        Self {
            max_in_flight: spec.max_in_flight,
            retry: spec.retry_policy(),
            cancel: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub completed: usize,
    pub failed: usize,
    pub skipped: usize,
    /// Left unprocessed because the run was cancelled.
    pub pending: usize,
}

pub fn lock_path(results_path: &Path) -> PathBuf {
    sidecar(results_path, "lock")
}

pub fn failures_path(results_path: &Path) -> PathBuf {
    sidecar(results_path, "failures.jsonl")
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}

struct LockGuard(PathBuf);

impl LockGuard {
    fn acquire(results_path: &Path) -> Result<Self, ModelError> {
        let lock = lock_path(results_path);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(LockGuard(lock))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(ModelError::Locked {
                path: results_path.to_path_buf(),
                lock,
            }),
            Err(e) => Err(io_at(&lock)(e)),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

/// Drop a partially written last line left behind by a crash.
fn repair_tail(path: &Path) -> Result<(), ModelError> {
    let mut f = match OpenOptions::new().read(true).write(true).open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(io_at(path)(e)),
    };
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(io_at(path))?;
    if bytes.last().is_some_and(|b| *b != b'\n') {
        let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
        log::warn!("{}: dropping truncated final record", path.display());
        f.set_len(keep as u64).map_err(io_at(path))?;
        f.seek(SeekFrom::End(0)).map_err(io_at(path))?;
    }
    Ok(())
}

/// Read a results file. A missing file reads as empty.
pub fn read_results(path: &Path) -> Result<Vec<GenerationRecord>, ModelError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_at(path)(e)),
    };
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_at(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let corrupt = |message: String| ModelError::CorruptResults {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: GenerationRecord = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
        if !seen.insert(rec.instance_key.clone()) {
            return Err(corrupt(format!("duplicate instance {}", rec.instance_key)));
        }
        out.push(rec);
    }
    Ok(out)
}

fn append_line<T: Serialize>(w: &mut File, item: &T) -> std::io::Result<()> {
    let mut line = serde_json::to_vec(item).map_err(std::io::Error::other)?;
    line.push(b'\n');
    w.write_all(&line)
}

/// Complete every manifest instance not already in `results_path`.
pub fn run_batch(
    backend: &dyn Backend,
    manifest: &[PromptInstance],
    params: &GenerationParams,
    results_path: &Path,
    opts: &BatchOptions,
) -> Result<BatchSummary, ModelError> {
    params.validate()?;
    let mut keys = HashSet::with_capacity(manifest.len());
    for inst in manifest {
        if !keys.insert(inst.instance_key.as_str()) {
            return Err(ModelError::DuplicateInstance(inst.instance_key.clone()));
        }
    }
    let _lock = LockGuard::acquire(results_path)?;
    repair_tail(results_path)?;
    let existing: HashMap<String, String> = read_results(results_path)?
        .into_iter()
        .map(|r| (r.instance_key, r.cache_key))
        .collect();

    let mut summary = BatchSummary::default();
    let mut todo: Vec<&PromptInstance> = Vec::new();
    for inst in manifest {
        match existing.get(&inst.instance_key) {
            Some(ck) if *ck == cache_key(backend.model_id(), &inst.rendered_text, params) => {
                summary.skipped += 1
            }
            Some(_) => return Err(ModelError::ForeignResults(inst.instance_key.clone())),
            None => todo.push(inst),
        }
    }
    if todo.is_empty() {
        return Ok(summary);
    }

    let mut results = OpenOptions::new()
        .create(true)
        .append(true)
        .open(results_path)
        .map_err(io_at(results_path))?;
    let fail_path = failures_path(results_path);
    let mut failures: Option<File> = None;

    let cancel = opts.cancel.clone().unwrap_or_default();
    let next = AtomicUsize::new(0);
    let workers = opts.max_in_flight.max(1).min(todo.len());
    let mut fatal: Option<ModelError> = None;
    let mut written = 0usize;

    std::thread::scope(|s| -> Result<(), ModelError> {
        let (tx, rx) = crossbeam_channel::unbounded::<(usize, Result<QueryOutcome, ModelError>)>();
        for _ in 0..workers {
            let tx = tx.clone();
            let (todo, next, cancel) = (&todo, &next, &cancel);
            s.spawn(move || loop {
                if cancel.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(inst) = todo.get(i) else { break };
                let outcome = query(backend, inst, params, &opts.retry);
                let stop = outcome.is_err();
                if stop {
                    cancel.store(true, Ordering::SeqCst);
                }
                if tx.send((i, outcome)).is_err() || stop {
                    break;
                }
            });
        }
        drop(tx);

        // single writer, manifest order
        let mut buffer: BTreeMap<usize, QueryOutcome> = BTreeMap::new();
        for (i, outcome) in rx {
            match outcome {
                Ok(o) => {
                    buffer.insert(i, o);
                }
                Err(e) => {
                    fatal.get_or_insert(e);
                }
            }
            while let Some(o) = buffer.remove(&written) {
                match o {
                    QueryOutcome::Done(rec) => {
                        append_line(&mut results, &rec).map_err(io_at(results_path))?;
                        results.flush().map_err(io_at(results_path))?;
                        summary.completed += 1;
                    }
                    QueryOutcome::Failed(f) => {
                        if failures.is_none() {
                            failures = Some(
                                OpenOptions::new()
                                    .create(true)
                                    .append(true)
                                    .open(&fail_path)
                                    .map_err(io_at(&fail_path))?,
                            );
                        }
                        let w = failures.as_mut().expect("opened above");
                        append_line(w, &f).map_err(io_at(&fail_path))?;
                        summary.failed += 1;
                    }
                }
                written += 1;
            }
        }
        Ok(())
    })?;

    results.sync_all().map_err(io_at(results_path))?;
    if let Some(e) = fatal {
        return Err(e);
    }
    summary.pending = todo.len() - written;
    Ok(summary)
}
