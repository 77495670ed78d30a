//! Concrete LLM backends: the persistent response cache, the caching and
//! replay wrappers, scripted replies from a file, and the remote
//! chat-completion client.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use base64::Engine;
use mapnav_core::llm::{Backend, BackendError, LlmRequest, ScriptedBackend};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::io::{read_jsonl, IoError};

/// One persisted response, keyed by request digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub model_id: String,
    pub response_text: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

/// Append-only JSONL response store. Entries are immutable: the first
/// response written for a digest wins.
#[derive(Debug)]
pub struct ResponseCache {
    path: PathBuf,
    entries: RwLock<HashMap<String, String>>,
    writer: Mutex<File>,
}

impl ResponseCache {
    pub fn open(path: &Path) -> Result<Self, IoError> {
        let mut entries = HashMap::new();
        if path.exists() {
            let f = File::open(path).map_err(|e| IoError::io(path, e))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| IoError::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheEntry>(&line) {
                    Ok(e) => {
                        entries.entry(e.key).or_insert(e.response_text);
                    }
                    Err(e) => log::warn!("{}:{}: skipping unreadable cache entry: {e}", path.display(), i + 1),
                }
            }
        }
        let writer = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| IoError::io(path, e))?;
        Ok(ResponseCache { path: path.to_path_buf(), entries: RwLock::new(entries), writer: Mutex::new(writer) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.entries.read().unwrap().get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stores `response` under the request's digest unless already present.
    pub fn insert(&self, req: &LlmRequest, response: &str) -> std::io::Result<()> {
        let key = req.digest();
        let mut writer = self.writer.lock().unwrap();
        if self.entries.read().unwrap().contains_key(&key) {
            return Ok(());
        }
        let entry = CacheEntry {
            key: key.clone(),
            model_id: req.model_id.clone(),
            response_text: response.to_string(),
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        };
        let mut line = serde_json::to_string(&entry).expect("cache entry serializes");
        line.push('\n');
        // One write per entry while holding the lock: no interleaved lines.
        writer.write_all(line.as_bytes())?;
        writer.flush()?;
        self.entries.write().unwrap().insert(key, entry.response_text);
        Ok(())
    }
}

/// Counters shared by a run's backends.
#[derive(Debug, Default)]
pub struct CallStats {
    pub remote_calls: AtomicUsize,
    pub cache_hits: AtomicUsize,
    pub cache_misses: AtomicUsize,
}

impl CallStats {
    pub fn snapshot(&self) -> CallCounts {
        CallCounts {
            remote_calls: self.remote_calls.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
            cache_misses: self.cache_misses.load(Ordering::SeqCst),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub remote_calls: usize,
    pub cache_hits: usize,
    pub cache_misses: usize,
}

/// Serves from the cache and records fresh responses of `inner` into it.
pub struct CachingBackend<B> {
    inner: B,
    cache: Arc<ResponseCache>,
    stats: Arc<CallStats>,
}

impl<B> CachingBackend<B> {
    pub fn new(inner: B, cache: Arc<ResponseCache>, stats: Arc<CallStats>) -> Self {
        CachingBackend { inner, cache, stats }
    }
}

impl<B: Backend> Backend for CachingBackend<B> {
    fn complete(&self, req: &LlmRequest) -> Result<String, BackendError> {
        if let Some(hit) = self.cache.get(&req.digest()) {
            self.stats.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(hit);
        }
        self.stats.cache_misses.fetch_add(1, Ordering::SeqCst);
        let text = self.inner.complete(req)?;
        if let Err(e) = self.cache.insert(req, &text) {
            log::warn!("could not persist response to {}: {e}", self.cache.path().display());
        }
        Ok(text)
    }
}

/// Answers only from the cache.
pub struct ReplayBackend {
    cache: Arc<ResponseCache>,
    stats: Arc<CallStats>,
}

impl ReplayBackend {
    pub fn new(cache: Arc<ResponseCache>, stats: Arc<CallStats>) -> Self {
        ReplayBackend { cache, stats }
    }
}

impl Backend for ReplayBackend {
    fn complete(&self, req: &LlmRequest) -> Result<String, BackendError> {
        let key = req.digest();
        match self.cache.get(&key) {
            Some(text) => {
                self.stats.cache_hits.fetch_add(1, Ordering::SeqCst);
                Ok(text)
            }
            None => {
                self.stats.cache_misses.fetch_add(1, Ordering::SeqCst);
                Err(BackendError::CacheMiss(key))
            }
        }
    }
}

/// Line of a script file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptLine {
    pub episode_id: String,
    pub step: usize,
    pub response: String,
}

pub fn load_script(path: &Path) -> Result<ScriptedBackend, IoError> {
    let lines: Vec<ScriptLine> = read_jsonl(path)?;
    let mut b = ScriptedBackend::new();
    for l in lines {
        b.push(&l.episode_id, l.step, l.response);
    }
    Ok(b)
}

pub fn script_lines(backend: &ScriptedBackend) -> Vec<ScriptLine> {
    backend
        .iter()
        .flat_map(|(e, step, replies)| {
            replies.iter().map(move |r| ScriptLine { episode_id: e.to_string(), step, response: r.clone() })
        })
        .collect()
}

fn default_endpoint() -> String {
    "https://api.openai.com/v1/chat/completions".into()
}
fn default_api_key_env() -> String {
    "OPENAI_API_KEY".into()
}
fn default_timeout() -> u64 {
    60
}
fn default_retries() -> u32 {
    4
}
fn default_backoff() -> u64 {
    500
}
fn default_auth_header() -> String {
    "Authorization".into()
}
fn default_auth_prefix() -> String {
    "Bearer ".into()
}
fn default_model_field() -> String {
    "model".into()
}
fn default_messages_field() -> String {
    "messages".into()
}
fn default_temperature_field() -> String {
    "temperature".into()
}
fn default_response_pointer() -> String {
    "/choices/0/message/content".into()
}

/// Chat-completion endpoint settings. Field names of the wire format are
/// configuration so other providers with the same message shape can be
/// targeted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteConfig {
    #[serde(default = "default_endpoint")]
    pub endpoint: String,
    /// Name of the environment variable holding the API key.
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Attempts after the first on transport errors.
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// First backoff delay; doubles every retry.
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    #[serde(default = "default_auth_header")]
    pub auth_header: String,
    #[serde(default = "default_auth_prefix")]
    pub auth_prefix: String,
    #[serde(default = "default_model_field")]
    pub model_field: String,
    #[serde(default = "default_messages_field")]
    pub messages_field: String,
    #[serde(default = "default_temperature_field")]
    pub temperature_field: String,
    /// JSON pointer to the reply text in the response body.
    #[serde(default = "default_response_pointer")]
    pub response_pointer: String,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            endpoint: default_endpoint(),
            api_key_env: default_api_key_env(),
            temperature: 0.0,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_ms: default_backoff(),
            auth_header: default_auth_header(),
            auth_prefix: default_auth_prefix(),
            model_field: default_model_field(),
            messages_field: default_messages_field(),
            temperature_field: default_temperature_field(),
            response_pointer: default_response_pointer(),
        }
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    api_key: String,
    client: reqwest::blocking::Client,
    stats: Arc<CallStats>,
}

impl RemoteBackend {
    /// Reads the API key from `config.api_key_env`.
    pub fn new(config: RemoteConfig, stats: Arc<CallStats>) -> Result<Self, BackendError> {
        let api_key = std::env::var(&config.api_key_env)
            .map_err(|_| BackendError::Auth(format!("environment variable {} is not set", config.api_key_env)))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(RemoteBackend { config, api_key, client, stats })
    }

    /// Request body for `req`.
    pub fn request_body(&self, req: &LlmRequest) -> Result<Value, BackendError> {
        let user = if req.image_refs.is_empty() {
            Value::String(req.user_text.clone())
        } else {
            Value::Array(interleave_images(&req.user_text, &req.image_refs)?)
        };
        let mut body = serde_json::Map::new();
        body.insert(self.config.model_field.clone(), json!(req.model_id));
        body.insert(self.config.temperature_field.clone(), json!(self.config.temperature));
        body.insert(
            self.config.messages_field.clone(),
            json!([
                {"role": "system", "content": req.system_text},
                {"role": "user", "content": user},
            ]),
        );
        Ok(Value::Object(body))
    }

    fn send_once(&self, body: &Value) -> Result<String, BackendError> {
        self.stats.remote_calls.fetch_add(1, Ordering::SeqCst);
        let resp = self
            .client
            .post(&self.config.endpoint)
            .header(&self.config.auth_header, format!("{}{}", self.config.auth_prefix, self.api_key))
            .json(body)
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        if status == reqwest::StatusCode::UNAUTHORIZED || status == reqwest::StatusCode::FORBIDDEN {
            return Err(BackendError::Auth(format!("{status}: {text}")));
        }
        if status == reqwest::StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            return Err(BackendError::Transport(format!("{status}: {text}")));
        }
        if !status.is_success() {
            return Err(BackendError::Config(format!("{status}: {text}")));
        }
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| BackendError::Transport(format!("malformed response body: {e}")))?;
        v.pointer(&self.config.response_pointer)
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::Transport(format!("no text at {}", self.config.response_pointer)))
    }
}

impl Backend for RemoteBackend {
    fn complete(&self, req: &LlmRequest) -> Result<String, BackendError> {
        let body = self.request_body(req)?;
        let mut delay = Duration::from_millis(self.config.backoff_ms);
        let mut attempt = 0;
        loop {
            match self.send_once(&body) {
                Err(e) if e.is_retryable() && attempt < self.config.max_retries => {
                    log::warn!("remote call failed ({e}); retrying in {delay:?}");
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Splits `text` at `<ImgK>` placeholders into text and image parts.
fn interleave_images(text: &str, refs: &[String]) -> Result<Vec<Value>, BackendError> {
    let mut parts = Vec::new();
    let mut rest = text;
    for (k, r) in refs.iter().enumerate() {
        let placeholder = format!("<Img{k}>");
        let Some(pos) = rest.find(&placeholder) else {
            return Err(BackendError::Config(format!("user text has no {placeholder} placeholder")));
        };
        if pos > 0 {
            parts.push(json!({"type": "text", "text": &rest[..pos]}));
        }
        parts.push(json!({"type": "image_url", "image_url": {"url": image_url(r)?}}));
        rest = &rest[pos + placeholder.len()..];
    }
    if !rest.is_empty() {
        parts.push(json!({"type": "text", "text": rest}));
    }
    Ok(parts)
}

/// URLs pass through; local files become base64 data URLs.
fn image_url(r: &str) -> Result<String, BackendError> {
    if r.starts_with("http://") || r.starts_with("https://") || r.starts_with("data:") {
        return Ok(r.to_string());
    }
    let bytes = std::fs::read(r).map_err(|e| BackendError::Config(format!("image {r}: {e}")))?;
    let mime = match Path::new(r).extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "image/jpeg",
    };
    Ok(format!("data:{mime};base64,{}", base64::engine::general_purpose::STANDARD.encode(bytes)))
}
