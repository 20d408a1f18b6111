//! Completion gateway: one interface over a live chat-completions endpoint
//! and an append-only JSONL cassette of recorded completions.
//!
//! Every request is keyed by a digest of the fields that determine the
//! completion. In `replay_only` mode the network is never touched; a
//! missing key is a hard error rather than a silent live call.

use std::collections::HashMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use arc_swap::ArcSwap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompt::PromptBundle;

pub const DEFAULT_MODEL: &str = "gpt-4o-2024-05-13";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub max_tokens: u32,
    pub temperature: f64,
    pub top_p: f64,
}

/// Greedy decoding for test and code generation.
pub const GENERATION: DecodingParams = DecodingParams {
    max_tokens: 1024,
    temperature: 0.0,
    top_p: 1.0,
};

/// Sampled decoding for knowledge queries issued from guest code.
pub const KNOWLEDGE: DecodingParams = DecodingParams {
    max_tokens: 256,
    temperature: 0.6,
    top_p: 0.9,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model_id: String,
    pub system_text: String,
    pub user_text: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub top_p: f64,
}

impl CompletionRequest {
    pub fn new(model_id: &str, system: &str, user: &str, params: DecodingParams) -> Self {
        Self {
            model_id: model_id.to_string(),
            system_text: system.to_string(),
            user_text: user.to_string(),
            max_tokens: params.max_tokens,
            temperature: params.temperature,
            top_p: params.top_p,
        }
    }

    pub fn from_bundle(model_id: &str, bundle: &PromptBundle, params: DecodingParams) -> Self {
        Self::new(model_id, &bundle.system_text, &bundle.user_text, params)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p must be in (0, 1], got {}", self.top_p));
        }
        if self.max_tokens == 0 {
            return Err("max_tokens must be positive".into());
        }
        Ok(())
    }

    /// Hex sha256 over the canonical JSON of the request fields.
    pub fn key(&self) -> String {
        // Struct field order is fixed, so serde_json output is canonical.
        let canonical = serde_json::to_vec(self).expect("request serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompletionSource {
    Cassette,
    Live,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub key: String,
    pub source: CompletionSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub key: String,
    pub request_digest_inputs: CompletionRequest,
    pub completion: String,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

#[derive(Debug, Error)]
pub enum CassetteError {
    #[error("cassette {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cassette {path} line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// Append-only completion store. Reads go through an atomically swapped
/// snapshot; appends are serialized behind one writer lock.
pub struct Cassette {
    path: PathBuf,
    entries: ArcSwap<HashMap<String, CassetteEntry>>,
    writer: Mutex<Option<File>>,
}

impl fmt::Debug for Cassette {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Cassette")
            .field("path", &self.path)
            .field("entries", &self.len())
            .finish()
    }
}

impl Cassette {
    /// Opens an existing cassette for reading and appending, creating an
    /// empty file if none exists.
    pub fn open(path: &Path) -> Result<Self, CassetteError> {
        let io = |source| CassetteError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io)?;
        let entries = Self::read_entries(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            entries: ArcSwap::from_pointee(entries),
            writer: Mutex::new(Some(file)),
        })
    }

    /// Opens a cassette that must already exist and will not be written.
    pub fn open_read_only(path: &Path) -> Result<Self, CassetteError> {
        let entries = Self::read_entries(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            entries: ArcSwap::from_pointee(entries),
            writer: Mutex::new(None),
        })
    }

    fn read_entries(path: &Path) -> Result<HashMap<String, CassetteEntry>, CassetteError> {
        let file = File::open(path).map_err(|source| CassetteError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut entries = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| CassetteError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let corrupt = |message: String| CassetteError::Corrupt {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let entry: CassetteEntry =
                serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
            if entry.request_digest_inputs.key() != entry.key {
                return Err(corrupt(format!("key {} does not match its request", entry.key)));
            }
            // Later lines win, matching append-only semantics.
            entries.insert(entry.key.clone(), entry);
        }
        Ok(entries)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn get(&self, key: &str) -> Option<CassetteEntry> {
        self.entries.load().get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.load().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn append(&self, entry: CassetteEntry) -> Result<(), CassetteError> {
        let mut guard = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        let file = guard.as_mut().ok_or_else(|| CassetteError::Io {
            path: self.path.clone(),
            source: std::io::Error::new(std::io::ErrorKind::PermissionDenied, "read-only cassette"),
        })?;
        let mut line = serde_json::to_string(&entry).expect("entry serializes");
        line.push('\n');
        file.write_all(line.as_bytes())
            .and_then(|_| file.flush())
            .map_err(|source| CassetteError::Io {
                path: self.path.clone(),
                source,
            })?;
        self.entries.rcu(|current| {
            let mut next = HashMap::clone(current);
            next.insert(entry.key.clone(), entry.clone());
            next
        });
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
}

impl ProviderError {
    /// Only failures that say nothing about the request are retried.
    pub fn is_retryable(&self) -> bool {
        match self {
            ProviderError::Transport(_) => true,
            ProviderError::Http { status, .. } => *status == 429 || *status >= 500,
            ProviderError::Malformed(_) => false,
        }
    }
}

pub trait CompletionProvider: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError>;
}

/// Chat-completions client over blocking HTTP.
pub struct HttpProvider {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
}

impl HttpProvider {
    pub fn new(base_url: &str, api_key: Option<String>, timeout: Duration) -> Result<Self, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key,
        })
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

impl CompletionProvider for HttpProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<String, ProviderError> {
        let body = serde_json::json!({
            "model": request.model_id,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": request.user_text},
            ],
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
            "top_p": request.top_p,
        });
        let mut call = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let response = call
            .send()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(ProviderError::Http {
                status: status.as_u16(),
                body: text,
            });
        }
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| ProviderError::Malformed(e.to_string()))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| ProviderError::Malformed("no choices".into()))?;
        Ok(choice.message.content.unwrap_or_default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatewayMode {
    Live,
    CacheThenLive,
    ReplayOnly,
}

impl GatewayMode {
    pub fn name(&self) -> &'static str {
        match self {
            GatewayMode::Live => "live",
            GatewayMode::CacheThenLive => "cache_then_live",
            GatewayMode::ReplayOnly => "replay_only",
        }
    }
}

impl std::str::FromStr for GatewayMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(GatewayMode::Live),
            "cache_then_live" => Ok(GatewayMode::CacheThenLive),
            "replay_only" => Ok(GatewayMode::ReplayOnly),
            other => Err(format!("unknown gateway mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("no recorded completion for request {key}")]
    CassetteMiss { key: String },
    #[error("model returned an empty completion")]
    Refusal,
    #[error("provider failed after {attempts} attempt(s): {source}")]
    Provider {
        attempts: u32,
        #[source]
        source: ProviderError,
    },
    #[error("invalid completion request: {0}")]
    InvalidRequest(String),
    #[error("gateway mode {0} needs a completion provider")]
    NoProvider(&'static str),
    #[error(transparent)]
    Cassette(#[from] CassetteError),
}

pub struct Gateway {
    mode: GatewayMode,
    provider: Option<Box<dyn CompletionProvider>>,
    cassette: Option<Arc<Cassette>>,
    retry: RetryPolicy,
    network_calls: AtomicU64,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("mode", &self.mode)
            .field("cassette", &self.cassette)
            .field("network_calls", &self.network_calls())
            .finish()
    }
}

impl Gateway {
    pub fn new(
        mode: GatewayMode,
        provider: Option<Box<dyn CompletionProvider>>,
        cassette: Option<Arc<Cassette>>,
    ) -> Self {
        Self {
            mode,
            provider,
            cassette,
            retry: RetryPolicy::default(),
            network_calls: AtomicU64::new(0),
        }
    }

    /// Gateway that answers only from `cassette`.
    pub fn replay(cassette: Arc<Cassette>) -> Self {
        Self::new(GatewayMode::ReplayOnly, None, Some(cassette))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn mode(&self) -> GatewayMode {
        self.mode
    }

    pub fn cassette(&self) -> Option<&Arc<Cassette>> {
        self.cassette.as_ref()
    }

    /// Number of provider invocations, including retries.
    pub fn network_calls(&self) -> u64 {
        self.network_calls.load(Ordering::SeqCst)
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<Completion, GatewayError> {
        request.validate().map_err(GatewayError::InvalidRequest)?;
        let key = request.key();
        if self.mode != GatewayMode::Live {
            if let Some(entry) = self.cassette.as_ref().and_then(|c| c.get(&key)) {
                return finish(entry.completion, key, CompletionSource::Cassette);
            }
            if self.mode == GatewayMode::ReplayOnly {
                return Err(GatewayError::CassetteMiss { key });
            }
        }
        let provider = self
            .provider
            .as_deref()
            .ok_or(GatewayError::NoProvider(self.mode.name()))?;
        let text = self.call_with_retry(provider, request)?;
        if let Some(cassette) = &self.cassette {
            cassette.append(CassetteEntry {
                key: key.clone(),
                request_digest_inputs: request.clone(),
                completion: text.clone(),
                metadata: serde_json::json!({
                    "provider": "chat_completions",
                    "recorded_at": std::time::SystemTime::now()
                        .duration_since(std::time::UNIX_EPOCH)
                        .map(|d| d.as_secs())
                        .unwrap_or_default(),
                }),
            })?;
        }
        finish(text, key, CompletionSource::Live)
    }

    fn call_with_retry(
        &self,
        provider: &dyn CompletionProvider,
        request: &CompletionRequest,
    ) -> Result<String, GatewayError> {
        let attempts = self.retry.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.network_calls.fetch_add(1, Ordering::SeqCst);
            match provider.complete(request) {
                Ok(text) => return Ok(text),
                Err(e) if e.is_retryable() && attempt < attempts => {
                    tracing::warn!(attempt, error = %e, "completion failed, retrying");
                    std::thread::sleep(self.retry.base_delay * 2u32.pow(attempt - 1));
                }
                Err(source) => {
                    return Err(GatewayError::Provider {
                        attempts: attempt,
                        source,
                    })
                }
            }
        }
    }
}

fn finish(text: String, key: String, source: CompletionSource) -> Result<Completion, GatewayError> {
    if text.trim().is_empty() {
        return Err(GatewayError::Refusal);
    }
    Ok(Completion { text, key, source })
}
