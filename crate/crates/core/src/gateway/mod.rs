//! Access to the text and vision models.
//!
//! An [`Endpoint`] pairs a [`ModelEndpointConfig`] with a [`ModelBackend`]
//! (HTTP or scripted mock) and adds retries, rate limiting and transcripts.

mod http;
mod limiter;
mod mock;
pub mod parse;
mod store;
mod template;

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::HttpBackend;
pub use limiter::RateLimiter;
pub use mock::{CallRecord, MockBackend, MockRule, MockScript};
pub use parse::{
    format_option_tag, format_options, letter_index, option_letter, parse_option_tag, parse_patterns_block,
    selection_or_ambiguous, tag_content, MalformedResponse, PatternsBlock, Selection,
};
pub use store::{TranscriptRecord, TranscriptStore};
pub use template::{render_template, PromptName, PromptSet, PromptTemplate};

use crate::digest::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Text,
    Vision,
}

impl fmt::Display for ModelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelRole::Text => "text",
            ModelRole::Vision => "vision",
        })
    }
}

fn default_max_retries() -> u32 {
    2
}
fn default_timeout_secs() -> u64 {
    120
}
fn default_backoff_ms() -> u64 {
    1000
}
fn default_temperature() -> f64 {
    1.0
}

fn default_role() -> ModelRole {
    ModelRole::Text
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpointConfig {
    #[serde(default = "default_role")]
    pub role: ModelRole,
    #[serde(default)]
    pub base_url: String,
    pub model_name: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Retries after the first attempt; 2 gives three attempts in total.
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: String,
    #[serde(default)]
    pub requests_per_minute: Option<u32>,
    /// First retry delay; doubles on each further retry.
    #[serde(default = "default_backoff_ms")]
    pub initial_backoff_ms: u64,
}

impl ModelEndpointConfig {
    pub fn new(role: ModelRole, model_name: impl Into<String>) -> Self {
        Self {
            role,
            base_url: String::new(),
            model_name: model_name.into(),
            temperature: default_temperature(),
            max_retries: default_max_retries(),
            timeout_secs: default_timeout_secs(),
            api_key_env: String::new(),
            requests_per_minute: None,
            initial_backoff_ms: default_backoff_ms(),
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_backoff_ms(mut self, ms: u64) -> Self {
        self.initial_backoff_ms = ms;
        self
    }
}

/// One model call before it is sent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelRequest {
    pub template: PromptName,
    pub prompt: String,
    /// Local path or URI of an attached image.
    pub image: Option<String>,
    /// Distinguishes independent samples of the same prompt (votes, retries).
    pub sample_index: u32,
    /// Work item this call belongs to; audit only, not part of the digest.
    pub item_key: String,
}

impl ModelRequest {
    pub fn new(template: PromptName, prompt: String) -> Self {
        Self {
            template,
            prompt,
            image: None,
            sample_index: 0,
            item_key: String::new(),
        }
    }

    pub fn for_item(mut self, key: impl Into<String>) -> Self {
        self.item_key = key.into();
        self
    }

    pub fn sample(mut self, index: u32) -> Self {
        self.sample_index = index;
        self
    }

    pub fn with_image(mut self, image: impl Into<String>) -> Self {
        self.image = Some(image.into());
        self
    }

    /// Stable hash over the rendered prompt, the attachment and the sample
    /// index.
    pub fn digest(&self) -> String {
        let mut bytes = Vec::with_capacity(self.prompt.len() + 64);
        bytes.extend_from_slice(self.prompt.as_bytes());
        bytes.push(0);
        bytes.extend_from_slice(self.image.as_deref().unwrap_or("").as_bytes());
        bytes.push(0);
        bytes.extend_from_slice(self.sample_index.to_string().as_bytes());
        sha256_hex(&bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelTranscript {
    pub request_digest: String,
    pub raw_response: String,
    pub latency_ms: u64,
    pub attempt_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub transcript: ModelTranscript,
}

/// Failure reported by a backend for a single attempt.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("image unreadable: {0}")]
    ImageUnreadable(String),
    /// Unrecoverable for the whole run (e.g. an unscripted mock request).
    #[error("{0}")]
    Fatal(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("template variable {0:?} missing")]
    MissingVariable(String),
    #[error("endpoint unavailable after {attempts} attempts: {last_error}")]
    EndpointUnavailable { attempts: u32, last_error: String },
    #[error("authentication failed: {0}")]
    AuthError(String),
    #[error("image unreadable: {0}")]
    ImageUnreadable(String),
    #[error("{role} endpoint cannot serve this request: {detail}")]
    RoleMismatch { role: ModelRole, detail: String },
    #[error("{0}")]
    Fatal(String),
}

impl GatewayError {
    /// Whether the item should be retried in a later run rather than
    /// recorded or aborted.
    pub fn is_deferrable(&self) -> bool {
        matches!(self, GatewayError::EndpointUnavailable { .. })
    }
}

/// Sends one attempt of a request.
pub trait ModelBackend: Send + Sync {
    fn send(&self, config: &ModelEndpointConfig, request: &ModelRequest) -> Result<String, BackendError>;
}

const RASTER_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "gif", "webp", "bmp"];

fn is_uri(image: &str) -> bool {
    ["http://", "https://", "data:"].iter().any(|p| image.starts_with(p))
}

/// Resolves an image reference against `root` and checks it can be sent.
pub fn resolve_image(image: &str, root: Option<&Path>) -> Result<String, GatewayError> {
    if is_uri(image) {
        return Ok(image.to_string());
    }
    let path = match root {
        Some(root) if Path::new(image).is_relative() => root.join(image),
        _ => PathBuf::from(image),
    };
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    if !RASTER_EXTENSIONS.contains(&ext.as_str()) {
        return Err(GatewayError::ImageUnreadable(format!(
            "{}: unsupported image format",
            path.display()
        )));
    }
    if !path.is_file() {
        return Err(GatewayError::ImageUnreadable(format!("{}: not found", path.display())));
    }
    Ok(path.to_string_lossy().into_owned())
}

/// A configured model endpoint.
#[derive(Clone)]
pub struct Endpoint {
    config: ModelEndpointConfig,
    backend: Arc<dyn ModelBackend>,
    limiter: Option<Arc<RateLimiter>>,
    image_root: Option<PathBuf>,
    store: Option<Arc<TranscriptStore>>,
}

impl fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Endpoint").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Endpoint {
    pub fn new(config: ModelEndpointConfig, backend: Arc<dyn ModelBackend>) -> Self {
        let limiter = config
            .requests_per_minute
            .map(|rpm| Arc::new(RateLimiter::per_minute(rpm)));
        Self {
            config,
            backend,
            limiter,
            image_root: None,
            store: None,
        }
    }

    /// Serves repeated requests from `store` and records new completions
    /// in it.
    pub fn with_store(mut self, store: Arc<TranscriptStore>) -> Self {
        self.store = Some(store);
        self
    }

    /// Directory that relative image paths are resolved against.
    pub fn with_image_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.image_root = Some(root.into());
        self
    }

    pub fn config(&self) -> &ModelEndpointConfig {
        &self.config
    }

    pub fn role(&self) -> ModelRole {
        self.config.role
    }

    /// Text-only completion on a text endpoint.
    pub fn complete_text(&self, request: ModelRequest) -> Result<Completion, GatewayError> {
        if self.config.role != ModelRole::Text {
            return Err(GatewayError::RoleMismatch {
                role: self.config.role,
                detail: "complete_text needs a text endpoint".into(),
            });
        }
        self.complete(request)
    }

    /// Completion on a vision endpoint, with or without an image.
    pub fn complete_vision(&self, request: ModelRequest) -> Result<Completion, GatewayError> {
        if self.config.role != ModelRole::Vision {
            return Err(GatewayError::RoleMismatch {
                role: self.config.role,
                detail: "complete_vision needs a vision endpoint".into(),
            });
        }
        self.complete(request)
    }

    /// Sends `request` with retries and exponential backoff.
    ///
    /// The digest is taken over the image reference as given, before it
    /// is resolved against the image root.
    pub fn complete(&self, mut request: ModelRequest) -> Result<Completion, GatewayError> {
        let digest = request.digest();
        if let Some(image) = request.image.take() {
            if self.config.role == ModelRole::Text {
                return Err(GatewayError::RoleMismatch {
                    role: ModelRole::Text,
                    detail: "text endpoints do not accept images".into(),
                });
            }
            request.image = Some(resolve_image(&image, self.image_root.as_deref())?);
        }
        if let Some(store) = &self.store {
            if let Some(transcript) = store.lookup(self.config.role, &self.config.model_name, &digest) {
                return Ok(Completion {
                    text: transcript.raw_response.clone(),
                    transcript,
                });
            }
        }
        let started = Instant::now();
        let max_attempts = self.config.max_retries + 1;
        let mut last_error = String::new();
        for attempt in 1..=max_attempts {
            if attempt > 1 {
                let factor = 1u64 << (attempt - 2).min(16);
                let delay = self.config.initial_backoff_ms.saturating_mul(factor);
                if delay > 0 {
                    std::thread::sleep(Duration::from_millis(delay));
                }
            }
            if let Some(limiter) = &self.limiter {
                limiter.acquire();
            }
            match self.backend.send(&self.config, &request) {
                Ok(text) => {
                    let transcript = ModelTranscript {
                        request_digest: digest,
                        raw_response: text.clone(),
                        latency_ms: started.elapsed().as_millis() as u64,
                        attempt_count: attempt,
                    };
                    if let Some(store) = &self.store {
                        store
                            .record(self.config.role, &self.config.model_name, &request, &transcript)
                            .map_err(|e| GatewayError::Fatal(format!("transcript store: {e}")))?;
                    }
                    return Ok(Completion { text, transcript });
                }
                Err(BackendError::Transport(e)) => {
                    log::warn!(
                        "{} call for {} failed (attempt {attempt}/{max_attempts}): {e}",
                        request.template,
                        request.item_key
                    );
                    last_error = e;
                }
                Err(BackendError::Auth(e)) => return Err(GatewayError::AuthError(e)),
                Err(BackendError::ImageUnreadable(e)) => return Err(GatewayError::ImageUnreadable(e)),
                Err(BackendError::Fatal(e)) => return Err(GatewayError::Fatal(e)),
            }
        }
        Err(GatewayError::EndpointUnavailable {
            attempts: max_attempts,
            last_error,
        })
    }
}
