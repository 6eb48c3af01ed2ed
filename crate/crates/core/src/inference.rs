//! Model access: an HTTP client for chat-completions style endpoints and
//! deterministic simulated models for offline runs.
//!
//! Requests follow the conversation layout: one user turn per shot (context
//! text, image, rendered prompt with the shown label, box coordinates),
//! then a final user turn with the query image and rendered prompt.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use async_trait::async_trait;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::convo::Conversation;
use crate::geometry::{BBox, PER_MILLE};
use crate::prompts::{PromptError, PromptTemplate};
use crate::respparse::{format_box, format_corners};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("transport error (status {status:?}): {message}")]
    Transport { status: Option<u16>, message: String },
    #[error("rate limited")]
    RateLimited,
    #[error("request timed out")]
    Timeout,
    #[error("image {image_ref} unreadable: {reason}")]
    ImageUnreadable { image_ref: String, reason: String },
    #[error("environment variable {0} is not set")]
    MissingApiKey(String),
    #[error("invalid endpoint config: {0}")]
    Config(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

impl InferenceError {
    /// Worth another attempt.
    pub fn is_transient(&self) -> bool {
        match self {
            InferenceError::RateLimited | InferenceError::Timeout => true,
            InferenceError::Transport { status: None, .. } => true,
            InferenceError::Transport { status: Some(s), .. } => *s >= 500 || *s == 408,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ImageDetail {
    #[default]
    Auto,
    High,
}

impl ImageDetail {
    pub fn as_str(&self) -> &'static str {
        match self {
            ImageDetail::Auto => "auto",
            ImageDetail::High => "high",
        }
    }
}

/// Exponential backoff with equal jitter: attempt `i` waits between half and
/// all of `min(cap, base * factor^i)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackoffPolicy {
    pub base: Duration,
    pub factor: f64,
    pub cap: Duration,
    pub jitter: bool,
}

impl Default for BackoffPolicy {
    fn default() -> Self {
        Self { base: Duration::from_secs(1), factor: 2.0, cap: Duration::from_secs(60), jitter: true }
    }
}

impl BackoffPolicy {
    pub fn ceiling(&self, attempt: u32) -> Duration {
        let raw = self.base.as_secs_f64() * self.factor.powi(attempt as i32);
        Duration::from_secs_f64(raw.min(self.cap.as_secs_f64()))
    }

    pub fn delay(&self, attempt: u32, rng: &mut impl Rng) -> Duration {
        let ceiling = self.ceiling(attempt);
        if !self.jitter || ceiling.is_zero() {
            return ceiling;
        }
        let half = ceiling.as_secs_f64() / 2.0;
        Duration::from_secs_f64(half + rng.random_range(0.0..=half))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointConfig {
    pub base_url: String,
    /// Environment variable holding the bearer token; `None` sends no auth.
    pub api_key_env_var: Option<String>,
    pub model_name: String,
    pub timeout: Duration,
    pub max_retries: u32,
    pub image_detail: ImageDetail,
    pub parallelism: usize,
    pub temperature: f64,
    pub backoff: BackoffPolicy,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key_env_var: None,
            model_name: model_name.into(),
            timeout: Duration::from_secs(120),
            max_retries: 3,
            image_detail: ImageDetail::Auto,
            parallelism: 4,
            temperature: 0.0,
            backoff: BackoffPolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<(), InferenceError> {
        if self.parallelism < 1 {
            return Err(InferenceError::Config("parallelism must be >= 1".into()));
        }
        if self.timeout.is_zero() {
            return Err(InferenceError::Config("timeout must be > 0".into()));
        }
        if self.base_url.is_empty() {
            return Err(InferenceError::Config("empty base url".into()));
        }
        Ok(())
    }

    pub fn endpoint_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

/// Anything that can answer a localization conversation.
#[async_trait]
pub trait Responder: Send + Sync {
    fn model_name(&self) -> String;

    /// Whether wall-clock latency is meaningful for this responder.
    fn measures_latency(&self) -> bool {
        true
    }

    async fn respond(&self, conv: &Conversation, template: &PromptTemplate) -> Result<String, InferenceError>;
}

// ---------------------------------------------------------------------------
// request construction

fn mime_for(path: &Path) -> &'static str {
    match path.extension().map(|e| e.to_string_lossy().to_lowercase()).as_deref() {
        Some("png") => "image/png",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("bmp") => "image/bmp",
        _ => "image/jpeg",
    }
}

/// URL form of an image reference: remote and data URLs pass through, local
/// files are inlined as base64 data URLs.
pub fn resolve_image(image_ref: &str) -> Result<String, InferenceError> {
    if image_ref.starts_with("http://") || image_ref.starts_with("https://") || image_ref.starts_with("data:") {
        return Ok(image_ref.to_string());
    }
    let path = Path::new(image_ref.strip_prefix("file://").unwrap_or(image_ref));
    let bytes = std::fs::read(path).map_err(|e| InferenceError::ImageUnreadable {
        image_ref: image_ref.to_string(),
        reason: e.to_string(),
    })?;
    let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
    Ok(format!("data:{};base64,{}", mime_for(path), encoded))
}

fn text_part(text: &str) -> Value {
    json!({ "type": "text", "text": text })
}

fn image_part(url: String, detail: ImageDetail) -> Value {
    json!({ "type": "image_url", "image_url": { "url": url, "detail": detail.as_str() } })
}

/// Chat-completions request body. Every image is resolved before anything
/// else happens, so unreadable images fail without network traffic.
pub fn build_request(
    cfg: &EndpointConfig,
    conv: &Conversation,
    template: &PromptTemplate,
) -> Result<Value, InferenceError> {
    let mut images = Vec::with_capacity(conv.shots.len() + 1);
    for s in &conv.shots {
        images.push(resolve_image(&s.image_ref)?);
    }
    images.push(resolve_image(&conv.query_image_ref)?);
    let query_url = images.pop().expect("query image");

    let mut messages = Vec::with_capacity(conv.shots.len() + 1);
    for (shot, url) in conv.shots.iter().zip(images) {
        let mut content = Vec::with_capacity(5);
        if !shot.pre_text.is_empty() {
            content.push(text_part(&shot.pre_text));
        }
        content.push(image_part(url, cfg.image_detail));
        content.push(text_part(&template.render(&shot.shown_label)?));
        if !shot.post_text.is_empty() {
            content.push(text_part(&shot.post_text));
        }
        content.push(text_part(&format_box(&shot.bbox)));
        messages.push(json!({ "role": "user", "content": content }));
    }
    messages.push(json!({
        "role": "user",
        "content": [image_part(query_url, cfg.image_detail), text_part(&template.render(&conv.query_label)?)],
    }));
    Ok(json!({
        "model": cfg.model_name,
        "temperature": cfg.temperature,
        "messages": messages,
    }))
}

/// Assistant text of a chat-completions response (string content or a list
/// of text parts).
pub fn extract_content(body: &Value) -> Option<String> {
    let content = body.get("choices")?.get(0)?.get("message")?.get("content")?;
    match content {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => Some(
            parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join(""),
        ),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// HTTP client

pub struct ChatClient {
    cfg: EndpointConfig,
    http: reqwest::Client,
    api_key: Option<String>,
}

impl ChatClient {
    pub fn new(cfg: EndpointConfig) -> Result<Self, InferenceError> {
        cfg.validate()?;
        let api_key = match &cfg.api_key_env_var {
            Some(var) => Some(std::env::var(var).map_err(|_| InferenceError::MissingApiKey(var.clone()))?),
            None => None,
        };
        let http = reqwest::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| InferenceError::Config(e.to_string()))?;
        Ok(Self { cfg, http, api_key })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    /// Sends the conversation and returns the assistant text verbatim,
    /// retrying transient failures up to `max_retries` times.
    pub async fn chat(&self, conv: &Conversation, template: &PromptTemplate) -> Result<String, InferenceError> {
        let body = build_request(&self.cfg, conv, template)?;
        let mut attempt = 0u32;
        loop {
            match self.send_once(&body).await {
                Ok(text) => return Ok(text),
                Err(e) if e.is_transient() && attempt < self.cfg.max_retries => {
                    let delay = self.cfg.backoff.delay(attempt, &mut rand::rng());
                    log::debug!("{}: attempt {} failed ({e}), retrying in {delay:?}", conv.conv_id, attempt + 1);
                    tokio::time::sleep(delay).await;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    async fn send_once(&self, body: &Value) -> Result<String, InferenceError> {
        let mut req = self.http.post(self.cfg.endpoint_url()).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await.map_err(map_reqwest)?;
        let status = resp.status();
        if status.as_u16() == 429 {
            return Err(InferenceError::RateLimited);
        }
        if !status.is_success() {
            let message = resp.text().await.unwrap_or_default();
            return Err(InferenceError::Transport { status: Some(status.as_u16()), message });
        }
        let value: Value = resp.json().await.map_err(map_reqwest)?;
        extract_content(&value).ok_or_else(|| InferenceError::Transport {
            status: Some(status.as_u16()),
            message: "response has no message content".into(),
        })
    }
}

fn map_reqwest(e: reqwest::Error) -> InferenceError {
    if e.is_timeout() {
        InferenceError::Timeout
    } else {
        InferenceError::Transport { status: e.status().map(|s| s.as_u16()), message: e.to_string() }
    }
}

#[async_trait]
impl Responder for ChatClient {
    fn model_name(&self) -> String {
        self.cfg.model_name.clone()
    }

    async fn respond(&self, conv: &Conversation, template: &PromptTemplate) -> Result<String, InferenceError> {
        self.chat(conv, template).await
    }
}

// ---------------------------------------------------------------------------
// simulated models

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShotChoice {
    First,
    Last,
}

/// Deterministic stand-in models used to validate the metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SimModel {
    /// Answers the true target box.
    Oracle,
    /// Repeats one shot's box.
    Copier(ShotChoice),
    /// Uniform random box, seeded per conversation.
    Random(u64),
    /// Target box shifted by `(dx, dy)` per-mille, clamped.
    Offset(f64, f64),
}

impl fmt::Display for SimModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimModel::Oracle => write!(f, "oracle"),
            SimModel::Copier(ShotChoice::First) => write!(f, "copier:first"),
            SimModel::Copier(ShotChoice::Last) => write!(f, "copier:last"),
            SimModel::Random(seed) => write!(f, "random:{seed}"),
            SimModel::Offset(dx, dy) => write!(f, "offset:{dx},{dy}"),
        }
    }
}

impl FromStr for SimModel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, arg) = s.split_once(':').map(|(k, a)| (k, Some(a))).unwrap_or((s, None));
        match (kind.to_ascii_lowercase().as_str(), arg) {
            ("oracle", None) => Ok(SimModel::Oracle),
            ("copier", None) | ("copier", Some("last")) => Ok(SimModel::Copier(ShotChoice::Last)),
            ("copier", Some("first")) => Ok(SimModel::Copier(ShotChoice::First)),
            ("random", None) => Ok(SimModel::Random(0)),
            ("random", Some(seed)) => seed.parse().map(SimModel::Random).map_err(|_| format!("bad seed in {s:?}")),
            ("offset", Some(d)) => {
                let (dx, dy) = d.split_once(',').ok_or_else(|| format!("expected offset:dx,dy, got {s:?}"))?;
                let dx = dx.trim().parse().map_err(|_| format!("bad dx in {s:?}"))?;
                let dy = dy.trim().parse().map_err(|_| format!("bad dy in {s:?}"))?;
                Ok(SimModel::Offset(dx, dy))
            }
            _ => Err(format!("unknown simulated model {s:?}")),
        }
    }
}

fn conversation_seed(conv_id: &str, seed: u64) -> u64 {
    let digest = Sha256::digest(conv_id.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(b) ^ seed
}

/// Answer text of `model` for `conv`, in the `[a, b, c, d]` per-mille form.
pub fn simulate(model: &SimModel, conv: &Conversation) -> String {
    match *model {
        SimModel::Oracle => format_box(&conv.target_box),
        SimModel::Copier(which) => {
            let shot = match which {
                ShotChoice::First => conv.shots.first(),
                ShotChoice::Last => conv.shots.last(),
            };
            format_box(&shot.map(|s| s.bbox).unwrap_or(conv.target_box))
        }
        SimModel::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(conversation_seed(&conv.conv_id, seed));
            let max = PER_MILLE as u32;
            let (x0, x1) = (rng.random_range(0..=max), rng.random_range(0..=max));
            let (y0, y1) = (rng.random_range(0..=max), rng.random_range(0..=max));
            format_corners([x0.min(x1) as f64, y0.min(y1) as f64, x0.max(x1) as f64, y0.max(y1) as f64])
        }
        SimModel::Offset(dx, dy) => {
            let b: BBox = conv.target_box.translated_clamped(dx, dy);
            format_box(&b)
        }
    }
}

#[async_trait]
impl Responder for SimModel {
    fn model_name(&self) -> String {
        format!("sim:{self}")
    }

    fn measures_latency(&self) -> bool {
        false
    }

    async fn respond(&self, conv: &Conversation, _template: &PromptTemplate) -> Result<String, InferenceError> {
        Ok(simulate(self, conv))
    }
}
