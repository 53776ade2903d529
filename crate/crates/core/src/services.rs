//! Service-facing types and client traits for the external models: frame
//! encoder, captioner, dense region captioner, tagger and text LLM.
//!
//! Implementations live elsewhere (HTTP clients, mocks); this module fixes
//! the payload invariants every implementation must enforce.

use std::collections::{HashMap, VecDeque};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::FrameEmbeddingTensor;
use crate::keyframe::{Frame, FrameBatch};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ServiceError {
    /// Transport failure; safe to retry.
    #[error("network error: {0}")]
    Network(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    /// The service answered, but the payload broke the protocol or a type
    /// invariant. Never retried.
    #[error("protocol violation: {message}")]
    Protocol { message: String, body: String },
    #[error("invalid request: {0}")]
    Validation(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<ServiceError> },
}

impl ServiceError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ServiceError::Network(_) | ServiceError::RateLimited(_))
    }

    pub fn protocol(message: impl Into<String>, body: impl Into<String>) -> Self {
        ServiceError::Protocol {
            message: message.into(),
            body: body.into(),
        }
    }
}

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;

fn check_confidence(c: f64, what: &str) -> ServiceResult<()> {
    if (0.0..=1.0).contains(&c) {
        Ok(())
    } else {
        Err(ServiceError::protocol(format!("{what} confidence {c} outside [0,1]"), ""))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub patch_size: u32,
    pub input_side: u32,
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 14,
            input_side: 224,
            embed_dim: 1024,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> ServiceResult<()> {
        if self.patch_size == 0 || self.input_side == 0 || self.embed_dim == 0 {
            return Err(ServiceError::Validation("encoder dimensions must be positive".into()));
        }
        if self.input_side % self.patch_size != 0 {
            return Err(ServiceError::Validation(format!(
                "input side {} is not divisible by patch size {}",
                self.input_side, self.patch_size
            )));
        }
        Ok(())
    }

    /// Patch tokens per frame, `(side / patch)²`.
    pub fn token_count(&self) -> usize {
        let side = (self.input_side / self.patch_size) as usize;
        side * side
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameCaption {
    pub text: String,
    pub confidence: f64,
}

impl FrameCaption {
    pub fn validate(&self) -> ServiceResult<()> {
        if self.text.trim().is_empty() {
            return Err(ServiceError::protocol("empty caption text", ""));
        }
        check_confidence(self.confidence, "caption")
    }
}

/// Normalized box `(x0, y0, x1, y1)` in the unit square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionBox(pub f64, pub f64, pub f64, pub f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionCaption {
    pub text: String,
    pub confidence: f64,
    #[serde(rename = "box")]
    pub region: RegionBox,
}

impl RegionCaption {
    pub fn validate(&self) -> ServiceResult<()> {
        if self.text.trim().is_empty() {
            return Err(ServiceError::protocol("empty region caption text", ""));
        }
        check_confidence(self.confidence, "region caption")?;
        let RegionBox(x0, y0, x1, y1) = self.region;
        let ordered = 0.0 <= x0 && x0 < x1 && x1 <= 1.0 && 0.0 <= y0 && y0 < y1 && y1 <= 1.0;
        if !ordered {
            return Err(ServiceError::protocol(
                format!("region box {:?} is not well-ordered inside the unit square", self.region),
                "",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tag {
    pub label: String,
    pub confidence: f64,
}

/// Tags with unique lowercase labels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TagSet {
    tags: Vec<Tag>,
}

impl TagSet {
    /// Lowercases and trims labels, then merges duplicates keeping the
    /// highest confidence at the first occurrence's position. Confidences
    /// outside `[0,1]` and empty labels are rejected.
    pub fn normalized(raw: Vec<Tag>) -> ServiceResult<Self> {
        let mut tags: Vec<Tag> = Vec::with_capacity(raw.len());
        for tag in raw {
            check_confidence(tag.confidence, "tag")?;
            let label = tag.label.trim().to_lowercase();
            if label.is_empty() {
                return Err(ServiceError::protocol("empty tag label", ""));
            }
            match tags.iter_mut().find(|t| t.label == label) {
                Some(existing) => existing.confidence = existing.confidence.max(tag.confidence),
                None => tags.push(Tag {
                    label,
                    confidence: tag.confidence,
                }),
            }
        }
        Ok(Self { tags })
    }

    pub fn tags(&self) -> &[Tag] {
        &self.tags
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.tags.iter().map(|t| t.label.as_str())
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub(crate) fn retain(&mut self, f: impl FnMut(&Tag) -> bool) {
        self.tags.retain(f);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub seed: u64,
}

impl LlmRequest {
    /// Greedy decoding request.
    pub fn deterministic(prompt: impl Into<String>, max_tokens: u32, seed: u64) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens,
            temperature: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> ServiceResult<()> {
        if self.prompt.trim().is_empty() {
            return Err(ServiceError::Validation("prompt is empty".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(ServiceError::Validation(format!("temperature {} must be >= 0", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Complete,
    Length,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
    pub finish_reason: FinishReason,
}

impl LlmResponse {
    pub fn complete(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            finish_reason: FinishReason::Complete,
        }
    }

    pub fn is_truncated(&self) -> bool {
        self.finish_reason != FinishReason::Complete
    }
}

pub trait FrameEncoder: Send + Sync {
    fn encode_frames(&self, cfg: &EncoderConfig, frames: &FrameBatch) -> ServiceResult<FrameEmbeddingTensor<f32>>;
}

pub trait FrameCaptioner: Send + Sync {
    fn caption_frame(&self, frame: &Frame) -> ServiceResult<FrameCaption>;
}

pub trait DenseCaptioner: Send + Sync {
    fn dense_caption_frame(&self, frame: &Frame) -> ServiceResult<Vec<RegionCaption>>;
}

pub trait FrameTagger: Send + Sync {
    fn tag_frame(&self, frame: &Frame) -> ServiceResult<TagSet>;
}

pub trait TextLlm: Send + Sync {
    fn complete_text(&self, req: &LlmRequest) -> ServiceResult<LlmResponse>;

    /// Identifier recorded in provenance.
    fn model_tag(&self) -> &str {
        "llm"
    }
}

impl<T: TextLlm + ?Sized> TextLlm for &T {
    fn complete_text(&self, req: &LlmRequest) -> ServiceResult<LlmResponse> {
        (**self).complete_text(req)
    }
    fn model_tag(&self) -> &str {
        (**self).model_tag()
    }
}

impl<T: TextLlm + ?Sized> TextLlm for std::sync::Arc<T> {
    fn complete_text(&self, req: &LlmRequest) -> ServiceResult<LlmResponse> {
        (**self).complete_text(req)
    }
    fn model_tag(&self) -> &str {
        (**self).model_tag()
    }
}

type Responder = Box<dyn Fn(&str) -> Option<ServiceResult<LlmResponse>> + Send + Sync>;

/// In-process scripted LLM.
///
/// Replies come, in order of priority, from a per-prompt queue, a responder
/// function, and finally a global queue. Each call is recorded.
pub struct ScriptedLlm {
    tag: String,
    per_prompt: Mutex<HashMap<String, VecDeque<ServiceResult<LlmResponse>>>>,
    queue: Mutex<VecDeque<ServiceResult<LlmResponse>>>,
    responder: Option<Responder>,
    calls: Mutex<Vec<String>>,
}

impl Default for ScriptedLlm {
    fn default() -> Self {
        Self::new("scripted")
    }
}

impl ScriptedLlm {
    pub fn new(tag: impl Into<String>) -> Self {
        Self {
            tag: tag.into(),
            per_prompt: Mutex::default(),
            queue: Mutex::default(),
            responder: None,
            calls: Mutex::default(),
        }
    }

    /// Replies computed from the prompt; `None` falls through to the queue.
    pub fn with_responder<F>(mut self, f: F) -> Self
    where
        F: Fn(&str) -> Option<ServiceResult<LlmResponse>> + Send + Sync + 'static,
    {
        self.responder = Some(Box::new(f));
        self
    }

    pub fn push(&self, reply: ServiceResult<LlmResponse>) -> &Self {
        self.queue.lock().expect("poisoned").push_back(reply);
        self
    }

    pub fn push_text(&self, text: impl Into<String>) -> &Self {
        self.push(Ok(LlmResponse::complete(text)))
    }

    pub fn script_prompt(&self, prompt: impl Into<String>, reply: ServiceResult<LlmResponse>) -> &Self {
        self.per_prompt
            .lock()
            .expect("poisoned")
            .entry(prompt.into())
            .or_default()
            .push_back(reply);
        self
    }

    pub fn calls(&self) -> Vec<String> {
        self.calls.lock().expect("poisoned").clone()
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().expect("poisoned").len()
    }
}

impl TextLlm for ScriptedLlm {
    fn complete_text(&self, req: &LlmRequest) -> ServiceResult<LlmResponse> {
        req.validate()?;
        self.calls.lock().expect("poisoned").push(req.prompt.clone());
        if let Some(reply) = self
            .per_prompt
            .lock()
            .expect("poisoned")
            .get_mut(&req.prompt)
            .and_then(VecDeque::pop_front)
        {
            return reply;
        }
        if let Some(reply) = self.responder.as_ref().and_then(|f| f(&req.prompt)) {
            return reply;
        }
        self.queue
            .lock()
            .expect("poisoned")
            .pop_front()
            .unwrap_or_else(|| Err(ServiceError::Network("scripted LLM has no reply left".into())))
    }

    fn model_tag(&self) -> &str {
        &self.tag
    }
}
