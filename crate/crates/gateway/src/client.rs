//! Blocking HTTP clients with bounded, jittered retries and a per-endpoint
//! in-flight limit.

use std::collections::BTreeMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vidinstruct_core::adapter::FrameEmbeddingTensor;
use vidinstruct_core::keyframe::{Frame, FrameBatch};
use vidinstruct_core::services::{
    DenseCaptioner, EncoderConfig, FrameCaption, FrameCaptioner, FrameEncoder, FrameTagger, LlmRequest, LlmResponse,
    RegionBox, RegionCaption, ServiceError, ServiceResult, Tag, TagSet, TextLlm,
};

use crate::protocol::*;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    /// Scale each delay by a random factor in `[0.5, 1.0)`.
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay_ms: 250,
            jitter: true,
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1`, for `attempt >= 1`.
    pub fn delay(&self, attempt: u32) -> Duration {
        let nominal = self.base_delay_ms.saturating_mul(1u64 << (attempt - 1).min(20));
        let ms = if self.jitter {
            (nominal as f64 * rand::rng().random_range(0.5..1.0)) as u64
        } else {
            nominal
        };
        Duration::from_millis(ms)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteMetrics {
    /// Logical calls.
    pub calls: u64,
    /// HTTP requests sent, including retries.
    pub attempts: u64,
    pub retries: u64,
    pub failures: u64,
}

struct Limiter {
    max: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

impl Limiter {
    fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().expect("limiter poisoned");
        while *active >= self.max {
            active = self.freed.wait(active).expect("limiter poisoned");
        }
        *active += 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Limiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().expect("limiter poisoned") -= 1;
        self.0.freed.notify_one();
    }
}

/// Hex SHA-256 of the route and the exact request body.
pub fn idempotency_key(route: &str, body: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(route.as_bytes());
    h.update([0u8]);
    h.update(body);
    hex::encode(h.finalize())
}

/// One service endpoint. Cheap to clone; clones share the limiter and metrics.
#[derive(Clone)]
pub struct ServiceClient {
    base_url: String,
    http: reqwest::blocking::Client,
    api_key: Option<String>,
    retry: RetryPolicy,
    limiter: Arc<Limiter>,
    metrics: Arc<Mutex<BTreeMap<String, RouteMetrics>>>,
}

impl std::fmt::Debug for ServiceClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServiceClient")
            .field("base_url", &self.base_url)
            .field("retry", &self.retry)
            .field("max_in_flight", &self.limiter.max)
            .finish()
    }
}

impl ServiceClient {
    pub fn new(
        base_url: &str,
        api_key: Option<String>,
        retry: RetryPolicy,
        max_in_flight: usize,
        timeout: Duration,
    ) -> ServiceResult<Self> {
        if retry.max_attempts == 0 {
            return Err(ServiceError::Validation("max_attempts must be at least 1".into()));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ServiceError::Validation(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            http,
            api_key,
            retry,
            limiter: Arc::new(Limiter::new(max_in_flight)),
            metrics: Arc::default(),
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    pub fn metrics(&self) -> BTreeMap<String, RouteMetrics> {
        self.metrics.lock().expect("metrics poisoned").clone()
    }

    pub fn route_metrics(&self, route: &str) -> RouteMetrics {
        self.metrics().get(route).copied().unwrap_or_default()
    }

    fn record(&self, route: &str, f: impl FnOnce(&mut RouteMetrics)) {
        f(self.metrics.lock().expect("metrics poisoned").entry(route.to_string()).or_default());
    }

    fn attempt_once(&self, route: &str, body: &[u8], key: &str) -> ServiceResult<String> {
        let _permit = self.limiter.acquire();
        let mut req = self
            .http
            .post(format!("{}{route}", self.base_url))
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .header(IDEMPOTENCY_HEADER, key)
            .body(body.to_vec());
        if let Some(k) = &self.api_key {
            req = req.bearer_auth(k);
        }
        let resp = req.send().map_err(|e| ServiceError::Network(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| ServiceError::Network(e.to_string()))?;
        if status.is_success() {
            return Ok(text);
        }
        let detail = serde_json::from_str::<ErrorBody>(&text)
            .map(|b| format!("{}: {}", b.code, b.message))
            .unwrap_or_else(|_| text.clone());
        if status.as_u16() == 429 {
            Err(ServiceError::RateLimited(detail))
        } else if status.is_server_error() {
            Err(ServiceError::Network(format!("HTTP {status}: {detail}")))
        } else {
            Err(ServiceError::protocol(format!("HTTP {status}: {detail}"), text))
        }
    }

    /// POSTs `request` to `route`, retrying transport failures and rate
    /// limits, and decodes the reply. Every attempt carries the same
    /// idempotency key.
    pub fn post<Q: Serialize, R: DeserializeOwned>(&self, route: &str, request: &Q) -> ServiceResult<R> {
        let body = serde_json::to_vec(request).map_err(|e| ServiceError::Validation(e.to_string()))?;
        let key = idempotency_key(route, &body);
        self.record(route, |m| m.calls += 1);
        let mut attempt = 0;
        let text = loop {
            attempt += 1;
            self.record(route, |m| {
                m.attempts += 1;
                m.retries += (attempt > 1) as u64;
            });
            match self.attempt_once(route, &body, &key) {
                Ok(text) => break text,
                Err(err) if err.is_retryable() && attempt < self.retry.max_attempts => {
                    let delay = self.retry.delay(attempt);
                    tracing::warn!(route, attempt, error = %err, ?delay, "retrying");
                    std::thread::sleep(delay);
                }
                Err(err) => {
                    self.record(route, |m| m.failures += 1);
                    return Err(if err.is_retryable() {
                        ServiceError::Exhausted {
                            attempts: attempt,
                            last: Box::new(err),
                        }
                    } else {
                        tracing::error!(route, error = %err, "request rejected");
                        err
                    });
                }
            }
        };
        serde_json::from_str(&text).map_err(|e| {
            self.record(route, |m| m.failures += 1);
            tracing::error!(route, error = %e, body = %text, "malformed payload");
            ServiceError::protocol(format!("malformed {route} payload: {e}"), text)
        })
    }
}

/// Record the raw body on invariant failures so the payload can be inspected.
fn with_body<T>(result: ServiceResult<T>, raw: impl FnOnce() -> String) -> ServiceResult<T> {
    result.map_err(|e| match e {
        ServiceError::Protocol { message, body } if body.is_empty() => {
            let body = raw();
            tracing::error!(%message, %body, "payload violates invariants");
            ServiceError::Protocol { message, body }
        }
        other => other,
    })
}

#[derive(Debug, Clone)]
pub struct HttpEncoder(pub ServiceClient);

impl FrameEncoder for HttpEncoder {
    fn encode_frames(&self, cfg: &EncoderConfig, frames: &FrameBatch) -> ServiceResult<FrameEmbeddingTensor<f32>> {
        cfg.validate()?;
        if frames.is_empty() {
            return Err(ServiceError::Validation("frame batch is empty".into()));
        }
        let request = EncodeRequest {
            patch_size: cfg.patch_size,
            input_side: cfg.input_side,
            embed_dim: cfg.embed_dim,
            frames: frames.frames().iter().map(FramePayload::from_frame).collect::<ServiceResult<_>>()?,
        };
        let resp: EncodeResponse = self.0.post(ROUTE_ENCODE, &request)?;
        let describe = || {
            format!(
                "frames={} tokens={} embed_dim={} cls_tokens={}",
                resp.frames, resp.tokens, resp.embed_dim, resp.cls_tokens
            )
        };
        let values = decode_f32(&resp.data_b64).map_err(|e| ServiceError::protocol(e, describe()))?;
        if values.len() != resp.frames * resp.tokens * resp.embed_dim {
            return Err(ServiceError::protocol(
                format!("{} values do not fill the declared shape", values.len()),
                describe(),
            ));
        }
        let want = cfg.token_count();
        if resp.frames != frames.len()
            || resp.embed_dim != cfg.embed_dim
            || resp.tokens < resp.cls_tokens
            || resp.tokens - resp.cls_tokens != want
        {
            return Err(ServiceError::Shape(format!(
                "expected {} frames x {want} patch tokens x {}, got {}",
                frames.len(),
                cfg.embed_dim,
                describe()
            )));
        }
        let d = resp.embed_dim;
        let mut patches = Vec::with_capacity(resp.frames * want * d);
        for frame in values.chunks_exact(resp.tokens * d) {
            patches.extend_from_slice(&frame[resp.cls_tokens * d..]);
        }
        FrameEmbeddingTensor::from_vec(resp.frames, want, d, patches)
            .map_err(|e| ServiceError::protocol(format!("bad embeddings: {e}"), describe()))
    }
}

#[derive(Debug, Clone)]
pub struct HttpCaptioner(pub ServiceClient);

impl FrameCaptioner for HttpCaptioner {
    fn caption_frame(&self, frame: &Frame) -> ServiceResult<FrameCaption> {
        let resp: CaptionResponse = self.0.post(ROUTE_CAPTION, &FrameRequest { frame: FramePayload::from_frame(frame)? })?;
        let caption = FrameCaption {
            text: resp.text.clone(),
            confidence: resp.confidence,
        };
        with_body(caption.validate(), || serde_json::to_string(&resp).unwrap_or_default())?;
        Ok(caption)
    }
}

#[derive(Debug, Clone)]
pub struct HttpDenseCaptioner(pub ServiceClient);

impl DenseCaptioner for HttpDenseCaptioner {
    fn dense_caption_frame(&self, frame: &Frame) -> ServiceResult<Vec<RegionCaption>> {
        let resp: DenseCaptionResponse =
            self.0.post(ROUTE_DENSE_CAPTION, &FrameRequest { frame: FramePayload::from_frame(frame)? })?;
        let regions: Vec<RegionCaption> = resp
            .regions
            .iter()
            .map(|r| RegionCaption {
                text: r.text.clone(),
                confidence: r.confidence,
                region: RegionBox(r.region[0], r.region[1], r.region[2], r.region[3]),
            })
            .collect();
        for r in &regions {
            with_body(r.validate(), || serde_json::to_string(&resp).unwrap_or_default())?;
        }
        Ok(regions)
    }
}

#[derive(Debug, Clone)]
pub struct HttpTagger(pub ServiceClient);

impl FrameTagger for HttpTagger {
    fn tag_frame(&self, frame: &Frame) -> ServiceResult<TagSet> {
        let resp: TagsResponse = self.0.post(ROUTE_TAGS, &FrameRequest { frame: FramePayload::from_frame(frame)? })?;
        let raw = resp
            .tags
            .iter()
            .map(|t| Tag {
                label: t.label.clone(),
                confidence: t.confidence,
            })
            .collect();
        with_body(TagSet::normalized(raw), || serde_json::to_string(&resp).unwrap_or_default())
    }
}

#[derive(Debug, Clone)]
pub struct HttpLlm {
    pub client: ServiceClient,
    pub model: String,
}

impl TextLlm for HttpLlm {
    fn complete_text(&self, req: &LlmRequest) -> ServiceResult<LlmResponse> {
        req.validate()?;
        let resp: CompleteResponse = self.client.post(
            ROUTE_COMPLETE,
            &CompleteRequest {
                prompt: req.prompt.clone(),
                max_tokens: req.max_tokens,
                temperature: req.temperature,
                seed: req.seed,
            },
        )?;
        if !resp.text.is_empty() || resp.finish_reason != vidinstruct_core::services::FinishReason::Complete {
            Ok(LlmResponse {
                text: resp.text,
                finish_reason: resp.finish_reason,
            })
        } else {
            Err(ServiceError::protocol("complete reply without text", serde_json::to_string(&resp).unwrap_or_default()))
        }
    }

    fn model_tag(&self) -> &str {
        &self.model
    }
}

/// Endpoints and client settings for all five services.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub encoder_url: String,
    pub captioner_url: String,
    pub dense_captioner_url: String,
    pub tagger_url: String,
    pub llm_url: String,
    pub llm_model: String,
    pub api_key: Option<String>,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self::single("http://127.0.0.1:8700")
    }
}

impl GatewayConfig {
    /// All services behind one base URL, as the mock server provides.
    pub fn single(base_url: &str) -> Self {
        Self {
            encoder_url: base_url.into(),
            captioner_url: base_url.into(),
            dense_captioner_url: base_url.into(),
            tagger_url: base_url.into(),
            llm_url: base_url.into(),
            llm_model: "gpt-3.5-turbo".into(),
            api_key: None,
            retry: RetryPolicy::default(),
            max_in_flight: 8,
            timeout_secs: 60,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Gateway {
    pub encoder: HttpEncoder,
    pub captioner: HttpCaptioner,
    pub dense_captioner: HttpDenseCaptioner,
    pub tagger: HttpTagger,
    pub llm: HttpLlm,
}

impl Gateway {
    pub fn new(cfg: &GatewayConfig) -> ServiceResult<Self> {
        let make = |url: &str| {
            ServiceClient::new(
                url,
                cfg.api_key.clone(),
                cfg.retry,
                cfg.max_in_flight,
                Duration::from_secs(cfg.timeout_secs.max(1)),
            )
        };
        Ok(Self {
            encoder: HttpEncoder(make(&cfg.encoder_url)?),
            captioner: HttpCaptioner(make(&cfg.captioner_url)?),
            dense_captioner: HttpDenseCaptioner(make(&cfg.dense_captioner_url)?),
            tagger: HttpTagger(make(&cfg.tagger_url)?),
            llm: HttpLlm {
                client: make(&cfg.llm_url)?,
                model: cfg.llm_model.clone(),
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delays_grow_and_stay_jittered() {
        let fixed = RetryPolicy { jitter: false, ..RetryPolicy::default() };
        let d: Vec<u64> = (1..5).map(|a| fixed.delay(a).as_millis() as u64).collect();
        assert_eq!(d, vec![250, 500, 1000, 2000]);
        let jittered = RetryPolicy::default();
        for a in 1..5 {
            let ms = jittered.delay(a).as_millis() as u64;
            assert!(ms >= d[a as usize - 1] / 2 && ms < d[a as usize - 1]);
        }
    }

    #[test]
    fn idempotency_key_depends_on_route_and_body() {
        let a = idempotency_key("/tags", b"{}");
        assert_eq!(a.len(), 64);
        assert_eq!(a, idempotency_key("/tags", b"{}"));
        assert_ne!(a, idempotency_key("/caption", b"{}"));
        assert_ne!(a, idempotency_key("/tags", b"{ }"));
    }

    #[test]
    fn limiter_bounds_concurrency() {
        let limiter = Arc::new(Limiter::new(2));
        let peak = Arc::new(Mutex::new((0usize, 0usize)));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (limiter, peak) = (limiter.clone(), peak.clone());
                std::thread::spawn(move || {
                    let _p = limiter.acquire();
                    {
                        let mut g = peak.lock().unwrap();
                        g.0 += 1;
                        g.1 = g.1.max(g.0);
                    }
                    std::thread::sleep(Duration::from_millis(5));
                    peak.lock().unwrap().0 -= 1;
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(peak.lock().unwrap().1, 2);
    }
}
