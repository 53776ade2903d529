//! Wire types shared by the clients and the mock servers.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use vidinstruct_core::keyframe::Frame;
use vidinstruct_core::services::{FinishReason, ServiceError, ServiceResult};

pub const ROUTE_ENCODE: &str = "/encode";
pub const ROUTE_CAPTION: &str = "/caption";
pub const ROUTE_DENSE_CAPTION: &str = "/dense_caption";
pub const ROUTE_TAGS: &str = "/tags";
pub const ROUTE_COMPLETE: &str = "/complete";

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";

/// One frame as sent to a service: PNG bytes, base64-encoded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramePayload {
    pub frame_id: String,
    pub width: u32,
    pub height: u32,
    pub image_png_b64: String,
}

impl FramePayload {
    pub fn from_frame(frame: &Frame) -> ServiceResult<Self> {
        let png = frame
            .to_png()
            .map_err(|e| ServiceError::Validation(format!("frame {} cannot be encoded: {e}", frame.id)))?;
        Ok(Self {
            frame_id: frame.id.clone(),
            width: frame.width,
            height: frame.height,
            image_png_b64: STANDARD.encode(png),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeRequest {
    pub patch_size: u32,
    pub input_side: u32,
    pub embed_dim: usize,
    pub frames: Vec<FramePayload>,
}

/// Row-major `frames × tokens × embed_dim` little-endian f32 values. The
/// first `cls_tokens` tokens of every frame are class tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeResponse {
    pub frames: usize,
    pub tokens: usize,
    pub embed_dim: usize,
    #[serde(default)]
    pub cls_tokens: usize,
    pub data_b64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRequest {
    pub frame: FramePayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionResponse {
    pub text: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRegion {
    pub text: String,
    pub confidence: f64,
    #[serde(rename = "box")]
    pub region: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseCaptionResponse {
    pub regions: Vec<WireRegion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireTag {
    pub label: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagsResponse {
    pub tags: Vec<WireTag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompleteRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompleteResponse {
    pub text: String,
    pub finish_reason: FinishReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

pub fn encode_f32(values: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub fn decode_f32(b64: &str) -> Result<Vec<f32>, String> {
    let bytes = STANDARD.decode(b64).map_err(|e| format!("bad base64: {e}"))?;
    if bytes.len() % 4 != 0 {
        return Err(format!("{} bytes is not a whole number of f32 values", bytes.len()));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}
