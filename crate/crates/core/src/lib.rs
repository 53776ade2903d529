//! Video instruction data factory: feature adapter math, keyframe selection,
//! caption enrichment, instruction-pair generation and LLM-judged evaluation.

pub mod adapter;
pub mod enrichment;
pub mod eval;
pub mod instruction;
pub mod keyframe;
pub mod scalar;
pub mod services;

pub use scalar::{DType, Scalar};

pub type FrameEmbeddings = adapter::FrameEmbeddingTensor<f32>;
pub type FrameEmbeddingsF64 = adapter::FrameEmbeddingTensor<f64>;
pub type VideoFeatures = adapter::VideoFeatures<f32>;
pub type VideoFeaturesF64 = adapter::VideoFeatures<f64>;
pub type Projection = adapter::LinearProjection<f32>;
pub type ProjectionF64 = adapter::LinearProjection<f64>;
pub type Gradients = adapter::AdapterGradients<f32>;
pub type GradientsF64 = adapter::AdapterGradients<f64>;
