//! Spatiotemporal video feature adapter.
//!
//! Frame embeddings `T × N × D` are mean-pooled over frames (one vector per
//! token) and over tokens (one vector per frame). The two pooled matrices are
//! stacked, temporal rows first, into `(N + T) × D` features that a linear
//! layer maps into the decoder's `K`-wide embedding space.

mod check;
mod error;
pub mod fixture;
mod features;
mod gradient;
mod pooling;
mod projection;
mod prompt;
mod tensor;
mod train;

pub use check::{gradient_check, GradientCheck};
pub use error::{AdapterError, Result};
pub use features::{concat_features, VideoFeatures};
pub use gradient::{adapter_backward, adapter_forward, video_features, AdapterGradients};
pub use pooling::{spatial_pool, temporal_pool};
pub use projection::{project, LinearProjection, ProjectionCheckpoint, CHECKPOINT_FORMAT};
pub use prompt::{build_prompt, PromptLayout};
pub use tensor::FrameEmbeddingTensor;
pub use train::{
    mse_loss, mse_upstream, train_adapter, train_adapter_from, TrainConfig, TrainingRun, TrainingSample,
};

/// Default adapter geometry: 224px frames with 14px patches give a 16×16
/// token grid; 1024-wide visual embeddings; 4096-wide decoder embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AdapterDims {
    pub frames: usize,
    pub tokens: usize,
    pub embed_dim: usize,
    pub output_dim: usize,
}

impl Default for AdapterDims {
    fn default() -> Self {
        Self {
            frames: 100,
            tokens: 256,
            embed_dim: 1024,
            output_dim: 4096,
        }
    }
}

impl AdapterDims {
    pub fn video_token_count(&self) -> usize {
        self.frames + self.tokens
    }
}
