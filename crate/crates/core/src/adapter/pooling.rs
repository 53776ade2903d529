//! Average pooling of frame embeddings along the frame and token axes.

use ndarray::{Array2, Axis};

use super::tensor::FrameEmbeddingTensor;
use crate::scalar::{exact_sum, Scalar};

/// Mean over frames: one `embed_dim` vector per token, shape `tokens × embed_dim`.
///
/// Sums are correctly rounded, so the result is bit-identical under any
/// reordering of the frames.
pub fn temporal_pool<S: Scalar>(x: &FrameEmbeddingTensor<S>) -> Array2<S> {
    let view = x.view();
    let frames = x.frame_count() as f64;
    Array2::from_shape_fn((x.token_count(), x.embed_dim()), |(n, d)| {
        let column = view.index_axis(Axis(1), n);
        S::narrow(exact_sum(column.column(d).iter().map(|v| v.widen())) / frames)
    })
}

/// Mean over tokens: one `embed_dim` vector per frame, shape `frames × embed_dim`.
pub fn spatial_pool<S: Scalar>(x: &FrameEmbeddingTensor<S>) -> Array2<S> {
    let view = x.view();
    let tokens = x.token_count() as f64;
    Array2::from_shape_fn((x.frame_count(), x.embed_dim()), |(t, d)| {
        let frame = view.index_axis(Axis(0), t);
        S::narrow(exact_sum(frame.column(d).iter().map(|v| v.widen())) / tokens)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_by_two() -> FrameEmbeddingTensor<f64> {
        // frame 0 tokens [1, 3], frame 1 tokens [3, 5]
        FrameEmbeddingTensor::from_vec(2, 2, 1, vec![1.0, 3.0, 3.0, 5.0]).unwrap()
    }

    #[test]
    fn constant_input_pools_to_constant() {
        let x = FrameEmbeddingTensor::from_fn(4, 3, 5, |_, _, _| 0.7f32).unwrap();
        assert!(temporal_pool(&x).iter().all(|&v| v == 0.7));
        assert!(spatial_pool(&x).iter().all(|&v| v == 0.7));
    }

    #[test]
    fn small_hand_case() {
        let x = two_by_two();
        // temporal: token 0 -> mean(1,3), token 1 -> mean(3,5)
        assert_eq!(temporal_pool(&x).into_raw_vec_and_offset().0, vec![2.0, 4.0]);
        // spatial: frame 0 -> mean(1,3), frame 1 -> mean(3,5)
        assert_eq!(spatial_pool(&x).into_raw_vec_and_offset().0, vec![2.0, 4.0]);
    }

    #[test]
    fn paper_scale_shapes() {
        let x = FrameEmbeddingTensor::from_fn(8, 256, 1024, |t, n, d| ((t + n + d) % 7) as f32).unwrap();
        assert_eq!(temporal_pool(&x).dim(), (256, 1024));
        assert_eq!(spatial_pool(&x).dim(), (8, 1024));
    }
}
