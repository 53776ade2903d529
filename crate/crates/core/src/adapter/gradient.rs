//! Forward composition and its analytic reverse pass.

use ndarray::{Array1, Array2, Array3};

use super::error::{AdapterError, Result};
use super::features::{concat_features, VideoFeatures};
use super::pooling::{spatial_pool, temporal_pool};
use super::projection::{affine_rows_f64, project, LinearProjection};
use super::tensor::FrameEmbeddingTensor;
use crate::scalar::Scalar;

/// Pools, concatenates and projects: output has `tokens + frames` rows.
pub fn adapter_forward<S: Scalar>(x: &FrameEmbeddingTensor<S>, p: &LinearProjection<S>) -> Result<Array2<S>> {
    let v = video_features(x)?;
    project(&v, p)
}

pub fn video_features<S: Scalar>(x: &FrameEmbeddingTensor<S>) -> Result<VideoFeatures<S>> {
    concat_features(temporal_pool(x), spatial_pool(x))
}

/// Gradients of `sum(upstream ⊙ adapter_forward(x, p))`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGradients<S> {
    pub grad_weights: Array2<S>,
    pub grad_bias: Array1<S>,
    pub grad_x: Array3<S>,
}

/// Gradients with respect to the projection only.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionGradients<S> {
    pub grad_weights: Array2<S>,
    pub grad_bias: Array1<S>,
}

pub fn adapter_backward<S: Scalar>(
    x: &FrameEmbeddingTensor<S>,
    p: &LinearProjection<S>,
    upstream: &Array2<S>,
) -> Result<AdapterGradients<S>> {
    let v = video_features(x)?;
    check_upstream(&v, p, upstream)?;
    let ProjectionGradients {
        grad_weights,
        grad_bias,
    } = projection_backward(&v, upstream);

    // dL/dv = upstream · Wᵀ
    let (frames, tokens, dim) = (x.frame_count(), x.token_count(), x.embed_dim());
    let k = p.output_dim();
    let w: Vec<f64> = p.weights().iter().map(|v| v.widen()).collect();
    let mut grad_v = vec![0.0f64; (tokens + frames) * dim];
    for (r, row) in grad_v.chunks_mut(dim).enumerate() {
        let u: Vec<f64> = upstream.row(r).iter().map(|v| v.widen()).collect();
        for (d, g) in row.iter_mut().enumerate() {
            *g = w[d * k..(d + 1) * k].iter().zip(&u).map(|(a, b)| a * b).sum();
        }
    }

    // temporal row n spreads 1/T to every frame's token n,
    // spatial row t spreads 1/N to every token of frame t.
    let inv_t = 1.0 / frames as f64;
    let inv_n = 1.0 / tokens as f64;
    let grad_x = Array3::from_shape_fn((frames, tokens, dim), |(t, n, d)| {
        S::narrow(grad_v[n * dim + d] * inv_t + grad_v[(tokens + t) * dim + d] * inv_n)
    });

    Ok(AdapterGradients {
        grad_weights,
        grad_bias,
        grad_x,
    })
}

pub(crate) fn check_upstream<S: Scalar>(
    v: &VideoFeatures<S>,
    p: &LinearProjection<S>,
    upstream: &Array2<S>,
) -> Result<()> {
    if v.embed_dim() != p.input_dim() {
        return Err(AdapterError::Shape(format!(
            "features have width {} but projection expects {}",
            v.embed_dim(),
            p.input_dim()
        )));
    }
    if upstream.dim() != (v.row_count(), p.output_dim()) {
        return Err(AdapterError::Shape(format!(
            "upstream gradient is {:?}, expected {:?}",
            upstream.dim(),
            (v.row_count(), p.output_dim())
        )));
    }
    Ok(())
}

/// `Vᵀ·U` and the column sums of `U`.
pub(crate) fn projection_backward<S: Scalar>(v: &VideoFeatures<S>, upstream: &Array2<S>) -> ProjectionGradients<S> {
    let rows = v.combined();
    let (m, dim) = rows.dim();
    let k = upstream.ncols();
    let mut gw = vec![0.0f64; dim * k];
    let mut gb = vec![0.0f64; k];
    for r in 0..m {
        let u: Vec<f64> = upstream.row(r).iter().map(|v| v.widen()).collect();
        for (b, &uk) in gb.iter_mut().zip(&u) {
            *b += uk;
        }
        for (d, &a) in rows.row(r).iter().enumerate() {
            let a = a.widen();
            for (g, &uk) in gw[d * k..(d + 1) * k].iter_mut().zip(&u) {
                *g += a * uk;
            }
        }
    }
    ProjectionGradients {
        grad_weights: Array2::from_shape_vec((dim, k), gw.into_iter().map(S::narrow).collect())
            .expect("sized dim*k"),
        grad_bias: Array1::from_iter(gb.into_iter().map(S::narrow)),
    }
}

/// Forward pass in f64 without rounding to storage precision.
pub(crate) fn forward_f64<S: Scalar>(v: &VideoFeatures<S>, p: &LinearProjection<S>) -> Array2<f64> {
    affine_rows_f64(v.combined(), p)
}
