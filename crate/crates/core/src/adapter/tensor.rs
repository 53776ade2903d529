use ndarray::{Array2, Array3, ArrayView3};

use super::error::{AdapterError, Result};
use crate::scalar::Scalar;

/// Per-frame patch-token embeddings, shape `frames × tokens × embed_dim`.
///
/// `tokens` is the patch grid size `h × w`; class tokens are never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEmbeddingTensor<S> {
    data: Array3<S>,
}

impl<S: Scalar> FrameEmbeddingTensor<S> {
    pub fn new(data: Array3<S>) -> Result<Self> {
        let (t, n, d) = data.dim();
        check_dims(t, n, d)?;
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(AdapterError::NonFinite(pos));
        }
        Ok(Self { data })
    }

    pub fn from_vec(frames: usize, tokens: usize, embed_dim: usize, values: Vec<S>) -> Result<Self> {
        check_dims(frames, tokens, embed_dim)?;
        let data = Array3::from_shape_vec((frames, tokens, embed_dim), values).map_err(|e| {
            AdapterError::Shape(format!(
                "cannot view buffer as {frames}x{tokens}x{embed_dim}: {e}"
            ))
        })?;
        Self::new(data)
    }

    /// Builds a tensor by evaluating `f(frame, token, dim)` for every cell.
    pub fn from_fn<F>(frames: usize, tokens: usize, embed_dim: usize, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, usize, usize) -> S,
    {
        check_dims(frames, tokens, embed_dim)?;
        Self::new(Array3::from_shape_fn((frames, tokens, embed_dim), |(t, n, d)| f(t, n, d)))
    }

    pub fn frame_count(&self) -> usize {
        self.data.dim().0
    }

    pub fn token_count(&self) -> usize {
        self.data.dim().1
    }

    pub fn embed_dim(&self) -> usize {
        self.data.dim().2
    }

    pub fn view(&self) -> ArrayView3<'_, S> {
        self.data.view()
    }

    pub fn into_inner(self) -> Array3<S> {
        self.data
    }

    /// Reorders frames so that frame `i` of the result is frame `order[i]` of `self`.
    pub fn permute_frames(&self, order: &[usize]) -> Result<Self> {
        check_permutation(order, self.frame_count(), "frame")?;
        let (t, n, d) = self.data.dim();
        Self::new(Array3::from_shape_fn((t, n, d), |(i, j, k)| {
            self.data[[order[i], j, k]]
        }))
    }

    /// Reorders tokens identically in every frame.
    pub fn permute_tokens(&self, order: &[usize]) -> Result<Self> {
        check_permutation(order, self.token_count(), "token")?;
        let (t, n, d) = self.data.dim();
        Self::new(Array3::from_shape_fn((t, n, d), |(i, j, k)| {
            self.data[[i, order[j], k]]
        }))
    }
}

fn check_dims(t: usize, n: usize, d: usize) -> Result<()> {
    if t == 0 {
        return Err(AdapterError::EmptyDimension("frames"));
    }
    if n == 0 {
        return Err(AdapterError::EmptyDimension("tokens"));
    }
    if d == 0 {
        return Err(AdapterError::EmptyDimension("embed_dim"));
    }
    Ok(())
}

fn check_permutation(order: &[usize], len: usize, what: &str) -> Result<()> {
    let mut seen = vec![false; len];
    if order.len() != len {
        return Err(AdapterError::Shape(format!(
            "{what} permutation has length {}, expected {len}",
            order.len()
        )));
    }
    for &i in order {
        if i >= len || std::mem::replace(&mut seen[i], true) {
            return Err(AdapterError::Shape(format!("invalid {what} permutation")));
        }
    }
    Ok(())
}

/// Rejects matrices containing NaN or infinities.
pub(crate) fn ensure_finite<S: Scalar>(m: &Array2<S>) -> Result<()> {
    match m.iter().position(|v| !v.is_finite()) {
        Some(pos) => Err(AdapterError::NonFinite(pos)),
        None => Ok(()),
    }
}
