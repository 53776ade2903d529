use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::error::{AdapterError, Result};
use super::features::VideoFeatures;
use super::tensor::ensure_finite;
use crate::scalar::Scalar;

/// Affine map from the visual embedding width into the decoder embedding width.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProjection<S> {
    weights: Array2<S>,
    bias: Array1<S>,
    seed: Option<u64>,
}

impl<S: Scalar> LinearProjection<S> {
    pub fn new(weights: Array2<S>, bias: Array1<S>) -> Result<Self> {
        if weights.ncols() == 0 || weights.nrows() == 0 {
            return Err(AdapterError::Shape("projection weights must be non-empty".into()));
        }
        if bias.len() != weights.ncols() {
            return Err(AdapterError::Shape(format!(
                "bias has length {} but weights have {} output columns",
                bias.len(),
                weights.ncols()
            )));
        }
        ensure_finite(&weights)?;
        if let Some(pos) = bias.iter().position(|v| !v.is_finite()) {
            return Err(AdapterError::NonFinite(pos));
        }
        Ok(Self {
            weights: weights.as_standard_layout().into_owned(),
            bias,
            seed: None,
        })
    }

    /// Uniform init in `±1/sqrt(input_dim)` with zero bias, reproducible from `seed`.
    pub fn init(input_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(AdapterError::EmptyDimension("projection"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (input_dim as f64).sqrt();
        let weights = Array2::from_shape_simple_fn((input_dim, output_dim), || {
            S::narrow(rng.random_range(-bound..bound))
        });
        let mut p = Self::new(weights, Array1::from_elem(output_dim, S::zero()))?;
        p.seed = Some(seed);
        Ok(p)
    }

    pub fn identity(dim: usize) -> Result<Self> {
        Self::new(Array2::eye(dim), Array1::zeros(dim))
    }

    pub fn weights(&self) -> &Array2<S> {
        &self.weights
    }

    pub fn bias(&self) -> &Array1<S> {
        &self.bias
    }

    pub fn input_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub(crate) fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Array2<S>, &mut Array1<S>) {
        (&mut self.weights, &mut self.bias)
    }

    pub fn to_checkpoint(&self) -> ProjectionCheckpoint {
        ProjectionCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            dtype: match S::DTYPE {
                crate::scalar::DType::F32 => "f32".into(),
                crate::scalar::DType::F64 => "f64".into(),
            },
            input_dim: self.input_dim(),
            output_dim: self.output_dim(),
            seed: self.seed,
            weights: self.weights.iter().map(|v| v.widen()).collect(),
            bias: self.bias.iter().map(|v| v.widen()).collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &ProjectionCheckpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(AdapterError::Fixture(format!("unknown checkpoint format `{}`", ckpt.format)));
        }
        let weights = Array2::from_shape_vec(
            (ckpt.input_dim, ckpt.output_dim),
            ckpt.weights.iter().map(|&v| S::narrow(v)).collect(),
        )
        .map_err(|e| AdapterError::Fixture(e.to_string()))?;
        let bias = Array1::from_iter(ckpt.bias.iter().map(|&v| S::narrow(v)));
        Ok(Self::new(weights, bias)?.with_seed(ckpt.seed))
    }
}

pub const CHECKPOINT_FORMAT: &str = "vidinstruct.projection/v1";

/// Serialized projection: row-major weights, bias, dims and init seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionCheckpoint {
    pub format: String,
    pub dtype: String,
    pub input_dim: usize,
    pub output_dim: usize,
    pub seed: Option<u64>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Applies the projection to every row of the combined features.
pub fn project<S: Scalar>(v: &VideoFeatures<S>, p: &LinearProjection<S>) -> Result<Array2<S>> {
    affine_rows(v.combined(), p)
}

pub(crate) fn affine_rows<S: Scalar>(rows: &Array2<S>, p: &LinearProjection<S>) -> Result<Array2<S>> {
    if rows.ncols() != p.input_dim() {
        return Err(AdapterError::Shape(format!(
            "features have width {} but projection expects {}",
            rows.ncols(),
            p.input_dim()
        )));
    }
    let out = affine_rows_f64(rows, p);
    Ok(out.mapv(S::narrow))
}

/// Row-wise `rows · W + b` accumulated in f64.
pub(crate) fn affine_rows_f64<S: Scalar>(rows: &Array2<S>, p: &LinearProjection<S>) -> Array2<f64> {
    let k = p.output_dim();
    let weights: Vec<f64> = p.weights.iter().map(|v| v.widen()).collect();
    let bias: Vec<f64> = p.bias.iter().map(|v| v.widen()).collect();
    let m = rows.nrows();
    let mut out = vec![0.0f64; m * k];
    out.par_chunks_mut(k).enumerate().for_each(|(r, acc)| {
        acc.copy_from_slice(&bias);
        for (d, &a) in rows.row(r).iter().enumerate() {
            let a = a.widen();
            let w = &weights[d * k..(d + 1) * k];
            for (o, &wv) in acc.iter_mut().zip(w) {
                *o += a * wv;
            }
        }
    });
    Array2::from_shape_vec((m, k), out).expect("buffer sized to m*k")
}
