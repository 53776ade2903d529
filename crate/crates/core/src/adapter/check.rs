use ndarray::{Array1, Array2, Array3};

use super::error::Result;
use super::gradient::{adapter_backward, adapter_forward};
use super::projection::LinearProjection;
use super::tensor::FrameEmbeddingTensor;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    pub max_rel_error: f64,
    pub entries: usize,
}

impl GradientCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Checks every gradient entry of `L = Σ upstream ⊙ adapter_forward(x, p)`
/// (weights, bias and inputs) with central differences of width `2·step`.
///
/// Costs two forward passes per parameter, so keep the instance small.
pub fn gradient_check(
    x: &FrameEmbeddingTensor<f64>,
    p: &LinearProjection<f64>,
    upstream: &Array2<f64>,
    step: f64,
) -> Result<GradientCheck> {
    let grads = adapter_backward(x, p, upstream)?;
    let loss = |x: &FrameEmbeddingTensor<f64>, p: &LinearProjection<f64>| -> Result<f64> {
        Ok((adapter_forward(x, p)? * upstream).sum())
    };
    let mut worst = 0.0f64;
    let mut entries = 0;

    let weights = p.weights().clone();
    for ((i, j), &a) in grads.grad_weights.indexed_iter() {
        let nudged = |delta: f64| -> Result<f64> {
            let mut w: Array2<f64> = weights.clone();
            w[[i, j]] += delta;
            loss(x, &LinearProjection::new(w, p.bias().clone())?)
        };
        let numeric = (nudged(step)? - nudged(-step)?) / (2.0 * step);
        worst = worst.max(rel_error(a, numeric));
        entries += 1;
    }

    let bias = p.bias().clone();
    for (k, &a) in grads.grad_bias.indexed_iter() {
        let nudged = |delta: f64| -> Result<f64> {
            let mut b: Array1<f64> = bias.clone();
            b[k] += delta;
            loss(x, &LinearProjection::new(weights.clone(), b)?)
        };
        let numeric = (nudged(step)? - nudged(-step)?) / (2.0 * step);
        worst = worst.max(rel_error(a, numeric));
        entries += 1;
    }

    let data = x.view().to_owned();
    for ((t, n, d), &a) in grads.grad_x.indexed_iter() {
        let nudged = |delta: f64| -> Result<f64> {
            let mut v: Array3<f64> = data.clone();
            v[[t, n, d]] += delta;
            loss(&FrameEmbeddingTensor::new(v)?, p)
        };
        let numeric = (nudged(step)? - nudged(-step)?) / (2.0 * step);
        worst = worst.max(rel_error(a, numeric));
        entries += 1;
    }

    Ok(GradientCheck {
        max_rel_error: worst,
        entries,
    })
}
