//! Mini-batch gradient descent on the projection with frozen embeddings.
//!
//! Only the projection's weights and bias move. The objective is the mean
//! squared error between the adapter output and a target token-embedding
//! matrix; per-sample losses are averaged over the batch.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::error::{AdapterError, Result};
use super::features::VideoFeatures;
use super::gradient::{check_upstream, forward_f64, projection_backward, video_features};
use super::projection::LinearProjection;
use super::tensor::FrameEmbeddingTensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-5,
            batch_size: 32,
            epochs: 3,
            seed: 0,
        }
    }
}

/// A training example: frozen frame embeddings and the desired adapter output.
#[derive(Debug, Clone)]
pub struct TrainingSample<S> {
    pub embeddings: FrameEmbeddingTensor<S>,
    pub target: Array2<S>,
}

#[derive(Debug, Clone)]
pub struct TrainingRun<S> {
    pub projection: LinearProjection<S>,
    /// Dataset loss before each epoch, followed by the final loss.
    pub losses: Vec<f64>,
}

impl<S> TrainingRun<S> {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("losses is never empty")
    }
}

/// Trains from a seeded initialization (`LinearProjection::init` with `config.seed`).
pub fn train_adapter<S: Scalar>(
    samples: &[TrainingSample<S>],
    output_dim: usize,
    config: &TrainConfig,
) -> Result<TrainingRun<S>> {
    let first = samples
        .first()
        .ok_or_else(|| AdapterError::Config("training set is empty".into()))?;
    let init = LinearProjection::init(first.embeddings.embed_dim(), output_dim, config.seed)?;
    train_adapter_from(init, samples, config)
}

pub fn train_adapter_from<S: Scalar>(
    init: LinearProjection<S>,
    samples: &[TrainingSample<S>],
    config: &TrainConfig,
) -> Result<TrainingRun<S>> {
    if samples.is_empty() {
        return Err(AdapterError::Config("training set is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(AdapterError::Config("batch_size must be at least 1".into()));
    }
    if !config.learning_rate.is_finite() || config.learning_rate < 0.0 {
        return Err(AdapterError::Config(format!(
            "learning rate {} must be finite and non-negative",
            config.learning_rate
        )));
    }

    // The encoder side is frozen, so pooled features are computed once.
    let features: Vec<VideoFeatures<S>> = samples
        .iter()
        .map(|s| {
            let v = video_features(&s.embeddings)?;
            check_upstream(&v, &init, &s.target)?;
            Ok(v)
        })
        .collect::<Result<_>>()?;

    let mut projection = init;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs + 1);

    for _ in 0..config.epochs {
        losses.push(dataset_loss(&features, samples, &projection));
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let (gw, gb) = batch_gradient(&features, samples, &projection, batch);
            apply_step(&mut projection, &gw, &gb, config.learning_rate);
        }
    }
    losses.push(dataset_loss(&features, samples, &projection));

    Ok(TrainingRun { projection, losses })
}

/// Mean squared error over every output cell.
pub fn mse_loss<S: Scalar>(
    x: &FrameEmbeddingTensor<S>,
    p: &LinearProjection<S>,
    target: &Array2<S>,
) -> Result<f64> {
    let v = video_features(x)?;
    check_upstream(&v, p, target)?;
    Ok(sample_loss(&v, p, target))
}

/// Upstream gradient of the per-sample MSE: `2(out − target)/(rows·cols)`,
/// rounded to storage precision.
pub fn mse_upstream<S: Scalar>(output: &Array2<S>, target: &Array2<S>) -> Array2<S> {
    let scale = 2.0 / output.len() as f64;
    ndarray::Zip::from(output)
        .and(target)
        .map_collect(|&o, &t| S::narrow((o.widen() - t.widen()) * scale))
}

fn sample_loss<S: Scalar>(v: &VideoFeatures<S>, p: &LinearProjection<S>, target: &Array2<S>) -> f64 {
    let out = forward_f64(v, p);
    let sq: f64 = out
        .iter()
        .zip(target.iter())
        .map(|(o, t)| {
            let e = o - t.widen();
            e * e
        })
        .sum();
    sq / out.len() as f64
}

fn dataset_loss<S: Scalar>(features: &[VideoFeatures<S>], samples: &[TrainingSample<S>], p: &LinearProjection<S>) -> f64 {
    let total: f64 = features
        .iter()
        .zip(samples)
        .map(|(v, s)| sample_loss(v, p, &s.target))
        .sum();
    total / samples.len() as f64
}

fn batch_gradient<S: Scalar>(
    features: &[VideoFeatures<S>],
    samples: &[TrainingSample<S>],
    p: &LinearProjection<S>,
    batch: &[usize],
) -> (Array2<f64>, Array1<f64>) {
    let inv_b = 1.0 / batch.len() as f64;
    let mut gw = Array2::<f64>::zeros(p.weights().dim());
    let mut gb = Array1::<f64>::zeros(p.output_dim());
    for &i in batch {
        let out = forward_f64(&features[i], p).mapv(S::narrow);
        let upstream = mse_upstream(&out, &samples[i].target);
        let g = projection_backward(&features[i], &upstream);
        gw.zip_mut_with(&g.grad_weights, |acc, &v| *acc += v.widen() * inv_b);
        gb.zip_mut_with(&g.grad_bias, |acc, &v| *acc += v.widen() * inv_b);
    }
    (gw, gb)
}

fn apply_step<S: Scalar>(p: &mut LinearProjection<S>, gw: &Array2<f64>, gb: &Array1<f64>, lr: f64) {
    let (w, b) = p.parts_mut();
    w.zip_mut_with(gw, |v, &g| *v = S::narrow(v.widen() - lr * g));
    b.zip_mut_with(gb, |v, &g| *v = S::narrow(v.widen() - lr * g));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::gradient::{adapter_backward, adapter_forward};

    fn toy(seed: u64, count: usize) -> Vec<TrainingSample<f64>> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = LinearProjection::<f64>::init(3, 2, seed + 100).unwrap();
        (0..count)
            .map(|_| {
                let x = FrameEmbeddingTensor::from_fn(2, 3, 3, |_, _, _| rng.random_range(-2.0..2.0)).unwrap();
                let target = adapter_forward(&x, &hidden).unwrap();
                TrainingSample { embeddings: x, target }
            })
            .collect()
    }

    #[test]
    fn empty_set_is_a_config_error() {
        let err = train_adapter::<f64>(&[], 2, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, AdapterError::Config(_)));
    }

    #[test]
    fn mismatched_target_is_a_shape_error() {
        let mut samples = toy(1, 2);
        samples[1].target = Array2::zeros((4, 2));
        let err = train_adapter(&samples, 2, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, AdapterError::Shape(_)));
    }

    #[test]
    fn zero_learning_rate_keeps_init() {
        let samples = toy(2, 4);
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 5, batch_size: 2, seed: 7 };
        let run = train_adapter(&samples, 2, &cfg).unwrap();
        assert_eq!(run.projection, LinearProjection::init(3, 2, 7).unwrap());
    }

    #[test]
    fn single_step_matches_backward() {
        let samples = toy(3, 1);
        let cfg = TrainConfig { learning_rate: 0.05, epochs: 1, batch_size: 1, seed: 11 };
        let init = LinearProjection::<f64>::init(3, 2, 11).unwrap();
        let run = train_adapter_from(init.clone(), &samples, &cfg).unwrap();

        let out = adapter_forward(&samples[0].embeddings, &init).unwrap();
        let g = adapter_backward(&samples[0].embeddings, &init, &mse_upstream(&out, &samples[0].target)).unwrap();
        let expected_w = &init.weights().mapv(|v| v) - &(g.grad_weights.mapv(|v| v * cfg.learning_rate));
        let expected_b = init.bias() - &(g.grad_bias.mapv(|v| v * cfg.learning_rate));
        for (a, b) in run.projection.weights().iter().zip(expected_w.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in run.projection.bias().iter().zip(expected_b.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let samples = toy(4, 6);
        let cfg = TrainConfig { learning_rate: 0.01, epochs: 4, batch_size: 4, seed: 3 };
        let a = train_adapter(&samples, 2, &cfg).unwrap();
        let b = train_adapter(&samples, 2, &cfg).unwrap();
        assert_eq!(a.projection, b.projection);
        assert_eq!(a.losses, b.losses);
    }
}
