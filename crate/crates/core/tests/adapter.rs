use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidinstruct_core::adapter::{
    adapter_backward, adapter_forward, build_prompt, spatial_pool, temporal_pool, train_adapter, train_adapter_from,
    FrameEmbeddingTensor, LinearProjection, PromptLayout, TrainConfig, TrainingSample,
};

fn random_tensor(rng: &mut ChaCha8Rng, t: usize, n: usize, d: usize, scale: f64) -> FrameEmbeddingTensor<f64> {
    FrameEmbeddingTensor::from_fn(t, n, d, |_, _, _| rng.random_range(-scale..scale)).unwrap()
}

fn random_projection(rng: &mut ChaCha8Rng, d: usize, k: usize) -> LinearProjection<f64> {
    let w = Array2::from_shape_simple_fn((d, k), || rng.random_range(-1.0..1.0));
    let b = Array1::from_shape_simple_fn(k, || rng.random_range(-1.0..1.0));
    LinearProjection::new(w, b).unwrap()
}

/// Straight loops over the definition, no shared code with the crate.
fn naive_forward(x: &FrameEmbeddingTensor<f64>, p: &LinearProjection<f64>) -> Array2<f64> {
    let v = x.view();
    let (t, n, d) = v.dim();
    let k = p.output_dim();
    let mut rows = Vec::new();
    for tok in 0..n {
        rows.push((0..d).map(|j| (0..t).map(|f| v[[f, tok, j]]).sum::<f64>() / t as f64).collect::<Vec<_>>());
    }
    for f in 0..t {
        rows.push((0..d).map(|j| (0..n).map(|tok| v[[f, tok, j]]).sum::<f64>() / n as f64).collect::<Vec<_>>());
    }
    Array2::from_shape_fn((n + t, k), |(r, c)| {
        (0..d).map(|j| rows[r][j] * p.weights()[[j, c]]).sum::<f64>() + p.bias()[c]
    })
}

#[test]
fn forward_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..25 {
        let (t, n, d, k) = (rng.random_range(1..6), rng.random_range(1..9), rng.random_range(1..7), rng.random_range(1..5));
        let x = random_tensor(&mut rng, t, n, d, 2.0);
        let p = random_projection(&mut rng, d, k);
        let got = adapter_forward(&x, &p).unwrap();
        let want = naive_forward(&x, &p);
        assert_eq!(got.dim(), (n + t, k));
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}

#[test]
fn reference_configuration_shape() {
    let x = FrameEmbeddingTensor::<f32>::from_fn(8, 256, 1024, |t, n, d| ((t * 31 + n * 7 + d) % 17) as f32 * 0.01).unwrap();
    let p = LinearProjection::<f32>::init(1024, 4096, 3).unwrap();
    let q = adapter_forward(&x, &p).unwrap();
    assert_eq!(q.dim(), (264, 4096));
    assert!(q.iter().all(|v| v.is_finite()));
}

#[test]
fn mismatched_projection_is_rejected() {
    let x = FrameEmbeddingTensor::<f64>::from_fn(2, 3, 4, |_, _, _| 1.0).unwrap();
    let p = LinearProjection::<f64>::init(5, 2, 0).unwrap();
    assert!(adapter_forward(&x, &p).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn shape_law(t in 1usize..=16, n in 1usize..=512, d in 1usize..=1024, k in 1usize..=4096, seed in any::<u64>()) {
        // Keep each case cheap: shrink the largest axis when the product is big.
        let n = if n * d * k > 200_000_000 { (200_000_000 / (d * k)).max(1) } else { n };
        let x = FrameEmbeddingTensor::<f32>::from_fn(t, n, d, |a, b, c| ((a + 3 * b + 5 * c) % 11) as f32 - 5.0).unwrap();
        let p = LinearProjection::<f32>::init(d, k, seed).unwrap();
        let q = adapter_forward(&x, &p).unwrap();
        prop_assert_eq!(q.dim(), (t + n, k));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn pooling_invariants(t in 1usize..7, n in 1usize..9, d in 1usize..6, seed in any::<u64>(), c in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, t, n, d, 1e3);

        let mut frames: Vec<usize> = (0..t).collect();
        let mut tokens: Vec<usize> = (0..n).collect();
        for i in (1..t).rev() { frames.swap(i, rng.random_range(0..=i)); }
        for i in (1..n).rev() { tokens.swap(i, rng.random_range(0..=i)); }

        let tp = temporal_pool(&x);
        let sp = spatial_pool(&x);
        prop_assert_eq!(temporal_pool(&x.permute_frames(&frames).unwrap()), tp.clone());
        prop_assert_eq!(spatial_pool(&x.permute_tokens(&tokens).unwrap()), sp.clone());

        let scaled = FrameEmbeddingTensor::new(x.view().mapv(|v| v * c)).unwrap();
        for (a, b) in temporal_pool(&scaled).iter().zip(tp.iter()) {
            prop_assert!((a - c * b).abs() <= 1e-12 * (c * b).abs().max(1e-9));
        }

        // Both pools average to the global mean of each channel.
        let v = x.view();
        for j in 0..d {
            let global: f64 = v.iter().skip(j).step_by(d).sum::<f64>() / (t * n) as f64;
            let from_t = tp.column(j).sum() / n as f64;
            let from_s = sp.column(j).sum() / t as f64;
            let scale = v.iter().map(|a| a.abs()).fold(0.0, f64::max);
            prop_assert!((from_t - global).abs() <= 1e-12 * scale);
            prop_assert!((from_s - global).abs() <= 1e-12 * scale);
        }
    }
}

/// Central differences of `sum(U ⊙ forward)` against the analytic backward pass.
#[test]
fn gradients_match_finite_differences() {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..24 {
        let (t, n, d, k) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=8));
        let x = random_tensor(&mut rng, t, n, d, 1.0);
        let p = random_projection(&mut rng, d, k);
        let u = Array2::from_shape_simple_fn((n + t, k), || rng.random_range(-1.0..1.0));
        let loss = |x: &FrameEmbeddingTensor<f64>, p: &LinearProjection<f64>| -> f64 {
            (naive_forward(x, p) * &u).sum()
        };
        let g = adapter_backward(&x, &p, &u).unwrap();
        let rel = |a: f64, num: f64| (a - num).abs() / a.abs().max(num.abs()).max(1e-3);

        for ((j, c), a) in g.grad_weights.indexed_iter() {
            let mut wp = p.weights().clone();
            let mut wm = p.weights().clone();
            wp[[j, c]] += h;
            wm[[j, c]] -= h;
            let num = (loss(&x, &LinearProjection::new(wp, p.bias().clone()).unwrap())
                - loss(&x, &LinearProjection::new(wm, p.bias().clone()).unwrap()))
                / (2.0 * h);
            worst = worst.max(rel(*a, num));
        }
        for (c, a) in g.grad_bias.indexed_iter() {
            let mut bp = p.bias().clone();
            let mut bm = p.bias().clone();
            bp[c] += h;
            bm[c] -= h;
            let num = (loss(&x, &LinearProjection::new(p.weights().clone(), bp).unwrap())
                - loss(&x, &LinearProjection::new(p.weights().clone(), bm).unwrap()))
                / (2.0 * h);
            worst = worst.max(rel(*a, num));
        }
        for (idx, a) in g.grad_x.indexed_iter() {
            let mut xp = x.view().to_owned();
            let mut xm = x.view().to_owned();
            xp[idx] += h;
            xm[idx] -= h;
            let num = (loss(&FrameEmbeddingTensor::new(xp).unwrap(), &p) - loss(&FrameEmbeddingTensor::new(xm).unwrap(), &p))
                / (2.0 * h);
            worst = worst.max(rel(*a, num));
        }
    }
    assert!(worst <= 1e-4, "max relative error {worst}");
}

fn toy_problem(count: usize, seed: u64) -> (Vec<TrainingSample<f64>>, usize) {
    let (t, n, d, k) = (4, 6, 8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden = random_projection(&mut rng, d, k);
    let samples = (0..count)
        .map(|_| {
            let x = random_tensor(&mut rng, t, n, d, 5.0);
            let target = adapter_forward(&x, &hidden).unwrap();
            TrainingSample { embeddings: x, target }
        })
        .collect();
    (samples, k)
}

#[test]
fn toy_training_reduces_loss_tenfold() {
    let (samples, k) = toy_problem(20, 5);
    let config = TrainConfig { learning_rate: 2e-5 * 1000.0, epochs: 200, ..TrainConfig::default() };
    let run = train_adapter(&samples, k, &config).unwrap();
    assert_eq!(run.losses.len(), 201);
    assert!(
        run.final_loss() * 10.0 <= run.initial_loss(),
        "loss {} -> {}",
        run.initial_loss(),
        run.final_loss()
    );
    // Same seed, same run.
    let again = train_adapter(&samples, k, &config).unwrap();
    assert_eq!(again.losses, run.losses);
    assert_eq!(again.projection, run.projection);
}

#[test]
fn zero_learning_rate_keeps_parameters_bit_identical() {
    let (samples, k) = toy_problem(20, 9);
    let init = LinearProjection::<f64>::init(8, k, 77).unwrap();
    let config = TrainConfig { learning_rate: 0.0, epochs: 5, batch_size: 3, seed: 1 };
    let run = train_adapter_from(init.clone(), &samples, &config).unwrap();
    assert_eq!(run.projection, init);
    assert!(run.losses.windows(2).all(|w| w[0].to_bits() == w[1].to_bits()));
}

#[test]
fn f32_training_runs() {
    let (samples, k) = toy_problem(6, 3);
    let narrow: Vec<TrainingSample<f32>> = samples
        .iter()
        .map(|s| TrainingSample {
            embeddings: FrameEmbeddingTensor::new(s.embeddings.view().mapv(|v| v as f32)).unwrap(),
            target: s.target.mapv(|v| v as f32),
        })
        .collect();
    let run = train_adapter(&narrow, k, &TrainConfig { learning_rate: 0.02, epochs: 50, ..TrainConfig::default() }).unwrap();
    assert!(run.final_loss() < run.initial_loss());
}

#[test]
fn prompt_roundtrip_and_rejection() {
    let p = build_prompt("Summarize the clip.", 264).unwrap();
    assert_eq!(p.rendered_text(), "USER: Summarize the clip. <video:264> Assistant:");
    assert_eq!(PromptLayout::parse(p.rendered_text()).unwrap(), p);
    assert!(build_prompt("look at <video:3>", 264).is_err());
}
