//! Reverse-mode gradients against central finite differences.

use krylov_core::krylov::IncrementSequence;
use krylov_core::trainer::{gradients, loss};
use krylov_core::transformer::{ModelConfig, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        dropout: 0.0,
        max_position: 16,
        layer_norm_eps: 1e-5,
    }
}

fn batch(seed: u64, count: usize, len: usize) -> Vec<IncrementSequence<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| IncrementSequence::new((0..len).map(|_| rng.random_range(-1.0..1.5)).collect()).unwrap())
        .collect()
}

/// Central differences with step `h` on every scalar parameter.
fn finite_difference(params: &ModelParams<f64>, data: &[IncrementSequence<f64>], n_in: usize, h: f64) -> Vec<Vec<f64>> {
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
    let mut out = Vec::new();
    for (ti, &size) in sizes.iter().enumerate() {
        let mut g = vec![0.0; size];
        for (j, gj) in g.iter_mut().enumerate() {
            let mut plus = params.clone();
            plus.tensors_mut()[ti].data[j] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[ti].data[j] -= h;
            *gj = (loss(&plus, data, n_in).unwrap() - loss(&minus, data, n_in).unwrap()) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check(config: &ModelConfig, seed: u64, len: usize, n_in: usize) {
    let params = ModelParams::<f64>::init(config, seed);
    let data = batch(seed + 100, 3, len);
    let analytic = gradients(&params, &data, n_in, None).unwrap();
    let numeric = finite_difference(&params, &data, n_in, 1e-6);
    for (t, fd) in analytic.tensors().iter().zip(&numeric) {
        let diff: Vec<f64> = t.data.iter().zip(fd).map(|(a, b)| a - b).collect();
        let scale = norm(t.data).max(norm(fd));
        assert!(scale > 0.0, "{} has an identically zero gradient", t.name);
        let rel = norm(&diff) / scale;
        println!("{:<18} |g| = {:.3e}  rel err = {:.2e}", t.name, scale, rel);
        assert!(rel < 1e-5, "{}: relative error {rel:e}", t.name);
    }
}

#[test]
fn every_tensor_matches_central_differences() {
    // T = 6 increments: five input tokens, scored from n_in = 2
    check(&tiny_config(), 11, 6, 2);
}

#[test]
fn deeper_model_matches_central_differences() {
    let cfg = ModelConfig { n_layers: 2, ..tiny_config() };
    check(&cfg, 23, 7, 3);
}
