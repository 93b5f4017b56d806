#![allow(dead_code)]

use dualview_core::data::GenSpec;
use dualview_core::model::ModelConfig;
use dualview_core::train::TrainConfig;
use dualview_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Rows scaled to unit length.
pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let mut t = uniform(rng, &[n, d]);
    for row in t.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    t
}

pub fn small_model() -> ModelConfig {
    ModelConfig {
        base_channels: 4,
        proj_dim: 16,
        patches: 4,
        heads: 2,
        ..ModelConfig::default()
    }
}

/// A few seconds of training: 60 samples, 2 epochs, narrow model.
pub fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        epochs: 2,
        batch_size: 8,
        data: GenSpec {
            n: 60,
            ..GenSpec::default()
        },
        model: small_model(),
        ..TrainConfig::desk()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}
