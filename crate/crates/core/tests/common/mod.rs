#![allow(dead_code)]

use forge_core::data::{LabeledPatch, Splits};
use forge_core::{DetectorConfig, DomainDataset, Label, Normalization, PipelineParams, Pooling};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const SIZE: usize = 48;

pub fn small_config(pooling: Pooling, normalization: Normalization, seed: u64) -> DetectorConfig {
    DetectorConfig {
        pooling,
        normalization,
        width_scale: 0.25,
        patch_size: SIZE,
        rng_seed: seed,
        ..DetectorConfig::default()
    }
}

/// Smooth gradient plus Gaussian noise whose strength depends on the class.
pub fn residual_patch(label: Label, rng: &mut ChaCha8Rng) -> LabeledPatch {
    let sigma = match label {
        Label::Authentic => 0.002,
        Label::Forged => 0.03,
    };
    let noise = Normal::new(0.0, sigma).unwrap();
    let (a, b, c): (f64, f64, f64) = (rng.random_range(0.2..0.6), rng.random(), rng.random());
    let pixels = (0..SIZE * SIZE)
        .map(|i| {
            let (x, y) = ((i % SIZE) as f64 / SIZE as f64, (i / SIZE) as f64 / SIZE as f64);
            (a + 0.2 * b * x + 0.2 * c * y + noise.sample(rng)).clamp(0.0, 1.0) as f32
        })
        .collect();
    LabeledPatch {
        pixels,
        size: SIZE,
        label,
        coverage: if label == Label::Forged { 0.25 } else { 0.0 },
        source_scene: "toy".into(),
        x: 0,
        y: 0,
    }
}

/// Balanced toy domain with `per_class` patches of each class per split.
pub fn toy_domain(per_class: [usize; 3], seed: u64) -> DomainDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut patches = Vec::new();
    let mut splits = Splits::default();
    for (k, &n) in per_class.iter().enumerate() {
        for i in 0..2 * n {
            let label = if i % 2 == 0 { Label::Authentic } else { Label::Forged };
            let idx = patches.len();
            patches.push(residual_patch(label, &mut rng));
            match k {
                0 => splits.train.push(idx),
                1 => splits.val.push(idx),
                _ => splits.test.push(idx),
            }
        }
    }
    DomainDataset::new(PipelineParams::identity("toy"), patches, splits)
}

pub fn random_batch(n: usize, seed: u64) -> Vec<LabeledPatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = if rng.random_bool(0.5) { Label::Forged } else { Label::Authentic };
            let mut p = residual_patch(label, &mut rng);
            p.x = i;
            p
        })
        .collect()
}
