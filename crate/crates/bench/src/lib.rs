//! Shared inputs for the kernel benchmarks.

use forge_core::{DetectorConfig, GrayImage, Label, LabeledPatch};

/// Deterministic textured image: a gradient plus a hashed high-frequency pattern.
pub fn textured_image(size: usize) -> GrayImage {
    GrayImage::from_fn(size, size, |x, y| {
        let h = (x.wrapping_mul(73_856_093) ^ y.wrapping_mul(19_349_663)) % 1000;
        0.3 + 0.4 * (x + y) as f64 / (2 * size) as f64 + 0.05 * h as f64 / 1000.0
    })
}

/// `n` patches cut from a textured image, alternating labels.
pub fn patch_batch(n: usize, size: usize) -> Vec<LabeledPatch> {
    let image = textured_image(size + n);
    (0..n)
        .map(|i| {
            let pixels = (0..size * size)
                .map(|k| image.pixels()[(k / size + i) * image.width() + k % size] as f32)
                .collect();
            LabeledPatch {
                pixels,
                size,
                label: if i % 2 == 0 { Label::Authentic } else { Label::Forged },
                coverage: 0.0,
                source_scene: "bench".into(),
                x: i,
                y: 0,
            }
        })
        .collect()
}

/// Default architecture at the given patch size and width.
pub fn detector_config(patch_size: usize, width_scale: f64) -> DetectorConfig {
    DetectorConfig {
        patch_size,
        width_scale,
        ..DetectorConfig::default()
    }
}
