//! Parametric development chains: wavelet denoise, unsharp mask, JPEG.
//!
//! Operators always run in the fixed order denoise, sharpen, JPEG. Each one
//! is an exact identity at its "off" setting, so the all-off chain returns
//! its input bit for bit.

mod jpeg;
mod sharpen;
mod wavelet;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;

pub use jpeg::{jpeg_compress, quant_table};
pub use sharpen::{gaussian_blur, gaussian_kernel, unsharp_mask};
pub use wavelet::{soft_threshold, wavelet_denoise};

/// Parameters of one development chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineParams {
    #[serde(rename = "id")]
    pub pipeline_id: String,
    /// Wavelet shrinkage threshold, 0 disables denoising.
    #[serde(rename = "denoise")]
    pub denoise_strength: f64,
    /// Unsharp gain, 0 disables sharpening.
    pub sharpen_amount: f64,
    /// Gaussian sigma of the unsharp mask, in pixels.
    pub sharpen_radius: f64,
    /// `None` skips JPEG compression.
    pub jpeg_quality: Option<u8>,
}

impl PipelineParams {
    pub fn identity(id: impl Into<String>) -> Self {
        Self {
            pipeline_id: id.into(),
            denoise_strength: 0.0,
            sharpen_amount: 0.0,
            sharpen_radius: 1.0,
            jpeg_quality: None,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.denoise_strength == 0.0 && self.sharpen_amount == 0.0 && self.jpeg_quality.is_none()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.denoise_strength >= 0.0 && self.denoise_strength.is_finite()) {
            return Err(Error::param(
                "denoise_strength",
                format!("{} must be >= 0", self.denoise_strength),
            ));
        }
        if !(self.sharpen_amount >= 0.0 && self.sharpen_amount.is_finite()) {
            return Err(Error::param(
                "sharpen_amount",
                format!("{} must be >= 0", self.sharpen_amount),
            ));
        }
        if !(self.sharpen_radius > 0.0 && self.sharpen_radius.is_finite()) {
            return Err(Error::param(
                "sharpen_radius",
                format!("{} must be > 0", self.sharpen_radius),
            ));
        }
        if let Some(q) = self.jpeg_quality {
            if !(1..=100).contains(&q) {
                return Err(Error::param(
                    "jpeg_quality",
                    format!("{q} outside [1, 100]"),
                ));
            }
        }
        Ok(())
    }
}

/// Applies denoise, then sharpen, then (optionally) JPEG.
pub fn apply_pipeline(image: &GrayImage, params: &PipelineParams) -> Result<GrayImage> {
    params.validate()?;
    image.ensure_finite()?;
    let denoised = wavelet_denoise(image, params.denoise_strength)?;
    let sharpened = unsharp_mask(&denoised, params.sharpen_amount, params.sharpen_radius)?;
    match params.jpeg_quality {
        Some(q) => jpeg_compress(&sharpened, q),
        None => Ok(sharpened),
    }
}

/// Level spacing for [`make_target_grid`]: each axis is `linspace(min, max, n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridLevels {
    pub denoise_min: f64,
    pub denoise_max: f64,
    pub sharpen_min: f64,
    pub sharpen_max: f64,
    pub sharpen_radius: f64,
}

impl Default for GridLevels {
    fn default() -> Self {
        Self {
            denoise_min: 0.0,
            denoise_max: 0.03,
            sharpen_min: 0.0,
            sharpen_max: 2.0,
            sharpen_radius: 1.0,
        }
    }
}

fn linspace(min: f64, max: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![min];
    }
    (0..n)
        .map(|i| min + (max - min) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Cartesian product of `n_denoise` denoise strengths and `n_sharpen`
/// sharpen amounts, every chain terminated by JPEG at `jpeg_quality`.
pub fn make_target_grid(
    n_denoise: usize,
    n_sharpen: usize,
    jpeg_quality: u8,
    levels: &GridLevels,
) -> Result<Vec<PipelineParams>> {
    if n_denoise == 0 || n_sharpen == 0 {
        return Err(Error::param(
            "grid",
            format!("{n_denoise} x {n_sharpen} grid is empty"),
        ));
    }
    if levels.denoise_min < 0.0 || levels.denoise_max < levels.denoise_min {
        return Err(Error::param(
            "denoise",
            "levels must satisfy 0 <= min <= max",
        ));
    }
    if levels.sharpen_min < 0.0 || levels.sharpen_max < levels.sharpen_min {
        return Err(Error::param(
            "sharpen",
            "levels must satisfy 0 <= min <= max",
        ));
    }
    let mut grid = Vec::with_capacity(n_denoise * n_sharpen);
    for (i, &d) in linspace(levels.denoise_min, levels.denoise_max, n_denoise)
        .iter()
        .enumerate()
    {
        for (j, &s) in linspace(levels.sharpen_min, levels.sharpen_max, n_sharpen)
            .iter()
            .enumerate()
        {
            let p = PipelineParams {
                pipeline_id: format!("d{i}-s{j}-q{jpeg_quality}"),
                denoise_strength: d,
                sharpen_amount: s,
                sharpen_radius: levels.sharpen_radius,
                jpeg_quality: Some(jpeg_quality),
            };
            p.validate()?;
            grid.push(p);
        }
    }
    Ok(grid)
}

/// JSON document `{"pipelines": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineGrid {
    pub pipelines: Vec<PipelineParams>,
}

impl PipelineGrid {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for p in &self.pipelines {
            p.validate()?;
            if !seen.insert(p.pipeline_id.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate pipeline id `{}`",
                    p.pipeline_id
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured() -> GrayImage {
        GrayImage::from_fn(40, 24, |x, y| {
            (0.5 + 0.25 * (x as f64 * 0.9).sin() * (y as f64 * 0.4).cos()
                + ((x * 11 + y * 3) % 7) as f64 * 0.01)
                .clamp(0.0, 1.0)
        })
    }

    #[test]
    fn identity_chain_is_bit_exact() {
        let img = textured();
        let id = PipelineParams::identity("id");
        assert_eq!(apply_pipeline(&img, &id).unwrap(), img);
    }

    #[test]
    fn jpeg_only_chain_equals_jpeg() {
        let img = textured();
        let p = PipelineParams {
            jpeg_quality: Some(70),
            ..PipelineParams::identity("q70")
        };
        assert_eq!(
            apply_pipeline(&img, &p).unwrap(),
            jpeg_compress(&img, 70).unwrap()
        );
    }

    #[test]
    fn full_chain_equals_manual_composition() {
        let img = textured();
        let p = PipelineParams {
            pipeline_id: "full".into(),
            denoise_strength: 0.05,
            sharpen_amount: 1.0,
            sharpen_radius: 1.5,
            jpeg_quality: Some(70),
        };
        let manual = jpeg_compress(
            &unsharp_mask(&wavelet_denoise(&img, 0.05).unwrap(), 1.0, 1.5).unwrap(),
            70,
        )
        .unwrap();
        let out = apply_pipeline(&img, &p).unwrap();
        assert_eq!(out, manual);
        assert_eq!(apply_pipeline(&img, &p).unwrap(), out);
        assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn invalid_params_are_rejected() {
        let img = textured();
        let mut p = PipelineParams::identity("bad");
        p.jpeg_quality = Some(0);
        assert!(apply_pipeline(&img, &p).is_err());
        p.jpeg_quality = None;
        p.sharpen_radius = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn default_grid_has_twenty_chains_at_q70() {
        let grid = make_target_grid(4, 5, 70, &GridLevels::default()).unwrap();
        assert_eq!(grid.len(), 20);
        assert!(grid.iter().all(|p| p.jpeg_quality == Some(70)));
        let ids: HashSet<_> = grid.iter().map(|p| p.pipeline_id.clone()).collect();
        assert_eq!(ids.len(), 20);
    }

    #[test]
    fn small_grids_enumerate_every_tuple_once() {
        assert_eq!(
            make_target_grid(1, 1, 70, &GridLevels::default())
                .unwrap()
                .len(),
            1
        );
        let grid = make_target_grid(2, 3, 70, &GridLevels::default()).unwrap();
        let tuples: HashSet<(u64, u64)> = grid
            .iter()
            .map(|p| (p.denoise_strength.to_bits(), p.sharpen_amount.to_bits()))
            .collect();
        assert_eq!(grid.len(), 6);
        assert_eq!(tuples.len(), 6);
        assert!(make_target_grid(0, 3, 70, &GridLevels::default()).is_err());
    }

    #[test]
    fn grid_json_uses_documented_keys() {
        let grid = PipelineGrid {
            pipelines: make_target_grid(1, 1, 70, &GridLevels::default()).unwrap(),
        };
        let v: serde_json::Value = serde_json::to_value(&grid).unwrap();
        let p = &v["pipelines"][0];
        for key in [
            "id",
            "denoise",
            "sharpen_amount",
            "sharpen_radius",
            "jpeg_quality",
        ] {
            assert!(p.get(key).is_some(), "missing {key}");
        }
        let back: PipelineGrid = serde_json::from_value(v).unwrap();
        assert_eq!(back, grid);
    }
}
