//! Procedural scenes with a spliced donor region.
//!
//! Host and donor content are drawn from the same procedural family (smooth
//! gradients, band-limited texture and hard-edged shapes seen through a mild
//! optical blur). What separates them is the noise residual: the donor gets
//! a larger sensor-noise variance and is pre-sharpened before compositing.

use std::borrow::Cow;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::patches::SceneSource;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::pipelines::{gaussian_blur, unsharp_mask};
use crate::seed::{self, stream, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Side length of the square scenes.
    pub image_size: usize,
    /// Patch size the scenes will be cut into (used for validation).
    pub patch_size: usize,
    /// Probability that a scene receives a spliced region.
    pub splice_prob: f64,
    /// Allowed fraction of the scene covered by the donor region.
    pub donor_area: [f64; 2],
    /// Range of the host sensor-noise standard deviation.
    pub host_noise: [f64; 2],
    /// Range of donor-to-host noise standard deviation ratios.
    pub donor_noise_ratio: [f64; 2],
    pub donor_sharpen_amount: f64,
    pub donor_sharpen_radius: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 512,
            patch_size: 128,
            splice_prob: 0.7,
            donor_area: [0.03, 0.10],
            host_noise: [0.006, 0.014],
            donor_noise_ratio: [1.8, 2.6],
            donor_sharpen_amount: 0.8,
            donor_sharpen_radius: 1.0,
        }
    }
}

fn check_range(name: &'static str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && lo <= r[0] && r[0] <= r[1] && r[1] <= hi) {
        return Err(Error::InvalidConfig(format!(
            "{name} range [{}, {}] must be ordered within [{lo}, {hi}]",
            r[0], r[1]
        )));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 256 {
            return Err(Error::InvalidConfig(format!(
                "image_size {} < 256",
                self.image_size
            )));
        }
        if self.image_size < 2 * self.patch_size {
            return Err(Error::InvalidConfig(format!(
                "image_size {} is smaller than twice the patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.splice_prob) {
            return Err(Error::InvalidConfig(format!(
                "splice_prob {} outside [0, 1]",
                self.splice_prob
            )));
        }
        check_range("donor_area", self.donor_area, 1e-4, 0.5)?;
        check_range("host_noise", self.host_noise, 0.0, 0.5)?;
        check_range("donor_noise_ratio", self.donor_noise_ratio, 0.0, 100.0)?;
        if self.donor_sharpen_amount < 0.0 || self.donor_sharpen_radius <= 0.0 {
            return Err(Error::InvalidConfig(
                "donor sharpening must have amount >= 0 and radius > 0".into(),
            ));
        }
        Ok(())
    }
}

/// A full scene and its exact splice mask (1 = donor pixel).
#[derive(Debug, Clone, PartialEq)]
pub struct SceneImage {
    pub pixels: GrayImage,
    pub tamper_mask: Vec<u8>,
    pub scene_id: String,
    pub rng_seed: u64,
}

impl SceneImage {
    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn mask_fraction(&self) -> f64 {
        let n = self.tamper_mask.iter().filter(|&&m| m == 1).count();
        n as f64 / self.tamper_mask.len() as f64
    }

    pub fn is_forged(&self) -> bool {
        self.tamper_mask.iter().any(|&m| m != 0)
    }
}

fn uniform(rng: &mut Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

/// Smooth random field: coarse lattice of uniform values, bilinearly upsampled.
fn value_noise(rng: &mut Rng, size: usize, cell: usize) -> Vec<f64> {
    let n = size / cell + 2;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let fy = y as f64 / cell as f64;
        let (iy, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..size {
            let fx = x as f64 / cell as f64;
            let (ix, tx) = (fx.floor() as usize, fx.fract());
            let a = lattice[iy * n + ix];
            let b = lattice[iy * n + ix + 1];
            let c = lattice[(iy + 1) * n + ix];
            let d = lattice[(iy + 1) * n + ix + 1];
            out[y * size + x] =
                (a * (1.0 - tx) + b * tx) * (1.0 - ty) + (c * (1.0 - tx) + d * tx) * ty;
        }
    }
    out
}

/// Noise-free procedural content in roughly `[0.1, 0.9]`.
fn procedural_content(rng: &mut Rng, size: usize) -> Result<GrayImage> {
    let base = rng.random_range(0.3..0.7);
    let gx = rng.random_range(-0.2..0.2) / size as f64;
    let gy = rng.random_range(-0.2..0.2) / size as f64;
    let coarse = value_noise(rng, size, 64);
    let fine = value_noise(rng, size, 12);
    let (ac, af) = (rng.random_range(0.05..0.15), rng.random_range(0.02..0.06));

    let mut img = GrayImage::from_fn(size, size, |x, y| {
        let i = y * size + x;
        base + gx * x as f64 + gy * y as f64 + ac * coarse[i] + af * fine[i]
    });

    let shapes = rng.random_range(4..10);
    for _ in 0..shapes {
        let offset = rng.random_range(-0.2..0.2);
        let cx = rng.random_range(0.0..size as f64);
        let cy = rng.random_range(0.0..size as f64);
        let r = rng.random_range(0.03..0.15) * size as f64;
        let disc = rng.random_bool(0.5);
        let (x0, x1) = ((cx - r).max(0.0) as usize, ((cx + r) as usize).min(size));
        let (y0, y1) = ((cy - r).max(0.0) as usize, ((cy + r) as usize).min(size));
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                if !disc || dx * dx + dy * dy <= r * r {
                    let v = img.get(x, y) + offset;
                    img.set(x, y, v);
                }
            }
        }
    }
    let mut img = gaussian_blur(&img, 1.2)?;
    for v in img.pixels_mut() {
        *v = v.clamp(0.1, 0.9);
    }
    Ok(img)
}

fn add_noise(img: &mut GrayImage, rng: &mut Rng, sigma: f64) {
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    for v in img.pixels_mut() {
        *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
    }
}

/// Rasterized rotated ellipse whose area fraction lies within `range`.
fn donor_mask(rng: &mut Rng, size: usize, range: [f64; 2]) -> Vec<u8> {
    let total = (size * size) as f64;
    loop {
        let frac = uniform(rng, range);
        let aspect = rng.random_range(0.6..1.6);
        let b = (frac * total / (std::f64::consts::PI * aspect)).sqrt();
        let a = aspect * b;
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let reach = a.max(b) + 1.0;
        if 2.0 * reach >= size as f64 {
            continue;
        }
        let cx = rng.random_range(reach..size as f64 - reach);
        let cy = rng.random_range(reach..size as f64 - reach);
        let (s, c) = theta.sin_cos();
        let mut mask = vec![0u8; size * size];
        let mut count = 0usize;
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let u = (c * dx + s * dy) / a;
                let v = (-s * dx + c * dy) / b;
                if u * u + v * v <= 1.0 {
                    mask[y * size + x] = 1;
                    count += 1;
                }
            }
        }
        let got = count as f64 / total;
        if got >= range[0] && got <= range[1] {
            return mask;
        }
    }
}

/// Generates one scene, a pure function of `(seed, config)`.
pub fn synthesize_scene(seed: u64, config: &SynthConfig) -> Result<SceneImage> {
    config.validate()?;
    let size = config.image_size;
    let mut layout = seed::rng(seed, stream::SCENE_LAYOUT);
    let forged = layout.random_bool(config.splice_prob);
    let host_sigma = uniform(&mut layout, config.host_noise);

    let mut host = procedural_content(&mut seed::rng(seed, stream::SCENE_HOST), size)?;
    let mut noise_rng = seed::rng(seed, stream::SCENE_NOISE);
    add_noise(&mut host, &mut noise_rng, host_sigma);

    let mut mask = vec![0u8; size * size];
    if forged {
        mask = donor_mask(&mut layout, size, config.donor_area);
        let ratio = uniform(&mut layout, config.donor_noise_ratio);
        let mut donor = procedural_content(&mut seed::rng(seed, stream::SCENE_DONOR), size)?;
        add_noise(&mut donor, &mut noise_rng, host_sigma * ratio);
        let donor = unsharp_mask(
            &donor,
            config.donor_sharpen_amount,
            config.donor_sharpen_radius,
        )?;
        for (i, &m) in mask.iter().enumerate() {
            if m == 1 {
                host.pixels_mut()[i] = donor.pixels()[i];
            }
        }
    }

    Ok(SceneImage {
        pixels: host,
        tamper_mask: mask,
        scene_id: format!("scene-{seed:016x}"),
        rng_seed: seed,
    })
}

/// Lazily generated scenes, so large corpora never sit in memory at once.
#[derive(Debug, Clone)]
pub struct SyntheticScenes {
    pub seeds: Vec<u64>,
    pub config: SynthConfig,
}

impl SyntheticScenes {
    /// `count` scenes with seeds derived from `global_seed`.
    pub fn new(global_seed: u64, count: usize, config: SynthConfig) -> Result<Self> {
        config.validate()?;
        let seeds = (0..count as u64)
            .map(|i| seed::derive(global_seed, i))
            .collect();
        Ok(Self { seeds, config })
    }
}

impl SceneSource for SyntheticScenes {
    fn len(&self) -> usize {
        self.seeds.len()
    }

    fn scene(&self, index: usize) -> Result<Cow<'_, SceneImage>> {
        synthesize_scene(self.seeds[index], &self.config).map(Cow::Owned)
    }
}
