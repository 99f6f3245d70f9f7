//! Gaussian blur and unsharp masking.

use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Normalized 1-D Gaussian taps with half-width `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let half = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut taps: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(image: &GrayImage, sigma: f64) -> Result<GrayImage> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::param(
            "sharpen_radius",
            format!("{sigma} must be > 0"),
        ));
    }
    let taps = gaussian_kernel(sigma);
    let half = (taps.len() / 2) as isize;
    let (w, h) = (image.width() as isize, image.height() as isize);
    let src = image.pixels();

    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        let row = &src[(y * w) as usize..((y + 1) * w) as usize];
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let xx = (x + k as isize - half).clamp(0, w - 1);
                acc += t * row[xx as usize];
            }
            tmp[(y * w + x) as usize] = acc;
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let yy = (y + k as isize - half).clamp(0, h - 1);
                acc += t * tmp[(yy * w + x) as usize];
            }
            out[(y * w + x) as usize] = acc;
        }
    }
    GrayImage::from_vec(image.width(), image.height(), out)
}

/// `clip(image + amount * (image - blur(image, radius)), 0, 1)`.
pub fn unsharp_mask(image: &GrayImage, amount: f64, radius: f64) -> Result<GrayImage> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::param(
            "sharpen_radius",
            format!("{radius} must be > 0"),
        ));
    }
    if !(amount >= 0.0 && amount.is_finite()) {
        return Err(Error::param(
            "sharpen_amount",
            format!("{amount} must be >= 0"),
        ));
    }
    image.ensure_finite()?;
    if amount == 0.0 {
        return Ok(image.clone());
    }
    let blurred = gaussian_blur(image, radius)?;
    let data = image
        .pixels()
        .iter()
        .zip(blurred.pixels())
        .map(|(&x, &b)| (x + amount * (x - b)).clamp(0.0, 1.0))
        .collect();
    GrayImage::from_vec(image.width(), image.height(), data)
}
