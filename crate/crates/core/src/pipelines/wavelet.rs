//! Single-level orthonormal Haar soft-threshold denoising.

use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Soft-thresholds the three detail subbands of a one-level 2-D Haar
/// transform by `strength`, reconstructs and clips to `[0, 1]`.
///
/// With an odd width or height the trailing column/row is not covered by a
/// 2x2 block and passes through unchanged (apart from the final clip).
pub fn wavelet_denoise(image: &GrayImage, strength: f64) -> Result<GrayImage> {
    image.ensure_finite()?;
    if !(strength >= 0.0 && strength.is_finite()) {
        return Err(Error::param(
            "denoise_strength",
            format!("{strength} is not a finite value >= 0"),
        ));
    }
    if strength == 0.0 {
        return Ok(image.clone());
    }

    let (w, h) = (image.width(), image.height());
    let mut out = image.clone();
    for by in (0..h - h % 2).step_by(2) {
        for bx in (0..w - w % 2).step_by(2) {
            let a = image.get(bx, by);
            let b = image.get(bx + 1, by);
            let c = image.get(bx, by + 1);
            let d = image.get(bx + 1, by + 1);

            let ll = (a + b + c + d) / 2.0;
            let lh = soft_threshold((a - b + c - d) / 2.0, strength);
            let hl = soft_threshold((a + b - c - d) / 2.0, strength);
            let hh = soft_threshold((a - b - c + d) / 2.0, strength);

            out.set(bx, by, (ll + lh + hl + hh) / 2.0);
            out.set(bx + 1, by, (ll - lh + hl - hh) / 2.0);
            out.set(bx, by + 1, (ll + lh - hl - hh) / 2.0);
            out.set(bx + 1, by + 1, (ll - lh - hl + hh) / 2.0);
        }
    }
    out.clamp_unit();
    Ok(out)
}

#[inline]
pub fn soft_threshold(value: f64, threshold: f64) -> f64 {
    value.signum() * (value.abs() - threshold).max(0.0)
}
