//! Baseline JPEG reconstruction for grayscale images.
//!
//! Entropy coding is lossless, so the decoded image of a baseline encoder is
//! fully determined by the 8-bit sample conversion, the 8x8 forward DCT,
//! quantization with the quality-scaled luminance table, dequantization and
//! the inverse DCT. This module computes exactly that reconstruction.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Annex K luminance quantization table, natural (row-major) order.
const LUMA_QUANT: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Quality-scaled table using the IJG convention.
pub fn quant_table(quality: u8) -> Result<[f64; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(Error::param(
            "jpeg_quality",
            format!("{quality} outside [1, 100]"),
        ));
    }
    let q = u32::from(quality);
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut table = [0.0; 64];
    for (t, &base) in table.iter_mut().zip(&LUMA_QUANT) {
        *t = ((u32::from(base) * scale + 50) / 100).clamp(1, 255) as f64;
    }
    Ok(table)
}

/// `basis[u][x] = c(u)/2 * cos((2x + 1) u pi / 16)`, orthonormal.
fn dct_basis() -> &'static [[f64; 8]; 8] {
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut b = [[0.0; 8]; 8];
        for (u, row) in b.iter_mut().enumerate() {
            let cu = if u == 0 {
                std::f64::consts::FRAC_1_SQRT_2
            } else {
                1.0
            };
            for (x, v) in row.iter_mut().enumerate() {
                *v = cu / 2.0 * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos();
            }
        }
        b
    })
}

pub(crate) fn fdct(block: &[f64; 64]) -> [f64; 64] {
    let b = dct_basis();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| b[u][x] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            out[v * 8 + u] = (0..8).map(|y| b[v][y] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

pub(crate) fn idct(coef: &[f64; 64]) -> [f64; 64] {
    let b = dct_basis();
    let mut tmp = [0.0; 64];
    for v in 0..8 {
        for x in 0..8 {
            tmp[v * 8 + x] = (0..8).map(|u| b[u][x] * coef[v * 8 + u]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|v| b[v][y] * tmp[v * 8 + x]).sum();
        }
    }
    out
}

/// Decoded result of baseline-encoding `image` at `quality`.
///
/// Samples are converted to 8 bits (round, clamp), partial edge blocks are
/// padded by replicating the last row/column, quantized coefficients are
/// rounded half away from zero and reconstructed samples are rounded and
/// clamped to `[0, 255]` before rescaling to `[0, 1]`.
pub fn jpeg_compress(image: &GrayImage, quality: u8) -> Result<GrayImage> {
    let table = quant_table(quality)?;
    image.ensure_finite()?;
    let (w, h) = (image.width(), image.height());
    let samples: Vec<f64> = image
        .pixels()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0))
        .collect();

    let mut out = vec![0.0; w * h];
    let mut block = [0.0; 64];
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            for y in 0..8 {
                let sy = (by + y).min(h - 1);
                for x in 0..8 {
                    let sx = (bx + x).min(w - 1);
                    block[y * 8 + x] = samples[sy * w + sx] - 128.0;
                }
            }
            let mut coef = fdct(&block);
            for (c, q) in coef.iter_mut().zip(&table) {
                *c = (*c / q).round() * q;
            }
            let rec = idct(&coef);
            for y in 0..8.min(h - by) {
                for x in 0..8.min(w - bx) {
                    let v = (rec[y * 8 + x] + 128.0).round().clamp(0.0, 255.0);
                    out[(by + y) * w + bx + x] = v / 255.0;
                }
            }
        }
    }
    GrayImage::from_vec(w, h, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_scaling_matches_ijg() {
        let q50 = quant_table(50).unwrap();
        assert_eq!(q50[0], 16.0);
        assert_eq!(q50[63], 99.0);
        assert!(quant_table(100).unwrap().iter().all(|&v| v == 1.0));
        // quality 70: scale 60 -> 16 * 60 / 100 = 9.6 -> 10 with +50 rounding.
        assert_eq!(quant_table(70).unwrap()[0], 10.0);
        assert_eq!(quant_table(1).unwrap()[0], 255.0);
    }

    #[test]
    fn dct_round_trip_is_orthonormal() {
        let mut block = [0.0; 64];
        for (i, v) in block.iter_mut().enumerate() {
            *v = ((i * 37) % 19) as f64 - 9.0;
        }
        let back = idct(&fdct(&block));
        for (a, b) in block.iter().zip(&back) {
            assert!((a - b).abs() < 1e-10);
        }
        let energy_in: f64 = block.iter().map(|v| v * v).sum();
        let energy_out: f64 = fdct(&block).iter().map(|v| v * v).sum();
        assert!((energy_in - energy_out).abs() < 1e-8);
    }

    #[test]
    fn constant_survives_quantization() {
        let img = GrayImage::filled(24, 17, 0.5);
        let out = jpeg_compress(&img, 70).unwrap();
        assert!(out.max_abs_diff(&img) <= 1.0 / 255.0);
    }

    #[test]
    fn quality_100_is_near_lossless() {
        let img = GrayImage::from_fn(64, 48, |x, y| {
            0.5 + 0.3 * ((x as f64 * 0.7).sin() * (y as f64 * 0.3).cos())
                + ((x * 7 + y * 13) % 5) as f64 * 0.02
        });
        let out = jpeg_compress(&img, 100).unwrap();
        assert!(
            out.max_abs_diff(&img) < 4.0 / 255.0,
            "{}",
            out.max_abs_diff(&img) * 255.0
        );
    }

    #[test]
    fn low_quality_loses_more_energy() {
        let img = GrayImage::from_fn(64, 64, |x, y| if (x + y) % 2 == 0 { 0.25 } else { 0.75 });
        let low = jpeg_compress(&img, 10).unwrap().rms_diff(&img);
        let high = jpeg_compress(&img, 90).unwrap().rms_diff(&img);
        assert!(low > high, "q10 rms {low} vs q90 rms {high}");
    }

    #[test]
    fn rejects_out_of_range_quality() {
        let img = GrayImage::filled(8, 8, 0.5);
        assert!(jpeg_compress(&img, 0).is_err());
        assert!(jpeg_compress(&img, 101).is_err());
    }
}
