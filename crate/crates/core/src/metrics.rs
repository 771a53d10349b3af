//! SSIM, dSSIM and PSNR.
//!
//! Both metrics work on the 8-bit scale (samples × 255). Color images are
//! reduced to their channel-mean luminance for SSIM; PSNR uses every sample.
//! SSIM is the mean of the local index over all fully-contained 11×11
//! Gaussian windows (σ = 1.5) with `C1 = (0.01·255)²`, `C2 = (0.03·255)²`.

use crate::error::{Error, Result};
use crate::raster::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
pub const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

/// Normalized 1-D taps of the SSIM window; the 2-D window is their outer
/// product.
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Valid-window separable filtering of a `w×h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = taps.iter().zip(&row[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * tmp[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() || a.channels() != b.channels() {
        return Err(Error::size(a.dims(), b.dims()));
    }
    Ok(())
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let (w, h) = a.dims();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidParameter(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let x: Vec<f64> = a.luminance().iter().map(|v| v * 255.0).collect();
    let y: Vec<f64> = b.luminance().iter().map(|v| v * 255.0).collect();
    let taps = ssim_taps();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let mu_x = filter_valid(&x, w, h, &taps);
    let mu_y = filter_valid(&y, w, h, &taps);
    let e_xx = filter_valid(&xx, w, h, &taps);
    let e_yy = filter_valid(&yy, w, h, &taps);
    let e_xy = filter_valid(&xy, w, h, &taps);
    let n = mu_x.len();
    let mut total = 0.0;
    for i in 0..n {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = e_xx[i] - mx * mx;
        let vy = e_yy[i] - my * my;
        let cxy = e_xy[i] - mx * my;
        total +=
            ((2.0 * mx * my + C1) * (2.0 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
    }
    Ok(total / n as f64)
}

pub fn dssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(1.0 - ssim(a, b)?)
}

/// Mean squared error on the 8-bit scale.
pub fn mse_8bit(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.samples().len() as f64;
    Ok(a.samples()
        .iter()
        .zip(b.samples())
        .map(|(p, q)| ((p - q) * 255.0).powi(2))
        .sum::<f64>()
        / n)
}

/// `10·log10(255² / MSE)`; identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let mse = mse_8bit(a, b)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: usize, h: usize) -> Image {
        Image::new(
            w,
            h,
            1,
            (0..w * h)
                .map(|i| ((i * 37) % 255) as f64 / 255.0)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn self_similarity_is_exact() {
        let x = gradient(20, 16);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        assert_eq!(dssim(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn ssim_rejects_small_or_mismatched() {
        let x = gradient(10, 20);
        assert!(ssim(&x, &x).is_err());
        assert!(ssim(&gradient(12, 12), &gradient(12, 13)).is_err());
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Image::filled(8, 8, 3, 0.2).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = Image::filled(8, 8, 3, 0.2 + 1.0 / 255.0).unwrap();
        let expected = 20.0 * 255.0f64.log10();
        assert!((psnr(&a, &b).unwrap() - expected).abs() < 1e-9);
        assert!((expected - 48.13).abs() < 0.01);
    }

    #[test]
    fn color_ssim_uses_luminance() {
        let g = gradient(16, 16);
        let rgb = Image::new(
            16,
            16,
            3,
            g.samples().iter().flat_map(|&v| [v, v, v]).collect(),
        )
        .unwrap();
        let g2 = crate::baselines::mosaic(&g, 4);
        let rgb2 = crate::baselines::mosaic(&rgb, 4);
        let a = ssim(&g, &g2).unwrap();
        let b = ssim(&rgb, &rgb2).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
