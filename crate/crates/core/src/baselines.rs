//! Global desensitizers used for comparison: Gaussian blur and mosaic.

use crate::raster::Image;

/// `σ = 0.3·((k−1)·0.5 − 1) + 0.8`, the usual choice when only the kernel
/// size is given.
pub fn sigma_for_kernel(k: usize) -> f64 {
    0.3 * ((k as f64 - 1.0) * 0.5 - 1.0) + 0.8
}

/// Normalized 1-D Gaussian taps for kernel size `k`, centred at `(k−1)/2`.
/// Even sizes therefore have symmetric half-integer offsets.
pub fn gaussian_kernel(k: usize) -> Vec<f64> {
    assert!(k >= 1, "kernel size must be >= 1");
    let sigma = sigma_for_kernel(k);
    let centre = (k as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..k)
        .map(|i| {
            let d = i as f64 - centre;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable Gaussian blur with replicate-edge padding. Tap `i` reads the
/// sample at offset `i − ⌊(k−1)/2⌋`.
pub fn gaussian_blur(image: &Image, k: usize) -> Image {
    let taps = gaussian_kernel(k);
    let anchor = ((k - 1) / 2) as isize;
    let (w, h, ch) = (image.width(), image.height(), image.channels());
    let src = image.samples();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (i, t) in taps.iter().enumerate() {
                    let xx = clampi(x as isize + i as isize - anchor, w);
                    acc += t * src[(y * w + xx) * ch + c];
                }
                tmp[(y * w + x) * ch + c] = acc;
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (i, t) in taps.iter().enumerate() {
                    let yy = clampi(y as isize + i as isize - anchor, h);
                    acc += t * tmp[(yy * w + x) * ch + c];
                }
                out[(y * w + x) * ch + c] = acc.clamp(0.0, 1.0);
            }
        }
    }
    image.with_samples(out)
}

/// Pixelation over non-overlapping `k×k` cells; ragged edge cells average
/// over the pixels they actually cover.
pub fn mosaic(image: &Image, k: usize) -> Image {
    assert!(k >= 1, "kernel size must be >= 1");
    let (w, h, ch) = (image.width(), image.height(), image.channels());
    let src = image.samples();
    let mut out = vec![0.0; src.len()];
    for cy in (0..h).step_by(k) {
        for cx in (0..w).step_by(k) {
            let (y1, x1) = ((cy + k).min(h), (cx + k).min(w));
            let n = ((y1 - cy) * (x1 - cx)) as f64;
            for c in 0..ch {
                let (mut sum, mut lo, mut hi) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
                for y in cy..y1 {
                    for x in cx..x1 {
                        let v = src[(y * w + x) * ch + c];
                        sum += v;
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                // a constant cell keeps its exact value, so mosaic is idempotent
                let mean = if lo == hi {
                    lo
                } else {
                    (sum / n).clamp(lo, hi)
                };
                for y in cy..y1 {
                    for x in cx..x1 {
                        out[(y * w + x) * ch + c] = mean;
                    }
                }
            }
        }
    }
    image.with_samples(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn noise(w: usize, h: usize, ch: usize, seed: u64) -> Image {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        let v = (0..w * h * ch)
            .map(|_| {
                s = s
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect();
        Image::new(w, h, ch, v).unwrap()
    }

    #[test]
    fn kernels_sum_to_one() {
        for k in 1..=25 {
            let s: f64 = gaussian_kernel(k).iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "k={k}");
        }
        assert_eq!(gaussian_kernel(1), vec![1.0]);
    }

    #[test]
    fn blur_preserves_constant() {
        let img = Image::filled(13, 9, 3, 0.37).unwrap();
        for k in [1, 3, 9, 18, 19] {
            let out = gaussian_blur(&img, k);
            assert!(out.samples().iter().all(|v| (v - 0.37).abs() < 1e-12));
        }
    }

    #[test]
    fn blur_impulse_matches_closed_form_stencil() {
        let mut v = vec![0.0; 25];
        v[12] = 1.0;
        let img = Image::new(5, 5, 1, v).unwrap();
        let out = gaussian_blur(&img, 3);
        // σ(3) = 0.8; taps ∝ exp(-d²/(2σ²)) for d ∈ {-1, 0, 1}
        let sigma: f64 = 0.8;
        let e = (-1.0 / (2.0 * sigma * sigma)).exp();
        let t = [
            e / (1.0 + 2.0 * e),
            1.0 / (1.0 + 2.0 * e),
            e / (1.0 + 2.0 * e),
        ];
        for y in 0..5 {
            for x in 0..5 {
                let (dy, dx) = (y as isize - 2, x as isize - 2);
                let expected = if dy.abs() <= 1 && dx.abs() <= 1 {
                    t[(dy + 1) as usize] * t[(dx + 1) as usize]
                } else {
                    0.0
                };
                assert!((out.get(x, y, 0) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn blur_preserves_mean_along_constant_axis() {
        // rows vary only in y: the horizontal pass is exact, and the
        // vertical profile is symmetric about the centre
        let profile = [0.1, 0.5, 0.9, 0.9, 0.5, 0.1];
        let v = (0..24).map(|i| profile[i / 4]).collect();
        let img = Image::new(4, 6, 1, v).unwrap();
        let out = gaussian_blur(&img, 3);
        let mean = |i: &Image| i.samples().iter().sum::<f64>() / 24.0;
        assert!((mean(&out) - mean(&img)).abs() < 1e-9);
        for x in 1..4 {
            assert_eq!(out.get(x, 2, 0), out.get(0, 2, 0));
        }
    }

    #[test]
    fn mosaic_cases() {
        let img = noise(7, 5, 3, 1);
        assert_eq!(mosaic(&img, 1), img);
        let c = Image::filled(9, 9, 1, 0.6).unwrap();
        assert!(mosaic(&c, 4)
            .samples()
            .iter()
            .all(|v| (v - 0.6).abs() < 1e-15));
        let chk = Image::new(2, 2, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(mosaic(&chk, 2).samples(), &[0.5; 4]);
    }

    #[test]
    fn mosaic_ragged_cells() {
        let img = Image::new(3, 1, 1, vec![0.2, 0.4, 1.0]).unwrap();
        let out = mosaic(&img, 2);
        assert!((out.samples()[0] - 0.3).abs() < 1e-15);
        assert_eq!(out.samples()[2], 1.0);
    }

    proptest! {
        #[test]
        fn mosaic_mean_and_idempotence(seed in any::<u64>(), k in 1usize..5) {
            let img = noise(4 * k, 3 * k, 1, seed);
            let once = mosaic(&img, k);
            let n = img.samples().len() as f64;
            let m0 = img.samples().iter().sum::<f64>() / n;
            let m1 = once.samples().iter().sum::<f64>() / n;
            prop_assert!((m0 - m1).abs() < 1e-9);
            prop_assert_eq!(mosaic(&once, k), once);
        }

        #[test]
        fn blur_stays_in_range(seed in any::<u64>(), k in 1usize..20) {
            let img = noise(11, 8, 3, seed);
            let (lo, hi) = img.samples().iter().fold((1.0f64, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
            let out = gaussian_blur(&img, k);
            for &v in out.samples() {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}
