//! Seeded synthetic "identity" images.
//!
//! Every class is a face-like arrangement of soft shapes (head, eyes, brows,
//! nose, mouth and two marks) whose geometry and shading come from the class
//! seed. Individual images add pose jitter, lighting, a background ramp and
//! pixel noise. Images are aligned, so identity cues concentrate in a fixed
//! central region, much like cropped and aligned face sets.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::raster::Image;
use crate::rng::{stream_rng, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    /// Side length in pixels.
    pub size: usize,
    pub seed: u64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Maximum pose shift in pixels at 64×64 (scaled with `size`).
    pub jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 80,
            size: 64,
            seed: 0,
            noise: 0.05,
            jitter: 2.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Identity {
    skin: f64,
    head: (f64, f64),
    eye_dx: f64,
    eye_y: f64,
    eye_r: (f64, f64),
    eye_shade: f64,
    brow_gap: f64,
    brow_tilt: f64,
    brow_shade: f64,
    nose_len: f64,
    nose_w: f64,
    nose_shade: f64,
    mouth_y: f64,
    mouth_w: f64,
    mouth_h: f64,
    mouth_shade: f64,
    marks: [(f64, f64, f64); 2],
}

impl Identity {
    fn draw(rng: &mut Rng) -> Self {
        let mut u = |lo: f64, hi: f64| rng.gen_range(lo..hi);
        Self {
            skin: u(0.5, 0.75),
            head: (u(17.0, 22.0), u(21.0, 26.0)),
            eye_dx: u(6.5, 11.5),
            eye_y: u(22.0, 28.0),
            eye_r: (u(2.0, 4.2), u(1.2, 3.0)),
            eye_shade: u(0.0, 0.3),
            brow_gap: u(3.0, 5.5),
            brow_tilt: u(-0.45, 0.45),
            brow_shade: u(0.05, 0.4),
            nose_len: u(5.0, 12.0),
            nose_w: u(1.0, 3.0),
            nose_shade: u(0.25, 0.5),
            mouth_y: u(41.0, 48.0),
            mouth_w: u(5.0, 13.0),
            mouth_h: u(1.2, 3.0),
            mouth_shade: u(0.05, 0.35),
            marks: [
                (u(-12.0, 12.0), u(16.0, 50.0), u(0.0, 1.0)),
                (u(-12.0, 12.0), u(16.0, 50.0), u(0.0, 1.0)),
            ],
        }
    }
}

/// Coverage of a soft-edged ellipse at normalized distance.
fn ellipse(px: f64, py: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let d = (((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2)).sqrt();
    // ~1 px soft border
    ((1.0 - d) * rx.min(ry) + 0.5).clamp(0.0, 1.0)
}

/// Coverage of a thick segment.
fn segment(px: f64, py: f64, a: (f64, f64), b: (f64, f64), half: f64) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - px, a.1 + t * dy - py);
    (half - (qx * qx + qy * qy).sqrt() + 0.5).clamp(0.0, 1.0)
}

fn blend(base: f64, shade: f64, cover: f64) -> f64 {
    base + (shade - base) * cover
}

fn render(id: &Identity, cfg: &SynthConfig, rng: &mut Rng) -> Image {
    let s = cfg.size as f64 / 64.0;
    let mut u = |lo: f64, hi: f64| rng.gen_range(lo..=hi);
    let (sx, sy) = (u(-cfg.jitter, cfg.jitter), u(-cfg.jitter, cfg.jitter));
    let scale = u(0.95, 1.05);
    let light = u(-0.08, 0.08);
    let contrast = u(0.9, 1.1);
    let bg = u(0.1, 0.35);
    let ramp_angle = u(0.0, std::f64::consts::TAU);
    let ramp = u(0.0, 0.2);
    let jit = |v: f64, amt: f64, u: &mut dyn FnMut(f64, f64) -> f64| v + u(-amt, amt);
    let eye_y = jit(id.eye_y, 0.8, &mut u);
    let mouth_w = jit(id.mouth_w, 1.0, &mut u);
    let eye_shade = jit(id.eye_shade, 0.05, &mut u);
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("finite sigma");

    let n = cfg.size;
    let mut samples = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            // canonical 64×64 face coordinates, centred on x = 32
            let px = ((x as f64 + 0.5) / s - 32.0 - sx) / scale;
            let py = ((y as f64 + 0.5) / s - 32.0 - sy) / scale + 32.0;
            let (rc, rs) = (ramp_angle.cos(), ramp_angle.sin());
            let mut v = bg + ramp * ((px * rc + (py - 32.0) * rs) / 32.0);
            v = blend(v, id.skin, ellipse(px, py, 0.0, 34.0, id.head.0, id.head.1));
            for side in [-1.0, 1.0] {
                let ex = side * id.eye_dx;
                v = blend(
                    v,
                    eye_shade,
                    ellipse(px, py, ex, eye_y, id.eye_r.0, id.eye_r.1),
                );
                let by = eye_y - id.eye_r.1 - id.brow_gap;
                let tilt = side * id.brow_tilt * 3.0;
                v = blend(
                    v,
                    id.brow_shade,
                    segment(px, py, (ex - 3.5, by - tilt), (ex + 3.5, by + tilt), 0.8),
                );
            }
            let nose_top = eye_y + 2.0;
            v = blend(
                v,
                id.nose_shade,
                segment(
                    px,
                    py,
                    (0.0, nose_top),
                    (0.0, nose_top + id.nose_len),
                    id.nose_w * 0.5,
                ),
            );
            v = blend(
                v,
                id.mouth_shade,
                ellipse(px, py, 0.0, id.mouth_y, mouth_w * 0.5, id.mouth_h),
            );
            for &(mx, my, shade) in &id.marks {
                v = blend(v, shade, ellipse(px, py, mx, my, 1.3, 1.3));
            }
            let lit = (v - 0.5) * contrast + 0.5 + light + noise.sample(rng);
            samples.push(lit.clamp(0.0, 1.0));
        }
    }
    Image::new(n, n, 1, samples).expect("valid raster")
}

/// Generates `classes × per_class` images, ordered class-major.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.classes == 0 || cfg.per_class == 0 || cfg.size < 16 {
        return Err(Error::InvalidParameter(format!("synth config {cfg:?}")));
    }
    let mut images = Vec::with_capacity(cfg.classes * cfg.per_class);
    let (mut labels, mut paths) = (Vec::new(), Vec::new());
    for class in 0..cfg.classes {
        let id = Identity::draw(&mut stream_rng(cfg.seed, 1 << 32 | class as u64));
        for i in 0..cfg.per_class {
            let mut rng = stream_rng(cfg.seed, ((class as u64) << 20) | i as u64);
            images.push(render(&id, cfg, &mut rng));
            labels.push(class);
            paths.push(format!("c{class:03}/{i:04}.pgm"));
        }
    }
    Dataset::new(images, labels, paths)
}
