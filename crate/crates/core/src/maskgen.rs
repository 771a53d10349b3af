//! Free-form random mask generation (RMG).
//!
//! A mask is a union of brush strokes. Each stroke starts at a uniform pixel,
//! walks `v ∈ [min_vertex, max_vertex]` segments whose heading turns by a
//! uniform delta in `[-max_angle, max_angle]` and whose length is uniform in
//! `(0, max_length]`, and is painted with a brush of integer width uniform in
//! `[min_brush_width, max_brush_width]`. Painting stamps a disc at every
//! integer point along each segment; a pixel `(x, y)` is inside the disc
//! centred at `(cx, cy)` iff `4·((x-cx)² + (y-cy)²) <= width²`. All coverage
//! decisions are integer arithmetic, so masks are bit-stable.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Mask;
use crate::rng::{stream_rng, Rng, STREAM_PARAMS, STREAM_STROKES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmgParams {
    pub min_vertex: u32,
    pub max_vertex: u32,
    pub max_length: f64,
    pub max_brush_width: u32,
    /// Radians.
    pub max_angle: f64,
    pub strokes: u32,
    pub min_brush_width: u32,
}

impl RmgParams {
    /// Parameters with the derived defaults `strokes = 4` and
    /// `min_brush_width = max(2, b / 3)` (capped at `b`).
    pub fn new(
        min_vertex: u32,
        max_vertex: u32,
        max_length: f64,
        max_brush_width: u32,
        max_angle: f64,
    ) -> Self {
        Self {
            min_vertex,
            max_vertex,
            max_length,
            max_brush_width,
            max_angle,
            strokes: 4,
            min_brush_width: default_min_brush(max_brush_width),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(format!("rmg: {what} ({self:?})")));
        if self.min_vertex > self.max_vertex {
            return bad("min_vertex > max_vertex");
        }
        if !(self.max_length > 0.0) || !self.max_length.is_finite() {
            return bad("max_length must be positive");
        }
        if self.min_brush_width == 0 || self.min_brush_width > self.max_brush_width {
            return bad("need 0 < min_brush_width <= max_brush_width");
        }
        if !(0.0..=std::f64::consts::PI).contains(&self.max_angle) {
            return bad("max_angle outside [0, pi]");
        }
        if self.strokes == 0 {
            return bad("strokes must be >= 1");
        }
        Ok(())
    }
}

fn default_min_brush(max_brush_width: u32) -> u32 {
    (max_brush_width / 3).max(2).min(max_brush_width)
}

/// Inclusive `[lo, hi]` range, serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[T; 2]", into = "[T; 2]")]
pub struct Span<T: Copy> {
    pub lo: T,
    pub hi: T,
}

impl<T: Copy> Span<T> {
    pub const fn new(lo: T, hi: T) -> Self {
        Self { lo, hi }
    }
}

impl<T: Copy> From<[T; 2]> for Span<T> {
    fn from([lo, hi]: [T; 2]) -> Self {
        Self { lo, hi }
    }
}

impl<T: Copy> From<Span<T>> for [T; 2] {
    fn from(s: Span<T>) -> Self {
        [s.lo, s.hi]
    }
}

/// Ranges from which per-candidate [`RmgParams`] are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmgRanges {
    pub min_vertex: Span<u32>,
    pub max_vertex: Span<u32>,
    pub max_length: Span<f64>,
    pub max_brush_width: Span<u32>,
    pub max_angle: Span<f64>,
    #[serde(default = "default_strokes")]
    pub strokes: Span<u32>,
    /// When absent, each draw uses `max(2, b / 3)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_brush_width: Option<Span<u32>>,
}

fn default_strokes() -> Span<u32> {
    Span::new(4, 4)
}

impl RmgRanges {
    /// Broad ranges covering the whole 0.01–0.6 level spectrum; used with
    /// [`rmg_in_band`] to emulate the six hole-ratio levels.
    pub fn levels(width: usize, height: usize) -> Self {
        let s = width.min(height) as f64;
        Self {
            min_vertex: Span::new(1, 4),
            max_vertex: Span::new(4, 12),
            max_length: Span::new(s / 8.0, s / 2.5),
            max_brush_width: Span::new(((s / 16.0) as u32).max(2), ((s / 4.0) as u32).max(3)),
            max_angle: Span::new(0.5, 2.5),
            strokes: Span::new(1, 10),
            min_brush_width: None,
        }
    }

    /// Heavy-coverage ranges for the desensitization search, where the
    /// critical template, not the strokes, decides what stays visible.
    pub fn search(width: usize, height: usize) -> Self {
        let s = width.min(height) as f64;
        Self {
            min_vertex: Span::new(4, 8),
            max_vertex: Span::new(8, 14),
            max_length: Span::new(s / 3.0, s / 1.5),
            max_brush_width: Span::new(((s / 4.0) as u32).max(3), ((s / 2.0) as u32).max(4)),
            max_angle: Span::new(1.0, std::f64::consts::PI),
            strokes: Span::new(8, 16),
            min_brush_width: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(format!("rmg ranges: {what}")));
        if self.min_vertex.lo > self.min_vertex.hi
            || self.max_vertex.lo > self.max_vertex.hi
            || self.max_brush_width.lo > self.max_brush_width.hi
            || self.strokes.lo > self.strokes.hi
            || !(self.max_length.lo <= self.max_length.hi)
            || !(self.max_angle.lo <= self.max_angle.hi)
        {
            return bad("empty range");
        }
        if self.min_vertex.hi > self.max_vertex.hi {
            return bad("min_vertex may exceed every max_vertex");
        }
        if !(self.max_length.lo > 0.0) || self.max_brush_width.lo == 0 || self.strokes.lo == 0 {
            return bad("lengths, widths and stroke counts must be positive");
        }
        if self.max_angle.lo < 0.0 || self.max_angle.hi > std::f64::consts::PI {
            return bad("max_angle outside [0, pi]");
        }
        if let Some(mb) = self.min_brush_width {
            if mb.lo == 0 || mb.lo > mb.hi || mb.lo > self.max_brush_width.hi {
                return bad("min_brush_width range");
            }
        }
        Ok(())
    }

    /// Draws one parameter set. `max_vertex` is lifted to at least the drawn
    /// `min_vertex`, and `min_brush_width` is capped at the drawn brush width.
    pub fn draw(&self, rng: &mut Rng) -> RmgParams {
        let min_vertex = rng.gen_range(self.min_vertex.lo..=self.min_vertex.hi);
        let max_vertex = rng
            .gen_range(self.max_vertex.lo..=self.max_vertex.hi)
            .max(min_vertex);
        let max_length = rng.gen_range(self.max_length.lo..=self.max_length.hi);
        let max_brush_width = rng.gen_range(self.max_brush_width.lo..=self.max_brush_width.hi);
        let max_angle = rng.gen_range(self.max_angle.lo..=self.max_angle.hi);
        let strokes = rng.gen_range(self.strokes.lo..=self.strokes.hi);
        let min_brush_width = match self.min_brush_width {
            Some(mb) => rng.gen_range(mb.lo..=mb.hi).min(max_brush_width),
            None => default_min_brush(max_brush_width),
        };
        RmgParams {
            min_vertex,
            max_vertex,
            max_length,
            max_brush_width,
            max_angle,
            strokes,
            min_brush_width,
        }
    }

    /// Parameters of search candidate `seed` (drawn on the parameter stream).
    pub fn draw_for_seed(&self, seed: u64) -> RmgParams {
        self.draw(&mut stream_rng(seed, STREAM_PARAMS))
    }
}

/// One brush stroke: integer vertices (start point first) and brush width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stroke {
    pub width: u32,
    pub vertices: Vec<(i64, i64)>,
}

impl Stroke {
    /// Disc centres along the polyline, one per unit step of the dominant
    /// axis, endpoints included.
    pub fn stamp_centers(&self) -> Vec<(i64, i64)> {
        let mut out = Vec::new();
        for seg in self.vertices.windows(2) {
            let ((x0, y0), (x1, y1)) = (seg[0], seg[1]);
            let (dx, dy) = (x1 - x0, y1 - y0);
            let steps = dx.abs().max(dy.abs());
            if steps == 0 {
                out.push((x0, y0));
                continue;
            }
            for t in 0..=steps {
                out.push((x0 + div_round(t * dx, steps), y0 + div_round(t * dy, steps)));
            }
        }
        out.dedup();
        out
    }
}

/// `a / b` rounded half up, for `b > 0`.
fn div_round(a: i64, b: i64) -> i64 {
    (2 * a + b).div_euclid(2 * b)
}

/// Generates the stroke list for `(params, width, height, seed)`.
pub fn rmg_strokes(
    params: &RmgParams,
    width: usize,
    height: usize,
    seed: u64,
) -> Result<Vec<Stroke>> {
    params.validate()?;
    if width == 0 || height == 0 {
        return Err(Error::InvalidParameter("rmg: empty canvas".into()));
    }
    let mut rng = stream_rng(seed, STREAM_STROKES);
    let mut strokes = Vec::with_capacity(params.strokes as usize);
    for _ in 0..params.strokes {
        let mut x = rng.gen_range(0..width as i64);
        let mut y = rng.gen_range(0..height as i64);
        let width_px = rng.gen_range(params.min_brush_width..=params.max_brush_width);
        let n_vertex = rng.gen_range(params.min_vertex..=params.max_vertex);
        let mut heading = rng.gen_range(0.0..std::f64::consts::TAU);
        if n_vertex == 0 {
            continue;
        }
        let mut vertices = vec![(x, y)];
        for _ in 0..n_vertex {
            heading += rng.gen_range(-params.max_angle..=params.max_angle);
            // (0, l]
            let length = params.max_length * (1.0 - rng.gen::<f64>());
            x += (length * heading.cos()).round() as i64;
            y += (length * heading.sin()).round() as i64;
            vertices.push((x, y));
        }
        strokes.push(Stroke {
            width: width_px,
            vertices,
        });
    }
    Ok(strokes)
}

/// Paints strokes onto an all-keep mask, clipping at the borders.
pub fn rasterize(strokes: &[Stroke], width: usize, height: usize) -> Mask {
    let mut mask = Mask::ones(width, height);
    let (w, h) = (width as i64, height as i64);
    for stroke in strokes {
        let wsq = i64::from(stroke.width).pow(2);
        let reach = i64::from(stroke.width) / 2;
        for (cx, cy) in stroke.stamp_centers() {
            let (x0, x1) = ((cx - reach).max(0), (cx + reach).min(w - 1));
            let (y0, y1) = ((cy - reach).max(0), (cy + reach).min(h - 1));
            for y in y0..=y1 {
                let dy2 = (y - cy).pow(2);
                for x in x0..=x1 {
                    if 4 * ((x - cx).pow(2) + dy2) <= wsq {
                        mask.set(x as usize, y as usize, false);
                    }
                }
            }
        }
    }
    mask
}

/// Random free-form mask, strokes masked (0) and everything else kept.
pub fn rmg(params: &RmgParams, width: usize, height: usize, seed: u64) -> Result<Mask> {
    Ok(rasterize(
        &rmg_strokes(params, width, height, seed)?,
        width,
        height,
    ))
}

/// Candidate combination `m_r + S` read with clamping: a pixel is kept if the
/// random mask or the critical template keeps it.
pub fn combine(random: &Mask, template: &Mask) -> Result<Mask> {
    if random.dims() != template.dims() {
        return Err(Error::size(random.dims(), template.dims()));
    }
    let bits = random
        .bits()
        .iter()
        .zip(template.bits())
        .map(|(&r, &s)| r || s)
        .collect();
    Mask::new(random.width(), random.height(), bits)
}

/// Fraction of masked pixels.
pub fn masked_ratio(mask: &Mask) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    mask.masked() as f64 / mask.len() as f64
}

/// Level `k ∈ 1..=6` with ratio in `(max(0.1(k-1), 0.01), 0.1k]`, decided
/// with exact integer arithmetic on the pixel counts.
pub fn classify_level(mask: &Mask) -> Result<u8> {
    let (m, n) = (mask.masked(), mask.len());
    if 100 * m <= n || 10 * m > 6 * n {
        return Err(Error::OutOfBand(masked_ratio(mask)));
    }
    Ok((1..=6u8)
        .find(|&k| 10 * m <= k as usize * n)
        .expect("bounded above by level 6"))
}

/// The `(lo, hi)` ratio band of level `k`.
pub fn level_band(level: u8) -> (f64, f64) {
    let lo = if level <= 1 {
        0.01
    } else {
        0.1 * f64::from(level - 1)
    };
    (lo, 0.1 * f64::from(level))
}

/// A mask accepted by [`rmg_in_band`].
#[derive(Debug, Clone, PartialEq)]
pub struct InBandMask {
    pub mask: Mask,
    pub params: RmgParams,
    /// Seed handed to [`rmg`] for the accepted attempt.
    pub mask_seed: u64,
    /// 1-based attempt number.
    pub attempts: usize,
}

/// Rejection-samples a mask whose masked ratio lies in `[lo, hi]`.
///
/// Attempt `k` draws its parameters and mask seed from ChaCha stream `k` of
/// `seed`, so each attempt is reproducible on its own.
pub fn rmg_in_band(
    ranges: &RmgRanges,
    band: (f64, f64),
    width: usize,
    height: usize,
    seed: u64,
    max_attempts: usize,
) -> Result<InBandMask> {
    let (lo, hi) = band;
    if !(0.0 <= lo && lo < hi && hi <= 1.0) {
        return Err(Error::InvalidParameter(format!("band [{lo}, {hi}]")));
    }
    ranges.validate()?;
    for attempt in 0..max_attempts {
        let mut rng = stream_rng(seed, attempt as u64);
        let params = ranges.draw(&mut rng);
        let mask_seed: u64 = rng.gen();
        let mask = rmg(&params, width, height, mask_seed)?;
        let ratio = masked_ratio(&mask);
        if (lo..=hi).contains(&ratio) {
            return Ok(InBandMask {
                mask,
                params,
                mask_seed,
                attempts: attempt + 1,
            });
        }
    }
    Err(Error::BandUnreachable {
        lo,
        hi,
        attempts: max_attempts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params() -> RmgParams {
        RmgParams::new(2, 6, 20.0, 8, 1.5)
    }

    #[test]
    fn zero_vertices_leave_mask_clear() {
        let mut p = params();
        p.min_vertex = 0;
        p.max_vertex = 0;
        let m = rmg(&p, 32, 32, 3).unwrap();
        assert_eq!(m, Mask::ones(32, 32));
        assert_eq!(masked_ratio(&m), 0.0);
    }

    #[test]
    fn rmg_is_deterministic() {
        let a = rmg(&params(), 64, 48, 99).unwrap();
        let b = rmg(&params(), 64, 48, 99).unwrap();
        assert_eq!(a, b);
        assert!(a.masked() > 0);
        assert_ne!(a, rmg(&params(), 64, 48, 100).unwrap());
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = params();
        p.min_vertex = 9;
        assert!(rmg(&p, 8, 8, 0).is_err());
        let mut p = params();
        p.min_brush_width = 0;
        assert!(p.validate().is_err());
        let mut p = params();
        p.max_angle = 4.0;
        assert!(p.validate().is_err());
        assert!(rmg(&params(), 0, 8, 0).is_err());
    }

    #[test]
    fn default_min_brush_width() {
        assert_eq!(RmgParams::new(1, 2, 5.0, 12, 1.0).min_brush_width, 4);
        assert_eq!(RmgParams::new(1, 2, 5.0, 4, 1.0).min_brush_width, 2);
        assert_eq!(RmgParams::new(1, 2, 5.0, 1, 1.0).min_brush_width, 1);
    }

    #[test]
    fn width_one_brush_paints_single_pixels() {
        let s = Stroke {
            width: 1,
            vertices: vec![(0, 0), (3, 0)],
        };
        let m = rasterize(&[s], 5, 2);
        assert_eq!(m.masked(), 4);
    }

    #[test]
    fn stamp_centers_walk_unit_steps() {
        let s = Stroke {
            width: 3,
            vertices: vec![(0, 0), (4, 2), (4, 2)],
        };
        assert_eq!(
            s.stamp_centers(),
            vec![(0, 0), (1, 1), (2, 1), (3, 2), (4, 2)]
        );
    }

    #[test]
    fn combine_truth_table() {
        let r = Mask::new(3, 1, vec![false, false, true]).unwrap();
        let s = Mask::new(3, 1, vec![true, false, false]).unwrap();
        assert_eq!(combine(&r, &s).unwrap().bits(), &[true, false, true]);
        assert_eq!(combine(&r, &Mask::ones(3, 1)).unwrap(), Mask::ones(3, 1));
        assert_eq!(combine(&r, &Mask::zeros(3, 1)).unwrap(), r);
        assert!(combine(&r, &Mask::ones(2, 1)).is_err());
    }

    #[test]
    fn ratio_arithmetic() {
        assert_eq!(masked_ratio(&Mask::ones(7, 3)), 0.0);
        assert_eq!(masked_ratio(&Mask::zeros(7, 3)), 1.0);
        let mut bits = vec![true; 224 * 224];
        bits[..12544].iter_mut().for_each(|b| *b = false);
        assert_eq!(masked_ratio(&Mask::new(224, 224, bits).unwrap()), 0.25);
    }

    fn mask_with_masked(n: usize, masked: usize) -> Mask {
        let bits = (0..n).map(|i| i >= masked).collect();
        Mask::new(n, 1, bits).unwrap()
    }

    #[test]
    fn level_classification() {
        assert_eq!(classify_level(&mask_with_masked(100, 5)).unwrap(), 1);
        assert_eq!(classify_level(&mask_with_masked(100, 55)).unwrap(), 6);
        assert_eq!(classify_level(&mask_with_masked(100, 10)).unwrap(), 1);
        assert_eq!(classify_level(&mask_with_masked(100, 11)).unwrap(), 2);
        assert_eq!(classify_level(&mask_with_masked(100, 30)).unwrap(), 3);
        assert_eq!(classify_level(&mask_with_masked(100, 60)).unwrap(), 6);
        assert!(matches!(
            classify_level(&mask_with_masked(100, 65)),
            Err(Error::OutOfBand(_))
        ));
        assert!(matches!(
            classify_level(&mask_with_masked(100, 1)),
            Err(Error::OutOfBand(_))
        ));
        assert_eq!(level_band(1), (0.01, 0.1));
        assert_eq!(level_band(6).0, 0.5);
    }

    #[test]
    fn band_full_range_accepts_first_attempt() {
        let r = RmgRanges::levels(64, 64);
        let got = rmg_in_band(&r, (0.0, 1.0), 64, 64, 11, 1).unwrap();
        assert_eq!(got.attempts, 1);
    }

    #[test]
    fn band_hit_matches_recomputed_ratio() {
        let r = RmgRanges::levels(64, 64);
        let got = rmg_in_band(&r, (0.4, 0.5), 64, 64, 7, 2000).unwrap();
        let bytes = crate::netpbm::write_mask(&got.mask);
        let ratio = masked_ratio(&crate::netpbm::read_mask(&bytes).unwrap());
        assert!((0.4..=0.5).contains(&ratio));
        assert_eq!(rmg(&got.params, 64, 64, got.mask_seed).unwrap(), got.mask);
    }

    #[test]
    fn unreachable_band_errors() {
        let r = RmgRanges {
            min_vertex: Span::new(1, 1),
            max_vertex: Span::new(1, 2),
            max_length: Span::new(2.0, 3.0),
            max_brush_width: Span::new(1, 2),
            max_angle: Span::new(0.1, 0.2),
            strokes: Span::new(1, 1),
            min_brush_width: None,
        };
        let err = rmg_in_band(&r, (0.99, 1.0), 64, 64, 1, 3).unwrap_err();
        assert!(matches!(err, Error::BandUnreachable { attempts: 3, .. }));
    }

    #[test]
    fn ranges_round_trip_json() {
        let r = RmgRanges::search(64, 64);
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"min_vertex\":[4,8]"));
        let back: RmgRanges = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #[test]
        fn combine_never_masks_template(seed in any::<u64>(), tseed in any::<u64>()) {
            let m = rmg(&params(), 24, 24, seed).unwrap();
            let s = rmg(&params(), 24, 24, tseed).unwrap();
            let c = combine(&m, &s).unwrap();
            prop_assert!(s.is_subset_of(&c));
            prop_assert!(masked_ratio(&c) <= masked_ratio(&m));
        }

        #[test]
        fn strokes_are_clipped(seed in any::<u64>()) {
            // A huge brush near the border must not panic or wrap around.
            let p = RmgParams::new(1, 3, 80.0, 40, 3.0);
            let m = rmg(&p, 16, 9, seed).unwrap();
            prop_assert_eq!(m.len(), 144);
        }

        #[test]
        fn drawn_params_are_valid(seed in any::<u64>()) {
            let r = RmgRanges::levels(64, 64);
            prop_assert!(r.draw_for_seed(seed).validate().is_ok());
            let r = RmgRanges::search(32, 32);
            prop_assert!(r.draw_for_seed(seed).validate().is_ok());
        }
    }
}
