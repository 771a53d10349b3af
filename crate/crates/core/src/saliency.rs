//! Saliency maps, the mean saliency map (MSM) and the critical template.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netpbm::{self, Encoding, Pnm};
use crate::raster::{Image, Mask};

/// Per-pixel importance in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::InvalidParameter(format!(
                "{} values do not fill a {width}x{height} saliency map",
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidParameter("saliency outside [0, 1]".into()));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    /// Scales non-negative raw scores so the maximum becomes exactly 1; an
    /// all-zero input stays all-zero.
    pub fn from_raw(width: usize, height: usize, raw: Vec<f64>) -> Result<Self> {
        let max = raw.iter().copied().fold(0.0f64, f64::max);
        if raw.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "raw saliency must be finite and >= 0".into(),
            ));
        }
        let values = if max > 0.0 {
            raw.iter().map(|v| v / max).collect()
        } else {
            raw
        };
        Self::new(width, height, values)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Rescaled so the largest value is 1; an all-zero map stays zero.
    pub fn normalized(&self) -> SaliencyMap {
        let max = self.max();
        if max == 0.0 || max == 1.0 {
            return self.clone();
        }
        SaliencyMap {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|v| v / max).collect(),
        }
    }

    /// Stored as P5 with `round(v * 255)`.
    pub fn to_pgm(&self) -> Vec<u8> {
        netpbm::encode(&Pnm {
            width: self.width,
            height: self.height,
            channels: 1,
            encoding: Encoding::Binary,
            samples: self
                .values
                .iter()
                .map(|v| (v * 255.0).round() as u8)
                .collect(),
        })
    }

    /// Reads a grayscale NetPBM as `value / 255`.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let img = netpbm::read_image(bytes)?;
        if img.channels() != 1 {
            return Err(netpbm::NetpbmError::ChannelMismatch {
                expected: 1,
                found: img.channels(),
            }
            .into());
        }
        Self::new(img.width(), img.height(), img.samples().to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MsmConfig {
    /// Number of sampled images.
    #[serde(rename = "K")]
    pub k: usize,
    /// Binarization threshold `T`; a pixel is critical iff its smoothed mean
    /// saliency, relative to the peak, exceeds it strictly.
    #[serde(rename = "T")]
    pub threshold: f64,
    pub smoothing_radius: usize,
}

impl Default for MsmConfig {
    fn default() -> Self {
        Self {
            k: 64,
            threshold: 0.5,
            smoothing_radius: 3,
        }
    }
}

impl MsmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidParameter("msm: K must be >= 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "msm: T = {} outside (0, 1)",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Anything that maps an image to a saliency map.
pub trait SaliencyProvider {
    type Error: From<Error>;

    fn saliency(&mut self, image: &Image) -> Result<SaliencyMap, Self::Error>;

    /// Short label recorded in reports.
    fn source(&self) -> String;
}

/// Serves maps loaded ahead of time, in request order.
#[derive(Debug, Clone)]
pub struct PrecomputedSaliency {
    maps: Vec<SaliencyMap>,
    next: usize,
    label: String,
}

impl PrecomputedSaliency {
    pub fn new(maps: Vec<SaliencyMap>, label: impl Into<String>) -> Self {
        Self {
            maps,
            next: 0,
            label: label.into(),
        }
    }
}

impl SaliencyProvider for PrecomputedSaliency {
    type Error = Error;

    fn saliency(&mut self, image: &Image) -> Result<SaliencyMap> {
        let map = self
            .maps
            .get(self.next % self.maps.len().max(1))
            .ok_or(Error::Empty("precomputed saliency maps"))?
            .clone();
        self.next += 1;
        if map.dims() != image.dims() {
            return Err(Error::size(image.dims(), map.dims()));
        }
        Ok(map)
    }

    fn source(&self) -> String {
        self.label.clone()
    }
}

/// Element-wise mean, accumulated in index order.
pub fn mean_saliency(maps: &[SaliencyMap]) -> Result<SaliencyMap> {
    let first = maps.first().ok_or(Error::Empty("saliency maps"))?;
    let mut acc = vec![0.0f64; first.values.len()];
    for m in maps {
        if m.dims() != first.dims() {
            return Err(Error::size(first.dims(), m.dims()));
        }
        for (a, v) in acc.iter_mut().zip(&m.values) {
            *a += v;
        }
    }
    let k = maps.len() as f64;
    // the mean of values in [0,1] stays in [0,1] up to rounding
    let values = acc.into_iter().map(|a| (a / k).clamp(0.0, 1.0)).collect();
    SaliencyMap::new(first.width, first.height, values)
}

/// Mean over a `(2r+1)²` box clipped at the borders.
pub fn box_smooth(map: &SaliencyMap, radius: usize) -> SaliencyMap {
    if radius == 0 {
        return map.clone();
    }
    let (w, h) = map.dims();
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(h - 1));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(w - 1));
            let mut sum = 0.0;
            for yy in y0..=y1 {
                sum += map.values[yy * w + x0..=yy * w + x1].iter().sum::<f64>();
            }
            out[y * w + x] = (sum / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64).clamp(0.0, 1.0);
        }
    }
    SaliencyMap {
        width: w,
        height: h,
        values: out,
    }
}

/// The critical template: optional smoothing, rescaling to unit maximum
/// (so `T` is relative to the strongest mean saliency), then keep iff
/// value > T.
pub fn binarize(msm: &SaliencyMap, cfg: &MsmConfig) -> Mask {
    let smoothed = box_smooth(msm, cfg.smoothing_radius).normalized();
    let bits = smoothed.values.iter().map(|&v| v > cfg.threshold).collect();
    Mask::new(msm.width, msm.height, bits).expect("dims preserved")
}

/// MSM over the given images and its binarized template.
pub fn build_template<P: SaliencyProvider>(
    provider: &mut P,
    images: &[&Image],
    cfg: &MsmConfig,
) -> Result<(SaliencyMap, Mask), P::Error> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Empty("template images").into());
    }
    let maps = images
        .iter()
        .map(|img| provider.saliency(img))
        .collect::<Result<Vec<_>, _>>()?;
    let msm = mean_saliency(&maps)?;
    let template = binarize(&msm, cfg);
    Ok((msm, template))
}
