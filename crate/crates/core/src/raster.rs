//! Image and mask value types.
//!
//! Masks use the keep convention: a `true` bit leaves the pixel visible, a
//! `false` bit blacks it out. Image samples live in `[0, 1]`, row-major,
//! channels interleaved.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    samples: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, samples: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidParameter(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if samples.len() != width * height * channels {
            return Err(Error::InvalidParameter(format!(
                "{} samples do not fill a {width}x{height}x{channels} image",
                samples.len()
            )));
        }
        if let Some(bad) = samples.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParameter(format!(
                "sample {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            samples,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(
            width,
            height,
            channels,
            vec![value; width * height * channels],
        )
    }

    /// Builds an image from 8-bit samples, mapping `v` to `v / 255`.
    pub fn from_u8(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            width,
            height,
            channels,
            bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        )
    }

    /// Quantizes back to 8 bits (`round(v * 255)`).
    pub fn to_u8(&self) -> Vec<u8> {
        self.samples
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.samples[(y * self.width + x) * self.channels + c]
    }

    /// Per-pixel channel mean, the luminance used by the metrics.
    pub fn luminance(&self) -> Vec<f64> {
        if self.channels == 1 {
            return self.samples.clone();
        }
        let c = self.channels as f64;
        self.samples
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f64>() / c)
            .collect()
    }

    pub(crate) fn with_samples(&self, samples: Vec<f64>) -> Self {
        debug_assert_eq!(samples.len(), self.samples.len());
        Self { samples, ..*self }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::InvalidParameter(format!(
                "{} bits do not fill a {width}x{height} mask",
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
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

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, keep: bool) {
        self.bits[y * self.width + x] = keep;
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn masked(&self) -> usize {
        self.len() - self.kept()
    }

    /// `self <= other` bitwise: every pixel kept here is kept in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dims() == other.dims() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Keep plane as 0/1 values, the FSM input.
    pub fn to_plane<T: From<u8>>(&self) -> Vec<T> {
        self.bits.iter().map(|&b| T::from(u8::from(b))).collect()
    }
}

/// Hadamard product `x ⊙ m`; masked pixels become exactly 0 in every channel.
pub fn apply_mask(image: &Image, mask: &Mask) -> Result<Image> {
    if image.dims() != mask.dims() {
        return Err(Error::size(image.dims(), mask.dims()));
    }
    let ch = image.channels;
    let samples = image
        .samples
        .chunks_exact(ch)
        .zip(&mask.bits)
        .flat_map(|(px, &keep)| px.iter().map(move |&v| if keep { v } else { 0.0 }))
        .collect();
    Ok(image.with_samples(samples))
}

/// Min-pool downsampling: an output cell is kept only if every source bit it
/// covers is kept.
pub fn downsample_mask_min(mask: &Mask, target_w: usize, target_h: usize) -> Result<Mask> {
    if target_w == 0
        || target_h == 0
        || !mask.width.is_multiple_of(target_w)
        || !mask.height.is_multiple_of(target_h)
    {
        return Err(Error::InvalidParameter(format!(
            "cannot min-pool {}x{} onto {target_w}x{target_h}",
            mask.width, mask.height
        )));
    }
    let (fx, fy) = (mask.width / target_w, mask.height / target_h);
    let mut bits = vec![true; target_w * target_h];
    for y in 0..mask.height {
        let row = &mask.bits[y * mask.width..(y + 1) * mask.width];
        let out_row = &mut bits[(y / fy) * target_w..(y / fy + 1) * target_w];
        for (x, &b) in row.iter().enumerate() {
            if !b {
                out_row[x / fx] = false;
            }
        }
    }
    Mask::new(target_w, target_h, bits)
}

/// Nearest-neighbour upsampling by an integer factor; the kept fraction is
/// unchanged.
pub fn upsample_mask(mask: &Mask, factor: usize) -> Result<Mask> {
    if factor == 0 {
        return Err(Error::InvalidParameter("upsampling factor 0".into()));
    }
    let (w, h) = (mask.width * factor, mask.height * factor);
    let bits = (0..w * h)
        .map(|i| mask.bits[(i / w / factor) * mask.width + (i % w) / factor])
        .collect();
    Mask::new(w, h, bits)
}
