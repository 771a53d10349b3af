//! Mask-based image set desensitization.
//!
//! This crate holds everything that does not need a trainable network:
//! rasters and masks, NetPBM I/O, free-form random mask generation, saliency
//! template construction, the blur/mosaic baselines, SSIM/PSNR, and the
//! candidate mask search, which is generic over a [`search::Scorer`].

pub mod baselines;
pub mod dataset;
pub mod error;
pub mod maskgen;
pub mod metrics;
pub mod netpbm;
pub mod raster;
pub mod rng;
pub mod saliency;
pub mod search;
pub mod synth;

pub use error::{Error, Result};
pub use maskgen::{RmgParams, RmgRanges};
pub use raster::{apply_mask, downsample_mask_min, upsample_mask, Image, Mask};
