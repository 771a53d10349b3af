//! Feature selection masknet and its gate.
//!
//! The masknet maps a binary mask to a per-position weight in `(0, 1)` at
//! the resolution of the gated feature map. The gate is
//! `FS = fsm(m)·(1 − m_resized) + m_resized`, broadcast over channels, where
//! `m_resized` is the min-pooled mask. Kept feature cells are multiplied by
//! exactly one and pass through unchanged.

use desense_core::{downsample_mask_min, Mask};

use crate::error::{NetError, Result};
use crate::layers::{sigmoid, BatchNorm2d, Conv2d, Mode, Relu, Slot, SlotMut, Tensors};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use desense_core::rng::Rng;

/// Number of stride-2 stages taking `input_side` down to `feature_side`.
pub fn fsm_stage_count(input_side: usize, feature_side: usize) -> Result<usize> {
    let mut side = input_side;
    let mut count = 0;
    while side > feature_side {
        side = (side - 1) / 2 + 1;
        count += 1;
    }
    if side != feature_side {
        return Err(NetError::Shape(format!(
            "cannot reach feature side {feature_side} from input side {input_side} by halving"
        )));
    }
    Ok(count)
}

#[derive(Debug, Clone)]
struct GateCache<T> {
    feature: Tensor<T>,
    gate: Vec<T>,
    resized: Vec<T>,
    /// Masknet ran on a single plane shared by the whole batch.
    shared: bool,
}

#[derive(Debug, Clone)]
pub struct Fsm<T> {
    stages: Vec<(Conv2d<T>, BatchNorm2d<T>, Relu)>,
    proj: Conv2d<T>,
    output: Vec<T>,
    cache: Option<GateCache<T>>,
}

impl<T: Scalar> Fsm<T> {
    pub fn new(stage_count: usize, width: usize, rng: &mut Rng) -> Self {
        let mut stages = Vec::with_capacity(stage_count);
        let mut inputs = 1;
        for i in 0..stage_count {
            let mut conv = Conv2d::new(inputs, width, 3, 2, 1, false, rng);
            conv.input_grad = i > 0;
            stages.push((conv, BatchNorm2d::new(width), Relu::default()));
            inputs = width;
        }
        let mut proj = Conv2d::new(inputs, 1, 1, 1, 0, true, rng);
        proj.input_grad = stage_count > 0;
        Self {
            stages,
            proj,
            output: Vec::new(),
            cache: None,
        }
    }

    /// Activation pattern of the last masknet forward.
    pub fn pattern(&self) -> Vec<bool> {
        self.stages
            .iter()
            .flat_map(|(_, _, r)| r.pattern().iter().copied())
            .collect()
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    /// Masknet output `(N, 1, h, w)`, strictly inside `(0, 1)`.
    pub fn weights(&mut self, masks: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut x = masks.clone();
        for (conv, bn, relu) in &mut self.stages {
            x = conv.forward(&x)?;
            x = bn.forward(&x, mode)?;
            x = relu.forward(&x);
        }
        x = self.proj.forward(&x)?;
        let lo = T::epsilon();
        let hi = T::one() - T::epsilon();
        let out = x.map(|v| sigmoid(v).max(lo).min(hi));
        self.output = out.data().to_vec();
        Ok(out)
    }

    /// Accumulates parameter gradients from a gradient on the masknet output.
    pub fn weights_backward(&mut self, dout: &Tensor<T>) -> Result<()> {
        if dout.len() != self.output.len() {
            return Err(NetError::Shape(format!(
                "fsm backward got {:?}",
                dout.shape()
            )));
        }
        let dz: Vec<T> = dout
            .data()
            .iter()
            .zip(&self.output)
            .map(|(&g, &s)| g * s * (T::one() - s))
            .collect();
        let mut d = self
            .proj
            .backward(&Tensor::new(dout.shape().to_vec(), dz)?)?;
        for (conv, bn, relu) in self.stages.iter_mut().rev() {
            let Some(g) = d else { break };
            let g = relu.backward(&g)?;
            let g = bn.backward(&g)?;
            d = conv.backward(&g)?;
        }
        Ok(())
    }

    /// Applies the gate to `feature` `(N, C, h, w)` given one mask per sample
    /// at input resolution.
    pub fn gate(&mut self, masks: &[Mask], feature: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (n, c, h, w) = feature.dims4()?;
        if masks.len() != n {
            return Err(NetError::Shape(format!(
                "{} masks for batch of {n}",
                masks.len()
            )));
        }
        let (mw, mh) = masks[0].dims();
        if masks.iter().any(|m| m.dims() != (mw, mh)) {
            return Err(NetError::Shape("masks differ in size".into()));
        }
        let shared = masks.iter().all(|m| m == &masks[0]);
        let unique = if shared { &masks[..1] } else { masks };
        let mut planes = Vec::with_capacity(unique.len() * mw * mh);
        let mut resized = Vec::with_capacity(n * h * w);
        for m in unique {
            planes.extend(m.to_plane::<u8>().into_iter().map(|v| T::of(v as f64)));
        }
        for m in masks {
            let r = downsample_mask_min(m, w, h)?;
            resized.extend(r.to_plane::<u8>().into_iter().map(|v| T::of(v as f64)));
        }
        let planes = Tensor::new(vec![unique.len(), 1, mh, mw], planes)?;
        let weights = self.weights(&planes, mode)?;
        if weights.shape()[2..] != [h, w] {
            return Err(NetError::Shape(format!(
                "masknet output {:?} does not match feature {:?}",
                weights.shape(),
                feature.shape()
            )));
        }
        let plane = h * w;
        let gate: Vec<T> = (0..n * plane)
            .map(|i| {
                let g = if shared {
                    weights.data()[i % plane]
                } else {
                    weights.data()[i]
                };
                let r = resized[i];
                if r == T::one() {
                    T::one()
                } else {
                    g * (T::one() - r) + r
                }
            })
            .collect();
        let src = feature.data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for p in 0..plane {
                    let fs = gate[b * plane + p];
                    out[off + p] = if fs == T::one() {
                        src[off + p]
                    } else {
                        src[off + p] * fs
                    };
                }
            }
        }
        self.cache = Some(GateCache {
            feature: feature.clone(),
            gate,
            resized,
            shared,
        });
        Tensor::new(feature.shape().to_vec(), out)
    }

    /// Gradient w.r.t. the gated feature; masknet parameter gradients are
    /// accumulated along the way.
    pub fn gate_backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| NetError::Shape("fsm gate: backward called before forward".into()))?;
        let (n, c, h, w) = cache.feature.dims4()?;
        if dy.shape() != cache.feature.shape() {
            return Err(NetError::Shape(format!(
                "fsm gate backward got {:?}",
                dy.shape()
            )));
        }
        let plane = h * w;
        let (g, f) = (dy.data(), cache.feature.data());
        let mut dx = vec![T::zero(); g.len()];
        let mut dgate = vec![T::zero(); n * plane];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for p in 0..plane {
                    dx[off + p] = g[off + p] * cache.gate[b * plane + p];
                    dgate[b * plane + p] += g[off + p] * f[off + p];
                }
            }
        }
        // d FS / d fsm(m) = 1 − m_resized
        let mut dweights: Vec<T> = dgate
            .iter()
            .zip(&cache.resized)
            .map(|(&d, &r)| d * (T::one() - r))
            .collect();
        let batch = if cache.shared {
            let mut summed = vec![T::zero(); plane];
            for chunk in dweights.chunks(plane) {
                for (s, &d) in summed.iter_mut().zip(chunk) {
                    *s += d;
                }
            }
            dweights = summed;
            1
        } else {
            n
        };
        self.weights_backward(&Tensor::new(vec![batch, 1, h, w], dweights)?)?;
        Tensor::new(vec![n, c, h, w], dx)
    }
}

impl<T: Scalar> Tensors<T> for Fsm<T> {
    fn slots<'a>(&'a self, prefix: &str, out: &mut Vec<Slot<'a, T>>) {
        for (i, (conv, bn, _)) in self.stages.iter().enumerate() {
            conv.slots(&format!("{prefix}.{i}.conv"), out);
            bn.slots(&format!("{prefix}.{i}.bn"), out);
        }
        self.proj.slots(&format!("{prefix}.proj"), out);
    }

    fn slots_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<SlotMut<'a, T>>) {
        for (i, (conv, bn, _)) in self.stages.iter_mut().enumerate() {
            conv.slots_mut(&format!("{prefix}.{i}.conv"), out);
            bn.slots_mut(&format!("{prefix}.{i}.bn"), out);
        }
        self.proj.slots_mut(&format!("{prefix}.proj"), out);
    }
}
