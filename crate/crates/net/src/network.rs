//! Four-stage residual recognition network with an optional feature
//! selection gate after one of the stages.

use serde::{Deserialize, Serialize};

use desense_core::rng::{stream_rng, Rng};
use desense_core::{Image, Mask};

use crate::block::ResidualBlock;
use crate::error::{NetError, Result};
use crate::fsm::{fsm_stage_count, Fsm};
use crate::layers::{
    BatchNorm2d, Conv2d, GlobalAvgPool, Linear, MaxPool2, Mode, Relu, Slot, SlotMut, Tensors,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FsmArch {
    /// Stage (1–4) whose output is gated.
    pub insertion_point: usize,
    /// Channel width of the masknet stages.
    pub width: usize,
}

/// Architecture descriptor, stored alongside the parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub input_side: usize,
    pub channels: usize,
    pub widths: [usize; 4],
    pub classes: usize,
    pub fsm: Option<FsmArch>,
}

impl Arch {
    pub fn new(input_side: usize, channels: usize, classes: usize) -> Self {
        Self {
            input_side,
            channels,
            widths: [16, 32, 64, 128],
            classes,
            fsm: None,
        }
    }

    pub fn with_widths(mut self, widths: [usize; 4]) -> Self {
        self.widths = widths;
        self
    }

    pub fn with_fsm(mut self, insertion_point: usize, width: usize) -> Self {
        self.fsm = Some(FsmArch {
            insertion_point,
            width,
        });
        self
    }

    pub fn without_fsm(mut self) -> Self {
        self.fsm = None;
        self
    }

    pub fn embedding_len(&self) -> usize {
        self.widths[3]
    }

    /// Feature side after each stage.
    pub fn stage_sides(&self) -> [usize; 4] {
        let half = |s: usize| (s - 1) / 2 + 1;
        // stem: stride-2 conv then 2×2 max pool
        let mut side = half(self.input_side) / 2;
        let mut out = [0; 4];
        for (i, o) in out.iter_mut().enumerate() {
            if i > 0 {
                side = half(side);
            }
            *o = side;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_side < 32 {
            return Err(NetError::InvalidConfig(format!(
                "input side {} too small (need >= 32)",
                self.input_side
            )));
        }
        if !matches!(self.channels, 1 | 3) || self.classes < 2 || self.widths.contains(&0) {
            return Err(NetError::InvalidConfig(format!(
                "bad architecture {self:?}"
            )));
        }
        if let Some(f) = &self.fsm {
            if !(1..=4).contains(&f.insertion_point) || f.width == 0 {
                return Err(NetError::InvalidConfig(format!("bad fsm settings {f:?}")));
            }
            fsm_stage_count(self.input_side, self.stage_sides()[f.insertion_point - 1])?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    arch: Arch,
    stem_conv: Conv2d<T>,
    stem_bn: BatchNorm2d<T>,
    stem_relu: Relu,
    stem_pool: MaxPool2,
    stages: Vec<ResidualBlock<T>>,
    fsm: Option<Fsm<T>>,
    gated: bool,
    pool: GlobalAvgPool,
    head: Linear<T>,
}

impl<T: Scalar> Network<T> {
    pub fn new(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng: Rng = stream_rng(seed, 0);
        let w = arch.widths;
        let mut stem_conv = Conv2d::new(arch.channels, w[0], 3, 2, 1, false, &mut rng);
        stem_conv.input_grad = false;
        let stages = (0..4)
            .map(|i| {
                let (inp, stride) = if i == 0 { (w[0], 1) } else { (w[i - 1], 2) };
                ResidualBlock::new(inp, w[i], stride, &mut rng)
            })
            .collect();
        // the gate gets its own stream so toggling it leaves the backbone
        // initialization untouched
        let fsm = match &arch.fsm {
            Some(f) => {
                let side = arch.stage_sides()[f.insertion_point - 1];
                let count = fsm_stage_count(arch.input_side, side)?;
                Some(Fsm::new(count, f.width, &mut stream_rng(seed, 1)))
            }
            None => None,
        };
        let head = Linear::new(w[3], arch.classes, &mut rng);
        Ok(Self {
            arch,
            stem_conv,
            stem_bn: BatchNorm2d::new(w[0]),
            stem_relu: Relu::default(),
            stem_pool: MaxPool2::default(),
            stages,
            fsm,
            gated: false,
            pool: GlobalAvgPool::default(),
            head,
        })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn has_fsm(&self) -> bool {
        self.fsm.is_some()
    }

    pub fn head_mut(&mut self) -> &mut Linear<T> {
        &mut self.head
    }

    /// Stacks images into an `(N, C, H, W)` batch.
    pub fn batch(&self, images: &[&Image]) -> Result<Tensor<T>> {
        let (s, c) = (self.arch.input_side, self.arch.channels);
        let mut data = Vec::with_capacity(images.len() * c * s * s);
        for img in images {
            if img.dims() != (s, s) || img.channels() != c {
                return Err(NetError::Shape(format!(
                    "model expects {s}x{s}x{c}, got {}x{}x{}",
                    img.width(),
                    img.height(),
                    img.channels()
                )));
            }
            let px = img.samples();
            for ch in 0..c {
                data.extend((0..s * s).map(|i| T::of(px[i * c + ch])));
            }
        }
        Tensor::new(vec![images.len(), c, s, s], data)
    }

    /// Embedding `(N, widths[3])`. Masks feed the gate; without masks (or
    /// without a gate) the features pass through ungated.
    pub fn features(
        &mut self,
        x: &Tensor<T>,
        masks: Option<&[Mask]>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.arch.input_side;
        if (c, h, w) != (self.arch.channels, s, s) {
            return Err(NetError::Shape(format!(
                "model expects {:?}, got {:?}",
                (self.arch.channels, s, s),
                (c, h, w)
            )));
        }
        let mut y = self.stem_conv.forward(x)?;
        y = self.stem_bn.forward(&y, mode)?;
        y = self.stem_relu.forward(&y);
        y = self.stem_pool.forward(&y)?;
        self.gated = false;
        let insertion = self.arch.fsm.as_ref().map(|f| f.insertion_point);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            y = stage.forward(&y, mode)?;
            if insertion == Some(i + 1) {
                if let (Some(fsm), Some(masks)) = (self.fsm.as_mut(), masks) {
                    y = fsm.gate(masks, &y, mode)?;
                    self.gated = true;
                }
            }
        }
        let emb = self.pool.forward(&y)?;
        emb.check_finite("embedding")?;
        Ok(emb)
    }

    pub fn forward(
        &mut self,
        x: &Tensor<T>,
        masks: Option<&[Mask]>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        let emb = self.features(x, masks, mode)?;
        let logits = self.head.forward(&emb)?;
        logits.check_finite("logits")?;
        Ok(logits)
    }

    /// Backpropagates a logit gradient through the last `forward`. Returns
    /// the input gradient when `input_grad` is set.
    pub fn backward(&mut self, dlogits: &Tensor<T>, input_grad: bool) -> Result<Option<Tensor<T>>> {
        let demb = self.head.backward(dlogits)?;
        self.backward_features(&demb, input_grad)
    }

    pub fn backward_features(
        &mut self,
        demb: &Tensor<T>,
        input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        let mut d = self.pool.backward(demb)?;
        let insertion = self.arch.fsm.as_ref().map(|f| f.insertion_point);
        for i in (0..self.stages.len()).rev() {
            if insertion == Some(i + 1) && self.gated {
                d = self
                    .fsm
                    .as_mut()
                    .expect("gated implies fsm")
                    .gate_backward(&d)?;
            }
            d = self.stages[i].backward(&d)?;
        }
        d = self.stem_pool.backward(&d)?;
        d = self.stem_relu.backward(&d)?;
        d = self.stem_bn.backward(&d)?;
        self.stem_conv.input_grad = input_grad;
        let dx = self.stem_conv.backward(&d)?;
        self.stem_conv.input_grad = false;
        Ok(dx)
    }

    /// Activation and pooling pattern of the last forward; finite-difference
    /// checks skip perturbations that change it.
    pub fn pattern(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .stem_relu
            .pattern()
            .iter()
            .map(|&b| b as usize)
            .collect();
        out.extend_from_slice(self.stem_pool.pattern());
        for s in &self.stages {
            out.extend(s.pattern().into_iter().map(|b| b as usize));
        }
        if let (Some(f), true) = (&self.fsm, self.gated) {
            out.extend(f.pattern().into_iter().map(|b| b as usize));
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for slot in self.slots_mut_all() {
            if let Some(g) = slot.grad {
                g.iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    pub fn slots_all(&self) -> Vec<Slot<'_, T>> {
        let mut out = Vec::new();
        self.slots("", &mut out);
        out
    }

    pub fn slots_mut_all(&mut self) -> Vec<SlotMut<'_, T>> {
        let mut out = Vec::new();
        self.slots_mut("", &mut out);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.slots_all()
            .iter()
            .filter(|s| s.role == crate::layers::Role::Param)
            .map(|s| s.value.len())
            .sum()
    }
}

impl<T: Scalar> Tensors<T> for Network<T> {
    fn slots<'a>(&'a self, _prefix: &str, out: &mut Vec<Slot<'a, T>>) {
        self.stem_conv.slots("stem.conv", out);
        self.stem_bn.slots("stem.bn", out);
        for (i, s) in self.stages.iter().enumerate() {
            s.slots(&format!("stage{}", i + 1), out);
        }
        if let Some(f) = &self.fsm {
            f.slots("fsm", out);
        }
        self.head.slots("head", out);
    }

    fn slots_mut<'a>(&'a mut self, _prefix: &str, out: &mut Vec<SlotMut<'a, T>>) {
        self.stem_conv.slots_mut("stem.conv", out);
        self.stem_bn.slots_mut("stem.bn", out);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.slots_mut(&format!("stage{}", i + 1), out);
        }
        if let Some(f) = &mut self.fsm {
            f.slots_mut("fsm", out);
        }
        self.head.slots_mut("head", out);
    }
}
