//! SGD training with momentum and step learning-rate drops, plus accuracy
//! evaluation.

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use desense_core::dataset::Dataset;
use desense_core::maskgen::{level_band, rmg_in_band};
use desense_core::rng::{stream_rng, Rng};
use desense_core::{apply_mask, Image, Mask, RmgRanges};

use crate::error::{NetError, Result};
use crate::layers::{softmax_cross_entropy, Mode};
use crate::network::Network;

/// Stream of a trainer's sampling generator (the network initializer uses
/// streams 0 and 1 of the model seed).
pub const TRAIN_STREAM: u64 = 2;

const IN_BAND_ATTEMPTS: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Fractions of `iterations` after which the rate is divided by 10.
    #[serde(default = "default_drops")]
    pub lr_drops: Vec<f64>,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    /// Evaluate every this many iterations (0 = only at the end).
    #[serde(default)]
    pub eval_every: usize,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_drops() -> Vec<f64> {
    vec![0.5, 0.7, 0.9]
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 600,
            batch_size: 32,
            lr: 0.05,
            momentum: default_momentum(),
            lr_drops: default_drops(),
            weight_decay: 5e-4,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NetError::InvalidConfig(m.to_string()));
        if self.iterations == 0 {
            return bad("iterations must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be >= 0");
        }
        if self.lr_drops.iter().any(|d| !(*d > 0.0 && *d < 1.0))
            || self.lr_drops.windows(2).any(|w| w[0] >= w[1])
        {
            return bad("lr drops must be strictly increasing in (0, 1)");
        }
        Ok(())
    }

    /// Step at which each drop takes effect.
    pub fn drop_steps(&self) -> Vec<usize> {
        self.lr_drops
            .iter()
            .map(|d| (d * self.iterations as f64).round() as usize)
            .collect()
    }

    /// Learning rate of 0-based step `t`: `lr / 10^k` where `k` counts the
    /// drop steps `<= t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        let k = self.drop_steps().iter().filter(|&&s| t >= s).count();
        self.lr / 10f64.powi(k as i32)
    }
}

/// How training images are masked.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskPolicy {
    /// Clean images.
    None,
    /// One mask applied to every sample.
    Fixed(Mask),
    /// A fresh in-band random mask per batch at a uniformly drawn level 1–6.
    PerLevel(RmgRanges),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_acc: Option<f64>,
}

/// Masks used at evaluation time.
#[derive(Debug, Clone, Copy)]
pub enum EvalMasks<'a> {
    None,
    Fixed(&'a Mask),
    PerImage(&'a [Mask]),
}

impl EvalMasks<'_> {
    fn get(&self, i: usize) -> Option<&Mask> {
        match self {
            EvalMasks::None => None,
            EvalMasks::Fixed(m) => Some(m),
            EvalMasks::PerImage(ms) => Some(&ms[i]),
        }
    }
}

/// Masked images of a batch and the masks the gate should see.
fn prepare(images: &[&Image], masks: &[Option<&Mask>]) -> Result<(Vec<Image>, Option<Vec<Mask>>)> {
    let mut out = Vec::with_capacity(images.len());
    let mut gate = Vec::with_capacity(images.len());
    for (img, m) in images.iter().zip(masks) {
        match m {
            Some(m) => {
                out.push(apply_mask(img, m)?);
                gate.push((*m).clone());
            }
            None => out.push((*img).clone()),
        }
    }
    let gate = (gate.len() == images.len() && !gate.is_empty()).then_some(gate);
    Ok((out, gate))
}

/// Eval-mode logits for a batch, masking images first.
pub fn logits(
    net: &mut Network<f32>,
    images: &[&Image],
    masks: &[Option<&Mask>],
) -> Result<Vec<Vec<f32>>> {
    let (masked, gate) = prepare(images, masks)?;
    let refs: Vec<&Image> = masked.iter().collect();
    let x = net.batch(&refs)?;
    let out = net.forward(&x, gate.as_deref(), Mode::Eval)?;
    let c = net.arch().classes;
    Ok(out.data().chunks(c).map(|r| r.to_vec()).collect())
}

pub const EVAL_BATCH: usize = 64;

/// Top-1 accuracy in `[0, 1]`.
pub fn accuracy(
    net: &mut Network<f32>,
    images: &[Image],
    labels: &[usize],
    masks: EvalMasks<'_>,
) -> Result<f64> {
    if images.is_empty() {
        return Err(NetError::InvalidConfig("accuracy of an empty set".into()));
    }
    let mut correct = 0usize;
    for start in (0..images.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(images.len());
        let refs: Vec<&Image> = images[start..end].iter().collect();
        let ms: Vec<Option<&Mask>> = (start..end).map(|i| masks.get(i)).collect();
        for (row, &label) in logits(net, &refs, &ms)?.iter().zip(&labels[start..end]) {
            if argmax(row) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / images.len() as f64)
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Held-out set evaluated during training.
#[derive(Debug, Clone, Copy)]
pub struct EvalSet<'a> {
    pub data: &'a Dataset,
    pub masks: EvalMasks<'a>,
}

/// Stateful trainer: owns the model, momentum buffers, sampling generator and
/// step counter, so training can be resumed in chunks.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: Network<f32>,
    pub cfg: TrainConfig,
    pub policy: MaskPolicy,
    velocity: Vec<Vec<f32>>,
    rng: Rng,
    step: usize,
}

impl Trainer {
    pub fn new(net: Network<f32>, cfg: TrainConfig, policy: MaskPolicy) -> Result<Self> {
        cfg.validate()?;
        let side = net.arch().input_side;
        match &policy {
            MaskPolicy::Fixed(m) if m.dims() != (side, side) => {
                return Err(NetError::Shape(format!(
                    "mask {}x{} for {side}x{side} model",
                    m.width(),
                    m.height()
                )))
            }
            MaskPolicy::PerLevel(r) => r.validate()?,
            _ => {}
        }
        let velocity = net
            .slots_all()
            .iter()
            .map(|s| vec![0.0; s.value.len()])
            .collect();
        let rng = stream_rng(cfg.seed, TRAIN_STREAM);
        Ok(Self {
            net,
            cfg,
            policy,
            velocity,
            rng,
            step: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn reset_momentum(&mut self) {
        self.velocity
            .iter_mut()
            .for_each(|v| v.iter_mut().for_each(|x| *x = 0.0));
    }

    fn batch_masks(&mut self, n: usize) -> Result<Vec<Option<Mask>>> {
        let side = self.net.arch().input_side;
        Ok(match &self.policy {
            MaskPolicy::None => vec![None; n],
            MaskPolicy::Fixed(m) => vec![Some(m.clone()); n],
            MaskPolicy::PerLevel(ranges) => {
                let level = self.rng.gen_range(1..=6u8);
                let seed = self.rng.gen::<u64>();
                let drawn = rmg_in_band(
                    ranges,
                    level_band(level),
                    side,
                    side,
                    seed,
                    IN_BAND_ATTEMPTS,
                )?;
                vec![Some(drawn.mask); n]
            }
        })
    }

    /// One SGD step on a batch drawn from `indices`; returns the loss.
    pub fn step(&mut self, data: &Dataset, indices: &[usize]) -> Result<f64> {
        if indices.is_empty() {
            return Err(NetError::InvalidConfig("no training indices".into()));
        }
        let bs = self.cfg.batch_size.min(indices.len());
        let picks = sample(&mut self.rng, indices.len(), bs).into_vec();
        let images: Vec<&Image> = picks.iter().map(|&p| &data.images[indices[p]]).collect();
        let labels: Vec<usize> = picks.iter().map(|&p| data.labels[indices[p]]).collect();
        let masks = self.batch_masks(bs)?;
        let mrefs: Vec<Option<&Mask>> = masks.iter().map(|m| m.as_ref()).collect();
        let (masked, gate) = prepare(&images, &mrefs)?;
        let refs: Vec<&Image> = masked.iter().collect();

        let lr = self.cfg.lr_at(self.step);
        let x = self.net.batch(&refs)?;
        self.net.zero_grad();
        let out = self.net.forward(&x, gate.as_deref(), Mode::Train)?;
        let (loss, dlogits) = softmax_cross_entropy(&out, &labels)?;
        self.net.backward(&dlogits, false)?;

        let (mu, wd, lr32) = (
            self.cfg.momentum as f32,
            self.cfg.weight_decay as f32,
            lr as f32,
        );
        for (slot, vel) in self.net.slots_mut_all().into_iter().zip(&mut self.velocity) {
            let Some(grad) = slot.grad else { continue };
            for ((p, &g), v) in slot.value.iter_mut().zip(grad.iter()).zip(vel.iter_mut()) {
                *v = mu * *v + g + wd * *p;
                *p -= lr32 * *v;
            }
            if slot.value.iter().any(|p| !p.is_finite()) {
                return Err(NetError::NumericInstability(format!(
                    "parameter {} at step {}",
                    slot.name, self.step
                )));
            }
        }
        self.step += 1;
        Ok(loss as f64)
    }

    /// Runs `iters` steps; evaluation points follow `cfg.eval_every` and
    /// the final step of the whole schedule.
    pub fn run(
        &mut self,
        data: &Dataset,
        indices: &[usize],
        iters: usize,
        eval: Option<EvalSet<'_>>,
    ) -> Result<Vec<HistoryRecord>> {
        check_labels(data, indices, self.net.arch().classes)?;
        let mut history = Vec::with_capacity(iters);
        for _ in 0..iters {
            let lr = self.cfg.lr_at(self.step);
            let loss = self.step(data, indices)?;
            let done = self.step;
            let due = (self.cfg.eval_every > 0 && done.is_multiple_of(self.cfg.eval_every))
                || done == self.cfg.iterations;
            let eval_acc = match (&eval, due) {
                (Some(e), true) => Some(accuracy(
                    &mut self.net,
                    &e.data.images,
                    &e.data.labels,
                    e.masks,
                )?),
                _ => None,
            };
            history.push(HistoryRecord {
                iter: done,
                lr,
                loss,
                eval_acc,
            });
        }
        Ok(history)
    }
}

fn check_labels(data: &Dataset, indices: &[usize], classes: usize) -> Result<Vec<bool>> {
    let mut seen = vec![false; classes];
    for &i in indices {
        let l = *data
            .labels
            .get(i)
            .ok_or_else(|| NetError::InvalidConfig(format!("index {i} outside dataset")))?;
        if l >= classes {
            return Err(NetError::InvalidConfig(format!(
                "label {l} outside {classes} classes"
            )));
        }
        seen[l] = true;
    }
    Ok(seen)
}

/// Trains `net` on the whole dataset for `cfg.iterations` steps. Every class
/// must have at least one image.
pub fn train(
    net: Network<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    policy: MaskPolicy,
    eval: Option<EvalSet<'_>>,
) -> Result<(Network<f32>, Vec<HistoryRecord>)> {
    let all: Vec<usize> = (0..data.len()).collect();
    let seen = check_labels(data, &all, net.arch().classes)?;
    if let Some(c) = seen.iter().position(|s| !s) {
        return Err(NetError::EmptyClass(c));
    }
    let mut trainer = Trainer::new(net, cfg.clone(), policy)?;
    let history = trainer.run(data, &all, cfg.iterations, eval)?;
    Ok((trainer.net, history))
}
