//! Central finite-difference checks of the hand-written backward passes.
//!
//! For an op `y = f(x; θ)` and a fixed random cotangent `r`, the scalar
//! `L = Σ rᵢ·yᵢ` is differentiated numerically and compared with the
//! analytic gradient from `backward(r)`. The numeric reference always runs
//! on a 64-bit copy of the op holding exactly the same values; for a 32-bit
//! op under test the difference uses the 32-bit step (1e-3), since a pure
//! 32-bit difference keeps only about three significant digits.
//!
//! The error of an op is `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)` over every checked
//! element of the input gradient and all parameter gradients together.
//! Perturbations that flip a ReLU or move a max-pool winner are skipped,
//! since the function is not differentiable across them.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use desense_core::rng::{stream_rng, Rng};
use desense_core::Mask;

use crate::block::ResidualBlock;
use crate::error::Result;
use crate::fsm::{fsm_stage_count, Fsm};
use crate::layers::{
    softmax_cross_entropy, BatchNorm2d, Conv2d, GlobalAvgPool, Linear, MaxPool2, Mode, Relu,
    SlotMut, Tensors,
};
use crate::network::{Arch, Network};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Largest error of one op over one random configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub op: &'static str,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Finite-difference step for the element type.
pub fn step<T: Scalar>() -> f64 {
    if std::mem::size_of::<T>() == 4 {
        1e-3
    } else {
        1e-6
    }
}

/// An op under test: forward/backward plus access to its parameters.
pub trait Probe<T: Scalar> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>>;
    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>>;
    fn params(&mut self) -> Vec<SlotMut<'_, T>> {
        Vec::new()
    }
    fn pattern(&self) -> Vec<usize> {
        Vec::new()
    }
    /// Pattern after a forward at `x`.
    fn pattern_at(&mut self, x: &Tensor<T>) -> Result<Vec<usize>> {
        self.forward(x)?;
        Ok(self.pattern())
    }
}

const MAX_PER_TENSOR: usize = 48;

fn normal_vec<T: Scalar>(n: usize, rng: &mut Rng) -> Vec<T> {
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::of(v)
        })
        .collect()
}

fn pick(n: usize, rng: &mut Rng) -> Vec<usize> {
    if n <= MAX_PER_TENSOR {
        (0..n).collect()
    } else {
        rand::seq::index::sample(rng, n, MAX_PER_TENSOR).into_vec()
    }
}

fn contract<T: Scalar>(y: &Tensor<T>, r: &[f64]) -> f64 {
    y.data().iter().zip(r).map(|(v, w)| v.f64() * w).sum()
}

/// Checks the analytic gradients of `probe` at `x` against central
/// differences of `reference` (an identical op, possibly in another
/// precision) at `x_ref` with step `h`.
#[allow(clippy::too_many_arguments)]
pub fn check<T: Scalar, U: Scalar, P: Probe<T> + ?Sized, Q: Probe<U> + ?Sized>(
    op: &'static str,
    probe: &mut P,
    x: Tensor<T>,
    reference: &mut Q,
    x_ref: Tensor<U>,
    h: f64,
    rng: &mut Rng,
) -> Result<GradReport> {
    let y = probe.forward(&x)?;
    let base_pattern = reference.pattern_at(&x_ref)?;
    // a one-signed cotangent keeps summed gradients (biases, shifts) away
    // from accidental cancellation
    let r: Vec<f64> = (0..y.len()).map(|_| rng.gen_range(0.5..1.5)).collect();
    for s in probe.params() {
        if let Some(g) = s.grad {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }
    let dy = Tensor::new(y.shape().to_vec(), r.iter().map(|&v| T::of(v)).collect())?;
    let dx = probe.backward(&dy)?;
    let param_grads: Vec<Vec<f64>> = probe
        .params()
        .into_iter()
        .map(|s| {
            s.grad
                .map_or_else(Vec::new, |g| g.iter().map(|v| v.f64()).collect())
        })
        .collect();

    let mut report = GradReport {
        op,
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    // input
    let mut xv = x_ref.clone();
    let mut pairs = Vec::new();
    for e in pick(x.len(), rng) {
        let orig = xv.data()[e];
        let eval = |v: U, reference: &mut Q, xv: &mut Tensor<U>| -> Result<Option<f64>> {
            xv.data_mut()[e] = v;
            let y = reference.forward(xv)?;
            Ok((reference.pattern() == base_pattern).then(|| contract(&y, &r)))
        };
        let hp = U::of(h);
        let plus = eval(orig + hp, reference, &mut xv)?;
        let minus = eval(orig - hp, reference, &mut xv)?;
        xv.data_mut()[e] = orig;
        match (plus, minus) {
            (Some(p), Some(m)) => pairs.push((dx.data()[e].f64(), (p - m) / (2.0 * h))),
            _ => report.skipped += 1,
        }
    }

    // parameters
    for (si, grads) in param_grads.iter().enumerate() {
        if grads.is_empty() {
            continue;
        }
        for e in pick(grads.len(), rng) {
            let at = |delta: f64, reference: &mut Q| -> Result<Option<f64>> {
                let orig = {
                    let mut slots = reference.params();
                    let v = &mut slots[si].value[e];
                    let o = *v;
                    *v = o + U::of(delta);
                    o
                };
                let y = reference.forward(&x_ref)?;
                let ok = reference.pattern() == base_pattern;
                reference.params()[si].value[e] = orig;
                Ok(ok.then(|| contract(&y, &r)))
            };
            let plus = at(h, reference)?;
            let minus = at(-h, reference)?;
            match (plus, minus) {
                (Some(p), Some(m)) => pairs.push((grads[e], (p - m) / (2.0 * h))),
                _ => report.skipped += 1,
            }
        }
    }
    let norm =
        |f: &dyn Fn(&(f64, f64)) -> f64| pairs.iter().map(|p| f(p).powi(2)).sum::<f64>().sqrt();
    let diff = norm(&|p| p.0 - p.1);
    let size = norm(&|p| p.0).max(norm(&|p| p.1));
    report.checked = pairs.len();
    report.max_rel_error = if diff == 0.0 { 0.0 } else { diff / size };
    Ok(report)
}

// ---------------------------------------------------------------- probes

pub struct ConvProbe<T>(pub Conv2d<T>);

impl<T: Scalar> Probe<T> for ConvProbe<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.0.forward(x)
    }
    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.0.backward(dy)?.expect("input grad on"))
    }
    fn params(&mut self) -> Vec<SlotMut<'_, T>> {
        let mut v = Vec::new();
        self.0.slots_mut("conv", &mut v);
        v
    }
}

pub struct BatchNormProbe<T>(pub BatchNorm2d<T>, pub Mode);

impl<T: Scalar> Probe<T> for BatchNormProbe<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        // running statistics must not drift between evaluations
        let saved = (self.0.running_mean.clone(), self.0.running_var.clone());
        let y = self.0.forward(x, self.1);
        (self.0.running_mean, self.0.running_var) = saved;
        y
    }
    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        self.0.backward(dy)
    }
    fn params(&mut self) -> Vec<SlotMut<'_, T>> {
        let mut v = Vec::new();
        self.0.slots_mut("bn", &mut v);
        v
    }
}

#[derive(Default)]
pub struct ReluProbe(pub Relu);

impl<T: Scalar> Probe<T> for ReluProbe {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.0.forward(x))
    }
    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        self.0.backward(dy)
    }
    fn pattern(&self) -> Vec<usize> {
        self.0.pattern().iter().map(|&b| b as usize).collect()
    }
}

#[derive(Default)]
pub struct MaxPoolProbe(pub MaxPool2);

impl<T: Scalar> Probe<T> for MaxPoolProbe {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.0.forward(x)
    }
    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        self.0.backward(dy)
    }
    fn pattern(&self) -> Vec<usize> {
        self.0.pattern().to_vec()
    }
}

#[derive(Default)]
pub struct AvgPoolProbe(pub GlobalAvgPool);

impl<T: Scalar> Probe<T> for AvgPoolProbe {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.0.forward(x)
    }
    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        self.0.backward(dy)
    }
}

pub struct LinearProbe<T>(pub Linear<T>);

impl<T: Scalar> Probe<T> for LinearProbe<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.0.forward(x)
    }
    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        self.0.backward(dy)
    }
    fn params(&mut self) -> Vec<SlotMut<'_, T>> {
        let mut v = Vec::new();
        self.0.slots_mut("fc", &mut v);
        v
    }
}

/// Cross-entropy as a one-output op; its cotangent scales the loss.
pub struct CrossEntropyProbe {
    pub labels: Vec<usize>,
    grad: Option<Vec<f64>>,
}

impl CrossEntropyProbe {
    pub fn new(labels: Vec<usize>) -> Self {
        Self { labels, grad: None }
    }
}

impl<T: Scalar> Probe<T> for CrossEntropyProbe {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (loss, grad) = softmax_cross_entropy(x, &self.labels)?;
        self.grad = Some(grad.data().iter().map(|v| v.f64()).collect());
        Tensor::new(vec![1], vec![loss])
    }
    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.grad.as_ref().expect("forward first");
        let n = g.len();
        let w = dy.data()[0].f64();
        let (b, c) = (self.labels.len(), n / self.labels.len());
        Tensor::new(vec![b, c], g.iter().map(|v| T::of(v * w)).collect())
    }
}

pub struct BlockProbe<T>(pub ResidualBlock<T>, pub Mode);

impl<T: Scalar> Probe<T> for BlockProbe<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.0.forward(x, self.1)
    }
    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        self.0.backward(dy)
    }
    fn params(&mut self) -> Vec<SlotMut<'_, T>> {
        let mut v = Vec::new();
        self.0.slots_mut("block", &mut v);
        v.retain(|s| s.grad.is_some());
        v
    }
    fn pattern(&self) -> Vec<usize> {
        self.0.pattern().into_iter().map(|b| b as usize).collect()
    }
}

/// The gate as a function of the feature map and the masknet parameters.
pub struct GateProbe<T> {
    pub fsm: Fsm<T>,
    pub masks: Vec<Mask>,
    pub mode: Mode,
}

impl<T: Scalar> Probe<T> for GateProbe<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.fsm.gate(&self.masks, x, self.mode)
    }
    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        self.fsm.gate_backward(dy)
    }
    fn params(&mut self) -> Vec<SlotMut<'_, T>> {
        let mut v = Vec::new();
        self.fsm.slots_mut("fsm", &mut v);
        v.retain(|s| s.grad.is_some());
        v
    }
    fn pattern(&self) -> Vec<usize> {
        self.fsm.pattern().into_iter().map(|b| b as usize).collect()
    }
}

/// Whole network from input to logits with masks on the gate.
pub struct NetworkProbe<T> {
    pub net: Network<T>,
    pub masks: Vec<Mask>,
    pub mode: Mode,
}

impl<T: Scalar> Probe<T> for NetworkProbe<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.net.forward(x, Some(&self.masks), self.mode)
    }
    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.net.backward(dy, true)?.expect("input grad requested"))
    }
    fn params(&mut self) -> Vec<SlotMut<'_, T>> {
        let mut v = self.net.slots_mut_all();
        v.retain(|s| s.grad.is_some());
        v
    }
    fn pattern(&self) -> Vec<usize> {
        self.net.pattern()
    }
}

// ---------------------------------------------------------------- configs

pub fn random_mask(w: usize, h: usize, rng: &mut Rng) -> Mask {
    let p = rng.gen_range(0.2..0.8);
    let bits = (0..w * h).map(|_| rng.gen_bool(p)).collect();
    Mask::new(w, h, bits).expect("dims")
}

fn tensor<T: Scalar>(shape: Vec<usize>, rng: &mut Rng) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape, normal_vec(n, rng)).expect("shape")
}

type Case<T> = (&'static str, Box<dyn Probe<T>>, Tensor<T>);

/// Every op under random configuration `seed`, plus the composite gate and
/// the whole gated network. Values are drawn in 64-bit and cast, so the same
/// seed gives the same op in either precision up to rounding.
fn cases<T: Scalar>(seed: u64) -> Result<Vec<Case<T>>> {
    let mut rng = stream_rng(seed, 7);
    let mut out: Vec<Case<T>> = Vec::new();

    let cin = rng.gen_range(1..4);
    let cout = rng.gen_range(1..4);
    let k = [1, 3][rng.gen_range(0..2)];
    let stride = rng.gen_range(1..3);
    let pad = rng.gen_range(0..2).min(k / 2 + 1);
    let conv = Conv2d::<T>::new(cin, cout, k, stride, pad, rng.gen_bool(0.5), &mut rng);
    let side = rng.gen_range(4..8);
    let n = rng.gen_range(1..3);
    let x = tensor::<T>(vec![n, cin, side, side], &mut rng);
    out.push(("conv", Box::new(ConvProbe(conv)), x));

    let c = rng.gen_range(1..4);
    for mode in [Mode::Train, Mode::Eval] {
        let mut bn = BatchNorm2d::new(c);
        bn.gamma.value = normal_vec(c, &mut rng);
        bn.beta.value = normal_vec(c, &mut rng);
        bn.running_mean = normal_vec(c, &mut rng);
        bn.running_var = (0..c).map(|_| T::of(rng.gen_range(0.5..2.0))).collect();
        let x = tensor::<T>(vec![rng.gen_range(2..4), c, 3, 3], &mut rng);
        let name = if mode == Mode::Train {
            "batchnorm-train"
        } else {
            "batchnorm-eval"
        };
        out.push((name, Box::new(BatchNormProbe(bn, mode)), x));
    }

    let x = tensor::<T>(vec![2, 2, 3, 3], &mut rng);
    out.push(("relu", Box::new(ReluProbe::default()), x));
    let x = tensor::<T>(vec![2, 2, 4, 6], &mut rng);
    out.push(("maxpool", Box::new(MaxPoolProbe::default()), x));
    let x = tensor::<T>(vec![2, 3, 3, 2], &mut rng);
    out.push(("avgpool", Box::new(AvgPoolProbe::default()), x));

    let (fi, fo) = (rng.gen_range(1..6), rng.gen_range(1..6));
    let x = tensor::<T>(vec![rng.gen_range(1..4), fi], &mut rng);
    out.push((
        "linear",
        Box::new(LinearProbe(Linear::<T>::new(fi, fo, &mut rng))),
        x,
    ));

    let (b, classes) = (rng.gen_range(1..5), rng.gen_range(2..6));
    let labels = (0..b).map(|_| rng.gen_range(0..classes)).collect();
    let x = tensor::<T>(vec![b, classes], &mut rng);
    out.push((
        "softmax-cross-entropy",
        Box::new(CrossEntropyProbe::new(labels)),
        x,
    ));

    let (bi, bo) = (rng.gen_range(1..4), rng.gen_range(1..4));
    let bs = rng.gen_range(1..3);
    let block = ResidualBlock::<T>::new(bi, bo, bs, &mut rng);
    let x = tensor::<T>(vec![2, bi, 6, 6], &mut rng);
    out.push((
        "residual-block",
        Box::new(BlockProbe(block, Mode::Train)),
        x,
    ));

    // composite gate: masks at input resolution, features at a stage side
    let input_side = [8, 16][rng.gen_range(0..2)];
    let feature_side = input_side >> rng.gen_range(1..4);
    let stages = fsm_stage_count(input_side, feature_side)?;
    let fsm = Fsm::<T>::new(stages, rng.gen_range(1..4), &mut rng);
    let batch = rng.gen_range(1..4);
    let shared = rng.gen_bool(0.5);
    let first = random_mask(input_side, input_side, &mut rng);
    let masks = (0..batch)
        .map(|_| {
            if shared {
                first.clone()
            } else {
                random_mask(input_side, input_side, &mut rng)
            }
        })
        .collect();
    let x = tensor::<T>(
        vec![batch, rng.gen_range(1..3), feature_side, feature_side],
        &mut rng,
    );
    let mode = if rng.gen_bool(0.5) {
        Mode::Train
    } else {
        Mode::Eval
    };
    let probe = GateProbe { fsm, masks, mode };
    out.push(("fsm-gate", Box::new(probe), x));

    let insertion = rng.gen_range(1..5);
    let arch = Arch::new(64, 1, 3)
        .with_widths([2, 3, 3, 4])
        .with_fsm(insertion, 2);
    let net = Network::<T>::new(arch, rng.gen())?;
    let batch = 2;
    let masks = (0..batch).map(|_| random_mask(64, 64, &mut rng)).collect();
    let x = tensor::<T>(vec![batch, 1, 64, 64], &mut rng);
    let probe = NetworkProbe {
        net,
        masks,
        mode: Mode::Train,
    };
    out.push(("network-with-fsm", Box::new(probe), x));
    Ok(out)
}

/// Rounds every value a case depends on to 32-bit precision.
fn round_to_f32(case: &mut Case<f64>) {
    let round = |v: &mut f64| *v = *v as f32 as f64;
    for s in case.1.params() {
        s.value.iter_mut().for_each(round);
    }
    case.2.data_mut().iter_mut().for_each(round);
}

/// Runs every case of configuration `seed` in precision `T` against its
/// 64-bit reference.
pub fn check_all<T: Scalar>(seed: u64) -> Result<Vec<GradReport>> {
    let narrow = std::mem::size_of::<T>() < std::mem::size_of::<f64>();
    let mut rng = stream_rng(seed, 8);
    let mut out = Vec::new();
    let analytic = cases::<T>(seed)?;
    let reference = cases::<f64>(seed)?;
    for ((op, mut probe, x), mut case) in analytic.into_iter().zip(reference) {
        if narrow {
            round_to_f32(&mut case);
        }
        let (_, mut reference, x_ref) = case;
        out.push(check(
            op,
            probe.as_mut(),
            x,
            reference.as_mut(),
            x_ref,
            step::<T>(),
            &mut rng,
        )?);
    }
    Ok(out)
}
