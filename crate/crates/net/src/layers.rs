//! Layers with hand-derived backward passes.
//!
//! Every layer caches what its backward pass needs during `forward` and
//! accumulates parameter gradients (`+=`) during `backward`.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{NetError, Result};
use crate::scalar::{matmul, Scalar};
use crate::tensor::Tensor;
use desense_core::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A learnable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(shape: Vec<usize>, value: Vec<T>) -> Self {
        let n = value.len();
        debug_assert_eq!(n, shape.iter().product::<usize>());
        Self {
            shape,
            value,
            grad: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![v; n])
    }

    fn normal(shape: Vec<usize>, std: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        Self::new(shape, (0..n).map(|_| T::of(dist.sample(rng))).collect())
    }

    fn uniform(shape: Vec<usize>, bound: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        Self::new(
            shape,
            (0..n)
                .map(|_| T::of(rng.gen_range(-bound..=bound)))
                .collect(),
        )
    }
}

/// Whether a named tensor is learned or a running statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Param,
    Buffer,
}

/// Borrowed view of one named tensor.
pub struct Slot<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
    pub value: &'a [T],
}

/// Mutable access to one named tensor; `grad` is `None` for buffers.
pub struct SlotMut<'a, T> {
    pub name: String,
    pub value: &'a mut [T],
    pub grad: Option<&'a mut [T]>,
}

/// Enumerates the named tensors of a module in a fixed order.
pub trait Tensors<T> {
    fn slots<'a>(&'a self, prefix: &str, out: &mut Vec<Slot<'a, T>>);
    fn slots_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<SlotMut<'a, T>>);
}

fn param_slot<'a, T>(out: &mut Vec<Slot<'a, T>>, name: String, p: &'a Param<T>) {
    out.push(Slot {
        name,
        shape: p.shape.clone(),
        role: Role::Param,
        value: &p.value,
    });
}

fn param_slot_mut<'a, T>(out: &mut Vec<SlotMut<'a, T>>, name: String, p: &'a mut Param<T>) {
    out.push(SlotMut {
        name,
        value: &mut p.value,
        grad: Some(&mut p.grad),
    });
}

fn missing_cache(layer: &str) -> NetError {
    NetError::Shape(format!("{layer}: backward called before forward"))
}

// ---------------------------------------------------------------- conv

#[derive(Debug, Clone)]
struct ConvCache<T> {
    col: Vec<T>,
    input: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    /// Skip the input gradient (first layer of a network).
    pub input_grad: bool,
    cache: Option<ConvCache<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// He-normal initialized convolution.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = Param::normal(
            vec![out_channels, in_channels, kernel, kernel],
            (2.0 / fan_in as f64).sqrt(),
            rng,
        );
        Self {
            weight,
            bias: bias.then(|| Param::filled(vec![out_channels], T::zero())),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            input_grad: true,
            cache: None,
        }
    }

    pub fn out_side(&self, side: usize) -> usize {
        (side + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.in_channels
            || h + 2 * self.padding < self.kernel
            || w + 2 * self.padding < self.kernel
        {
            return Err(NetError::Shape(format!(
                "conv expects {} channels, got input {:?}",
                self.in_channels,
                x.shape()
            )));
        }
        let (oh, ow) = (self.out_side(h), self.out_side(w));
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let plane = oh * ow;
        let cols = n * plane;
        let rows = c * k * k;
        let src = x.data();
        let mut col = vec![T::zero(); rows * cols];
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let r = (ci * k + ky) * k + kx;
                    let dst = &mut col[r * cols..(r + 1) * cols];
                    for b in 0..n {
                        let base = (b * c + ci) * h * w;
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = base + iy as usize * w;
                            let d = b * plane + oy * ow;
                            for ox in 0..ow {
                                let ix = (ox * s + kx) as isize - p;
                                if ix >= 0 && ix < w as isize {
                                    dst[d + ox] = src[row + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let co = self.out_channels;
        let mut prod = vec![T::zero(); co * cols];
        matmul(
            co,
            rows,
            cols,
            &self.weight.value,
            false,
            &col,
            false,
            &mut prod,
            false,
        );
        let mut out = vec![T::zero(); n * co * plane];
        for o in 0..co {
            let bias = self.bias.as_ref().map_or(T::zero(), |b| b.value[o]);
            for b in 0..n {
                let from = &prod[o * cols + b * plane..o * cols + (b + 1) * plane];
                let to = &mut out[(b * co + o) * plane..(b * co + o + 1) * plane];
                for (t, &f) in to.iter_mut().zip(from) {
                    *t = f + bias;
                }
            }
        }
        self.cache = Some(ConvCache {
            col,
            input: (n, c, h, w),
            out_hw: (oh, ow),
        });
        Tensor::new(vec![n, co, oh, ow], out)
    }

    /// Returns the input gradient, or `None` when `input_grad` is off.
    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Option<Tensor<T>>> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_cache("conv"))?;
        let (n, c, h, w) = cache.input;
        let (oh, ow) = cache.out_hw;
        let co = self.out_channels;
        if dy.shape() != [n, co, oh, ow] {
            return Err(NetError::Shape(format!(
                "conv backward got {:?}",
                dy.shape()
            )));
        }
        let plane = oh * ow;
        let cols = n * plane;
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let rows = c * k * k;
        let g = dy.data();
        let mut dmat = vec![T::zero(); co * cols];
        for o in 0..co {
            for b in 0..n {
                dmat[o * cols + b * plane..o * cols + (b + 1) * plane]
                    .copy_from_slice(&g[(b * co + o) * plane..(b * co + o + 1) * plane]);
            }
        }
        if let Some(bias) = self.bias.as_mut() {
            for o in 0..co {
                bias.grad[o] += dmat[o * cols..(o + 1) * cols].iter().copied().sum();
            }
        }
        matmul(
            co,
            cols,
            rows,
            &dmat,
            false,
            &cache.col,
            true,
            &mut self.weight.grad,
            true,
        );
        if !self.input_grad {
            return Ok(None);
        }
        let mut dcol = vec![T::zero(); rows * cols];
        matmul(
            rows,
            co,
            cols,
            &self.weight.value,
            true,
            &dmat,
            false,
            &mut dcol,
            false,
        );
        let mut dx = vec![T::zero(); n * c * h * w];
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let r = (ci * k + ky) * k + kx;
                    let srow = &dcol[r * cols..(r + 1) * cols];
                    for b in 0..n {
                        let base = (b * c + ci) * h * w;
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = base + iy as usize * w;
                            let d = b * plane + oy * ow;
                            for ox in 0..ow {
                                let ix = (ox * s + kx) as isize - p;
                                if ix >= 0 && ix < w as isize {
                                    dx[row + ix as usize] += srow[d + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(Some(Tensor::new(vec![n, c, h, w], dx)?))
    }
}

impl<T: Scalar> Tensors<T> for Conv2d<T> {
    fn slots<'a>(&'a self, prefix: &str, out: &mut Vec<Slot<'a, T>>) {
        param_slot(out, format!("{prefix}.weight"), &self.weight);
        if let Some(b) = &self.bias {
            param_slot(out, format!("{prefix}.bias"), b);
        }
    }

    fn slots_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<SlotMut<'a, T>>) {
        param_slot_mut(out, format!("{prefix}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            param_slot_mut(out, format!("{prefix}.bias"), b);
        }
    }
}

// ---------------------------------------------------------------- batch norm

#[derive(Debug, Clone)]
struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    shape: (usize, usize, usize, usize),
    mode: Mode,
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(vec![channels], T::one()),
            beta: Param::filled(vec![channels], T::zero()),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.gamma.value.len() {
            return Err(NetError::Shape(format!(
                "batch norm over {} channels got {c}",
                self.gamma.value.len()
            )));
        }
        let plane = h * w;
        let m = n * plane;
        let src = x.data();
        let eps = T::of(self.eps);
        let mut inv_std = vec![T::zero(); c];
        let mut xhat = vec![T::zero(); src.len()];
        let mut out = vec![T::zero(); src.len()];
        for ch in 0..c {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut sum = T::zero();
                    for b in 0..n {
                        sum += src[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                            .iter()
                            .copied()
                            .sum();
                    }
                    let mean = sum / T::of(m as f64);
                    let mut sq = T::zero();
                    for b in 0..n {
                        for &v in &src[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                            sq += (v - mean) * (v - mean);
                        }
                    }
                    let var = sq / T::of(m as f64);
                    let mom = T::of(self.momentum);
                    let unbiased = if m > 1 {
                        var * T::of(m as f64 / (m - 1) as f64)
                    } else {
                        var
                    };
                    self.running_mean[ch] = (T::one() - mom) * self.running_mean[ch] + mom * mean;
                    self.running_var[ch] = (T::one() - mom) * self.running_var[ch] + mom * unbiased;
                    (mean, var)
                }
                Mode::Eval => (self.running_mean[ch], self.running_var[ch]),
            };
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            let (g, bt) = (self.gamma.value[ch], self.beta.value[ch]);
            for b in 0..n {
                let range = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                for i in range {
                    let xh = (src[i] - mean) * is;
                    xhat[i] = xh;
                    out[i] = g * xh + bt;
                }
            }
        }
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            shape: (n, c, h, w),
            mode,
        });
        Tensor::new(vec![n, c, h, w], out)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| missing_cache("batch norm"))?;
        let (n, c, h, w) = cache.shape;
        if dy.shape() != [n, c, h, w] {
            return Err(NetError::Shape(format!(
                "batch norm backward got {:?}",
                dy.shape()
            )));
        }
        let plane = h * w;
        let m = T::of((n * plane) as f64);
        let g = dy.data();
        let mut dx = vec![T::zero(); g.len()];
        for ch in 0..c {
            let (mut dbeta, mut dgamma) = (T::zero(), T::zero());
            for b in 0..n {
                for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                    dbeta += g[i];
                    dgamma += g[i] * cache.xhat[i];
                }
            }
            self.beta.grad[ch] += dbeta;
            self.gamma.grad[ch] += dgamma;
            let scale = self.gamma.value[ch] * cache.inv_std[ch];
            for b in 0..n {
                for i in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                    dx[i] = match cache.mode {
                        Mode::Train => scale * (g[i] - dbeta / m - cache.xhat[i] * dgamma / m),
                        Mode::Eval => scale * g[i],
                    };
                }
            }
        }
        Tensor::new(vec![n, c, h, w], dx)
    }
}

impl<T: Scalar> Tensors<T> for BatchNorm2d<T> {
    fn slots<'a>(&'a self, prefix: &str, out: &mut Vec<Slot<'a, T>>) {
        param_slot(out, format!("{prefix}.gamma"), &self.gamma);
        param_slot(out, format!("{prefix}.beta"), &self.beta);
        let c = self.running_mean.len();
        out.push(Slot {
            name: format!("{prefix}.running_mean"),
            shape: vec![c],
            role: Role::Buffer,
            value: &self.running_mean,
        });
        out.push(Slot {
            name: format!("{prefix}.running_var"),
            shape: vec![c],
            role: Role::Buffer,
            value: &self.running_var,
        });
    }

    fn slots_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<SlotMut<'a, T>>) {
        param_slot_mut(out, format!("{prefix}.gamma"), &mut self.gamma);
        param_slot_mut(out, format!("{prefix}.beta"), &mut self.beta);
        out.push(SlotMut {
            name: format!("{prefix}.running_mean"),
            value: &mut self.running_mean,
            grad: None,
        });
        out.push(SlotMut {
            name: format!("{prefix}.running_var"),
            value: &mut self.running_var,
            grad: None,
        });
    }
}

// ---------------------------------------------------------------- relu

#[derive(Debug, Clone, Default)]
pub struct Relu {
    active: Vec<bool>,
    shape: Vec<usize>,
}

impl Relu {
    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.active = x.data().iter().map(|&v| v > T::zero()).collect();
        self.shape = x.shape().to_vec();
        x.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    /// Which inputs of the last forward were positive.
    pub fn pattern(&self) -> &[bool] {
        &self.active
    }

    pub fn backward<T: Scalar>(&self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        if dy.shape() != self.shape.as_slice() {
            return Err(NetError::Shape(format!(
                "relu backward got {:?}",
                dy.shape()
            )));
        }
        let data = dy
            .data()
            .iter()
            .zip(&self.active)
            .map(|(&g, &a)| if a { g } else { T::zero() })
            .collect();
        Tensor::new(self.shape.clone(), data)
    }
}

// ---------------------------------------------------------------- pooling

/// 2×2 max pooling with stride 2 (odd trailing rows/columns are dropped).
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    argmax: Vec<usize>,
    input: Vec<usize>,
}

impl MaxPool2 {
    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        let (oh, ow) = (h / 2, w / 2);
        let src = x.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        self.argmax.clear();
        for nc in 0..n * c {
            let base = nc * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    out.push(src[best]);
                    self.argmax.push(best);
                }
            }
        }
        self.input = x.shape().to_vec();
        Tensor::new(vec![n, c, oh, ow], out)
    }

    /// Source index of every output of the last forward.
    pub fn pattern(&self) -> &[usize] {
        &self.argmax
    }

    pub fn backward<T: Scalar>(&self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        if dy.len() != self.argmax.len() {
            return Err(NetError::Shape(format!(
                "max pool backward got {:?}",
                dy.shape()
            )));
        }
        let mut dx = Tensor::zeros(self.input.clone());
        let d = dx.data_mut();
        for (&i, &g) in self.argmax.iter().zip(dy.data()) {
            d[i] += g;
        }
        Ok(dx)
    }
}

/// Global average pooling `(N, C, H, W) → (N, C)`.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    input: Vec<usize>,
}

impl GlobalAvgPool {
    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        let plane = h * w;
        let inv = T::one() / T::of(plane as f64);
        let out = x
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        self.input = x.shape().to_vec();
        Tensor::new(vec![n, c], out)
    }

    pub fn backward<T: Scalar>(&self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, h, w] = self.input[..] else {
            return Err(missing_cache("avg pool"));
        };
        if dy.shape() != [n, c] {
            return Err(NetError::Shape(format!(
                "avg pool backward got {:?}",
                dy.shape()
            )));
        }
        let plane = h * w;
        let inv = T::one() / T::of(plane as f64);
        let data = dy
            .data()
            .iter()
            .flat_map(|&g| std::iter::repeat_n(g * inv, plane))
            .collect();
        Tensor::new(self.input.clone(), data)
    }
}

// ---------------------------------------------------------------- linear

#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            weight: Param::uniform(vec![outputs, inputs], bound, rng),
            bias: Param::filled(vec![outputs], T::zero()),
            input: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, f) = x.dims2()?;
        let (i, o) = (self.inputs(), self.outputs());
        if f != i {
            return Err(NetError::Shape(format!(
                "linear expects {i} features, got {f}"
            )));
        }
        let mut y = vec![T::zero(); n * o];
        for row in y.chunks_mut(o) {
            row.copy_from_slice(&self.bias.value);
        }
        matmul(
            n,
            i,
            o,
            x.data(),
            false,
            &self.weight.value,
            true,
            &mut y,
            true,
        );
        self.input = Some(x.clone());
        Tensor::new(vec![n, o], y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.as_ref().ok_or_else(|| missing_cache("linear"))?;
        let (n, _) = x.dims2()?;
        let (i, o) = (self.inputs(), self.outputs());
        if dy.shape() != [n, o] {
            return Err(NetError::Shape(format!(
                "linear backward got {:?}",
                dy.shape()
            )));
        }
        for row in dy.data().chunks(o) {
            for (b, &g) in self.bias.grad.iter_mut().zip(row) {
                *b += g;
            }
        }
        matmul(
            o,
            n,
            i,
            dy.data(),
            true,
            x.data(),
            false,
            &mut self.weight.grad,
            true,
        );
        let mut dx = vec![T::zero(); n * i];
        matmul(
            n,
            o,
            i,
            dy.data(),
            false,
            &self.weight.value,
            false,
            &mut dx,
            false,
        );
        Tensor::new(vec![n, i], dx)
    }
}

impl<T: Scalar> Tensors<T> for Linear<T> {
    fn slots<'a>(&'a self, prefix: &str, out: &mut Vec<Slot<'a, T>>) {
        param_slot(out, format!("{prefix}.weight"), &self.weight);
        param_slot(out, format!("{prefix}.bias"), &self.bias);
    }

    fn slots_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<SlotMut<'a, T>>) {
        param_slot_mut(out, format!("{prefix}.weight"), &mut self.weight);
        param_slot_mut(out, format!("{prefix}.bias"), &mut self.bias);
    }
}

// ---------------------------------------------------------------- loss

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the
/// logits.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let (n, c) = logits.dims2()?;
    if labels.len() != n {
        return Err(NetError::Shape(format!(
            "{} labels for batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(NetError::Shape(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let inv_n = T::one() / T::of(n as f64);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); n * c];
    for (b, row) in logits.data().chunks(c).enumerate() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += (lse - row[labels[b]]) * inv_n;
        for (j, &v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            let onehot = if j == labels[b] { T::one() } else { T::zero() };
            grad[b * c + j] = (p - onehot) * inv_n;
        }
    }
    if !loss.is_finite() {
        return Err(NetError::NumericInstability("cross-entropy".into()));
    }
    Ok((loss, Tensor::new(vec![n, c], grad)?))
}

/// Per-sample cross-entropy, for scoring.
pub fn cross_entropy_per_sample<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<Vec<f64>> {
    let (n, c) = logits.dims2()?;
    if labels.len() != n {
        return Err(NetError::Shape(format!(
            "{} labels for batch of {n}",
            labels.len()
        )));
    }
    logits
        .data()
        .chunks(c)
        .zip(labels)
        .map(|(row, &l)| {
            if l >= c {
                return Err(NetError::Shape(format!(
                    "label {l} out of range for {c} classes"
                )));
            }
            let row: Vec<f64> = row.iter().map(|v| v.f64()).collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            Ok(lse - row[l])
        })
        .collect()
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}
