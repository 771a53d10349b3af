use crate::error::Result;
use crate::layers::{BatchNorm2d, Conv2d, Mode, Relu, Slot, SlotMut, Tensors};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use desense_core::rng::Rng;

/// Basic residual block: two 3×3 conv/BN pairs with an identity or
/// 1×1-projection shortcut.
#[derive(Debug, Clone)]
pub struct ResidualBlock<T> {
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    relu1: Relu,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    shortcut: Option<(Conv2d<T>, BatchNorm2d<T>)>,
    relu_out: Relu,
}

fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new(inputs: usize, outputs: usize, stride: usize, rng: &mut Rng) -> Self {
        let shortcut = (stride != 1 || inputs != outputs).then(|| {
            (
                Conv2d::new(inputs, outputs, 1, stride, 0, false, rng),
                BatchNorm2d::new(outputs),
            )
        });
        Self {
            conv1: Conv2d::new(inputs, outputs, 3, stride, 1, false, rng),
            bn1: BatchNorm2d::new(outputs),
            relu1: Relu::default(),
            conv2: Conv2d::new(outputs, outputs, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(outputs),
            shortcut,
            relu_out: Relu::default(),
        }
    }

    /// Activation pattern of the last forward.
    pub fn pattern(&self) -> Vec<bool> {
        [self.relu1.pattern(), self.relu_out.pattern()].concat()
    }

    pub fn out_side(&self, side: usize) -> usize {
        self.conv1.out_side(side)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let a = self.conv1.forward(x)?;
        let a = self.bn1.forward(&a, mode)?;
        let a = self.relu1.forward(&a);
        let b = self.conv2.forward(&a)?;
        let b = self.bn2.forward(&b, mode)?;
        let s = match &mut self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(x)?;
                bn.forward(&s, mode)?
            }
            None => x.clone(),
        };
        Ok(self.relu_out.forward(&add(&b, &s)?))
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.relu_out.backward(dy)?;
        let db = self.bn2.backward(&d)?;
        let da = self.conv2.backward(&db)?.expect("input grad enabled");
        let da = self.relu1.backward(&da)?;
        let da = self.bn1.backward(&da)?;
        let dx_main = self.conv1.backward(&da)?.expect("input grad enabled");
        let dx_short = match &mut self.shortcut {
            Some((conv, bn)) => {
                let ds = bn.backward(&d)?;
                conv.backward(&ds)?.expect("input grad enabled")
            }
            None => d,
        };
        add(&dx_main, &dx_short)
    }
}

impl<T: Scalar> Tensors<T> for ResidualBlock<T> {
    fn slots<'a>(&'a self, prefix: &str, out: &mut Vec<Slot<'a, T>>) {
        self.conv1.slots(&format!("{prefix}.conv1"), out);
        self.bn1.slots(&format!("{prefix}.bn1"), out);
        self.conv2.slots(&format!("{prefix}.conv2"), out);
        self.bn2.slots(&format!("{prefix}.bn2"), out);
        if let Some((conv, bn)) = &self.shortcut {
            conv.slots(&format!("{prefix}.down.conv"), out);
            bn.slots(&format!("{prefix}.down.bn"), out);
        }
    }

    fn slots_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<SlotMut<'a, T>>) {
        self.conv1.slots_mut(&format!("{prefix}.conv1"), out);
        self.bn1.slots_mut(&format!("{prefix}.bn1"), out);
        self.conv2.slots_mut(&format!("{prefix}.conv2"), out);
        self.bn2.slots_mut(&format!("{prefix}.bn2"), out);
        if let Some((conv, bn)) = &mut self.shortcut {
            conv.slots_mut(&format!("{prefix}.down.conv"), out);
            bn.slots_mut(&format!("{prefix}.down.bn"), out);
        }
    }
}
