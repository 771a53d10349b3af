//! Input-gradient saliency and the network-backed search scorer.

use desense_core::saliency::{SaliencyMap, SaliencyProvider};
use desense_core::search::Scorer;
use desense_core::{Image, Mask};

use crate::error::{NetError, Result};
use crate::layers::{cross_entropy_per_sample, Mode};
use crate::network::Network;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::EVAL_BATCH;

/// A model that can report the gradient of its largest logit w.r.t. the
/// input, in the image's interleaved sample order.
pub trait InputGradient {
    fn max_logit_gradient(&mut self, image: &Image) -> Result<Vec<f64>>;
}

impl<T: Scalar> InputGradient for Network<T> {
    fn max_logit_gradient(&mut self, image: &Image) -> Result<Vec<f64>> {
        let x = self.batch(&[image])?;
        let logits = self.forward(&x, None, Mode::Eval)?;
        let row = logits.data();
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        let mut onehot = vec![T::zero(); row.len()];
        onehot[best] = T::one();
        let dx = self
            .backward(&Tensor::new(logits.shape().to_vec(), onehot)?, true)?
            .expect("input gradient requested");
        let (_, c, h, w) = dx.dims4()?;
        let planar = dx.data();
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                out[p * c + ch] = planar[ch * h * w + p].f64();
            }
        }
        Ok(out)
    }
}

/// `|∂ max-logit / ∂ pixel|` summed over channels, max-normalized.
pub fn gradient_saliency<M: InputGradient + ?Sized>(
    model: &mut M,
    image: &Image,
) -> Result<SaliencyMap> {
    let grad = model.max_logit_gradient(image)?;
    let c = image.channels();
    if grad.len() != image.samples().len() {
        return Err(NetError::Shape(format!(
            "gradient has {} values for {} samples",
            grad.len(),
            image.samples().len()
        )));
    }
    let raw = grad
        .chunks(c)
        .map(|px| px.iter().map(|g| g.abs()).sum())
        .collect();
    Ok(SaliencyMap::from_raw(image.width(), image.height(), raw)?)
}

/// Saliency provider backed by any input-gradient model.
pub struct GradientSaliency<'a, M: ?Sized> {
    pub model: &'a mut M,
    pub label: String,
}

impl<'a, M: InputGradient + ?Sized> GradientSaliency<'a, M> {
    pub fn new(model: &'a mut M, label: impl Into<String>) -> Self {
        Self {
            model,
            label: label.into(),
        }
    }
}

impl<M: InputGradient + ?Sized> SaliencyProvider for GradientSaliency<'_, M> {
    type Error = NetError;

    fn saliency(&mut self, image: &Image) -> Result<SaliencyMap> {
        gradient_saliency(self.model, image)
    }

    fn source(&self) -> String {
        self.label.clone()
    }
}

/// Scores candidates by the eval-mode cross-entropy of a fixed network. A
/// gated network also receives the candidate mask.
pub struct NetScorer<'a> {
    pub net: &'a mut Network<f32>,
}

impl Scorer for NetScorer<'_> {
    type Error = NetError;

    fn mean_loss(&mut self, images: &[Image], labels: &[usize], mask: &Mask) -> Result<f64> {
        let mut total = 0.0;
        for start in (0..images.len()).step_by(EVAL_BATCH) {
            let end = (start + EVAL_BATCH).min(images.len());
            let refs: Vec<&Image> = images[start..end].iter().collect();
            let x = self.net.batch(&refs)?;
            let masks = vec![mask.clone(); end - start];
            let gate = self.net.has_fsm().then_some(masks.as_slice());
            let logits = self.net.forward(&x, gate, Mode::Eval)?;
            total += cross_entropy_per_sample(&logits, &labels[start..end])?
                .iter()
                .sum::<f64>();
        }
        Ok(total / images.len() as f64)
    }
}
