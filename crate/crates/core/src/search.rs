//! Candidate mask search.
//!
//! Each candidate is a random free-form mask unioned with the critical
//! template. It is scored by the objective `O = F − γ·P`, where `F` is the
//! mean loss of a clean-pretrained scorer on the masked batch and `P` the
//! masked ratio. The candidate with the strictly smallest `O` wins, so on
//! ties the lowest index is kept.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskgen::{combine, masked_ratio, rmg, RmgParams, RmgRanges};
use crate::raster::{apply_mask, Image, Mask};
use crate::saliency::MsmConfig;

/// Mean loss of a fixed model on a batch of (already masked) images.
///
/// The mask is passed along for scorers that consume it directly.
pub trait Scorer {
    type Error: From<Error>;

    fn mean_loss(
        &mut self,
        images: &[Image],
        labels: &[usize],
        mask: &Mask,
    ) -> std::result::Result<f64, Self::Error>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Number of candidates.
    pub n: usize,
    /// Weight of the masked ratio in the objective.
    pub gamma: f64,
    pub ranges: RmgRanges,
    /// Upper bound on the scoring batch (a seeded sample of the dataset).
    pub batch: usize,
    pub seed: u64,
}

impl SearchConfig {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            n: 8,
            gamma: 1.0,
            ranges: RmgRanges::search(width, height),
            batch: 512,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidParameter("search: n must be >= 1".into()));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::InvalidParameter("search: gamma must be >= 0".into()));
        }
        if self.batch == 0 {
            return Err(Error::InvalidParameter("search: batch must be >= 1".into()));
        }
        self.ranges.validate()
    }

    /// Seed of 0-based candidate `index`: `seed + index + 1`.
    pub fn candidate_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_add(index as u64 + 1)
    }
}

/// How the critical template was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateInfo {
    #[serde(rename = "T")]
    pub threshold: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub smoothing_radius: usize,
    pub source: String,
    pub kept_ratio: f64,
}

impl TemplateInfo {
    pub fn new(cfg: &MsmConfig, source: impl Into<String>, template: &Mask) -> Self {
        Self {
            threshold: cfg.threshold,
            k: cfg.k,
            smoothing_radius: cfg.smoothing_radius,
            source: source.into(),
            kept_ratio: 1.0 - masked_ratio(template),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub index: usize,
    pub seed: u64,
    pub params: RmgParams,
    pub masked_ratio: f64,
    /// Mean loss `F`.
    pub loss: f64,
    /// Objective `O = F − γ·P`.
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub width: usize,
    pub height: usize,
    pub n: usize,
    pub gamma: f64,
    pub base_seed: u64,
    pub batch_size: usize,
    pub template: TemplateInfo,
    pub candidates: Vec<CandidateRecord>,
    pub chosen: usize,
}

impl SearchReport {
    pub fn chosen_record(&self) -> &CandidateRecord {
        &self.candidates[self.chosen]
    }
}

/// Scores one candidate: `(F, O)`.
pub fn score_candidate<S: Scorer>(
    scorer: &mut S,
    images: &[&Image],
    labels: &[usize],
    candidate: &Mask,
    gamma: f64,
) -> std::result::Result<(f64, f64), S::Error> {
    if images.is_empty() {
        return Err(Error::Empty("scoring batch").into());
    }
    if images.len() != labels.len() {
        return Err(Error::InvalidParameter("images and labels differ in length".into()).into());
    }
    let masked = images
        .iter()
        .map(|img| apply_mask(img, candidate))
        .collect::<Result<Vec<_>>>()?;
    let loss = scorer.mean_loss(&masked, labels, candidate)?;
    Ok((loss, loss - gamma * masked_ratio(candidate)))
}

/// Regenerates candidate `index` exactly as [`search`] builds it.
pub fn candidate_mask(
    cfg: &SearchConfig,
    template: &Mask,
    index: usize,
) -> Result<(Mask, RmgParams, u64)> {
    let seed = cfg.candidate_seed(index);
    let params = cfg.ranges.draw_for_seed(seed);
    let random = rmg(&params, template.width(), template.height(), seed)?;
    Ok((combine(&random, template)?, params, seed))
}

/// Runs the search over `cfg.n` candidates. `images`/`labels` is the pool
/// from which the scoring batch (at most `cfg.batch`, seeded by `cfg.seed`)
/// is drawn once and shared by all candidates.
pub fn search<S: Scorer>(
    cfg: &SearchConfig,
    template: &Mask,
    template_info: TemplateInfo,
    scorer: &mut S,
    images: &[Image],
    labels: &[usize],
) -> std::result::Result<(Mask, SearchReport), S::Error> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Empty("search images").into());
    }
    if images.len() != labels.len() {
        return Err(Error::InvalidParameter("images and labels differ in length".into()).into());
    }
    if let Some(bad) = images.iter().find(|i| i.dims() != template.dims()) {
        return Err(Error::size(template.dims(), bad.dims()).into());
    }
    let mut order = crate::rng::sample_indices(images.len(), cfg.batch, cfg.seed);
    order.sort_unstable();
    let batch: Vec<&Image> = order.iter().map(|&i| &images[i]).collect();
    let batch_labels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();

    let mut best: Option<(usize, f64, Mask)> = None;
    let mut candidates = Vec::with_capacity(cfg.n);
    for index in 0..cfg.n {
        let (mask, params, seed) = candidate_mask(cfg, template, index)?;
        let (loss, objective) = score_candidate(scorer, &batch, &batch_labels, &mask, cfg.gamma)?;
        if !objective.is_finite() {
            return Err(Error::NonFiniteObjective(index).into());
        }
        candidates.push(CandidateRecord {
            index,
            seed,
            params,
            masked_ratio: masked_ratio(&mask),
            loss,
            objective,
        });
        if best.as_ref().is_none_or(|(_, o, _)| objective < *o) {
            best = Some((index, objective, mask));
        }
    }
    let (chosen, _, mask) = best.expect("n >= 1");
    let report = SearchReport {
        width: template.width(),
        height: template.height(),
        n: cfg.n,
        gamma: cfg.gamma,
        base_seed: cfg.seed,
        batch_size: batch.len(),
        template: template_info,
        candidates,
        chosen,
    };
    Ok((mask, report))
}

/// Index of the strict minimum, first occurrence on ties.
pub fn argmin_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Returns preset losses in call order.
    struct Scripted(Vec<f64>, usize);

    impl Scorer for Scripted {
        type Error = Error;
        fn mean_loss(&mut self, _: &[Image], _: &[usize], _: &Mask) -> Result<f64> {
            let v = self.0[self.1 % self.0.len()];
            self.1 += 1;
            Ok(v)
        }
    }

    /// Cross-entropy of uniform logits over `c` classes.
    struct Uniform(usize);

    impl Scorer for Uniform {
        type Error = Error;
        fn mean_loss(&mut self, images: &[Image], labels: &[usize], _: &Mask) -> Result<f64> {
            assert_eq!(images.len(), labels.len());
            let logits = vec![0.0f64; self.0];
            let lse = logits.iter().map(|v| v.exp()).sum::<f64>().ln();
            Ok(lse - logits[0])
        }
    }

    fn pool(n: usize) -> (Vec<Image>, Vec<usize>) {
        let imgs = (0..n)
            .map(|i| Image::filled(16, 16, 1, (i % 5) as f64 / 5.0).unwrap())
            .collect();
        (imgs, (0..n).map(|i| i % 3).collect())
    }

    fn cfg(n: usize, gamma: f64) -> SearchConfig {
        SearchConfig {
            n,
            gamma,
            batch: 8,
            ..SearchConfig::new(16, 16)
        }
    }

    fn info() -> TemplateInfo {
        TemplateInfo::new(&MsmConfig::default(), "test", &Mask::zeros(16, 16))
    }

    #[test]
    fn gamma_zero_objective_is_loss() {
        let (imgs, labels) = pool(4);
        let refs: Vec<&Image> = imgs.iter().collect();
        let mut s = Scripted(vec![0.7], 0);
        let (f, o) = score_candidate(&mut s, &refs, &labels, &Mask::zeros(16, 16), 0.0).unwrap();
        assert_eq!(f, o);
    }

    #[test]
    fn uniform_scorer_closed_form() {
        let (imgs, labels) = pool(4);
        let refs: Vec<&Image> = imgs.iter().collect();
        let half = Mask::new(16, 16, (0..256).map(|i| i < 128).collect()).unwrap();
        let (_, o) = score_candidate(&mut Uniform(10), &refs, &labels, &half, 1.0).unwrap();
        assert!((o - (10f64.ln() - 0.5)).abs() < 1e-12);
        assert!((o - 1.8026).abs() < 1e-4);
        let (f, o) =
            score_candidate(&mut Uniform(10), &refs, &labels, &Mask::ones(16, 16), 1.0).unwrap();
        assert_eq!(f, o);
    }

    #[test]
    fn empty_batch_rejected() {
        let r = score_candidate(&mut Uniform(2), &[], &[], &Mask::ones(2, 2), 1.0);
        assert!(matches!(r, Err(Error::Empty(_))));
    }

    #[test]
    fn single_candidate_always_chosen() {
        let (imgs, labels) = pool(10);
        let mut s = Scripted(vec![1e9], 0);
        let (_, rep) = search(
            &cfg(1, 1.0),
            &Mask::zeros(16, 16),
            info(),
            &mut s,
            &imgs,
            &labels,
        )
        .unwrap();
        assert_eq!(rep.chosen, 0);
    }

    #[test]
    fn picks_argmin_and_first_on_ties() {
        let (imgs, labels) = pool(10);
        let mut s = Scripted(vec![0.3, 0.1, 0.2], 0);
        let (_, rep) = search(
            &cfg(3, 0.0),
            &Mask::zeros(16, 16),
            info(),
            &mut s,
            &imgs,
            &labels,
        )
        .unwrap();
        assert_eq!(rep.chosen, 1);
        let mut s = Scripted(vec![0.2, 0.5, 0.2], 0);
        let (_, rep) = search(
            &cfg(3, 0.0),
            &Mask::zeros(16, 16),
            info(),
            &mut s,
            &imgs,
            &labels,
        )
        .unwrap();
        assert_eq!(rep.chosen, 0);
    }

    #[test]
    fn template_pixels_survive() {
        let (imgs, labels) = pool(6);
        let template = Mask::new(16, 16, (0..256).map(|i| i % 7 == 0).collect()).unwrap();
        let mut s = Uniform(3);
        let (mask, rep) = search(&cfg(4, 1.0), &template, info(), &mut s, &imgs, &labels).unwrap();
        assert!(template.is_subset_of(&mask));
        for c in &rep.candidates {
            let (m, p, seed) = candidate_mask(&cfg(4, 1.0), &template, c.index).unwrap();
            assert_eq!((p, seed), (c.params, c.seed));
            assert_eq!(masked_ratio(&m), c.masked_ratio);
        }
    }

    #[test]
    fn report_serializes() {
        let (imgs, labels) = pool(6);
        let (_, rep) = search(
            &cfg(2, 1.0),
            &Mask::zeros(16, 16),
            info(),
            &mut Uniform(3),
            &imgs,
            &labels,
        )
        .unwrap();
        let s = serde_json::to_string(&rep).unwrap();
        let back: SearchReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back, rep);
    }

    #[test]
    fn argmin_helper() {
        assert_eq!(argmin_first(&[]), None);
        assert_eq!(argmin_first(&[2.0, 1.0, 1.0]), Some(1));
    }
}
