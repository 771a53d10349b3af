//! Embeddings, cosine verification and the three test situations.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use desense_core::rng::stream_rng;
use desense_core::{apply_mask, Image, Mask};

use crate::error::{NetError, Result};
use crate::layers::Mode;
use crate::network::Network;

/// Produces an embedding for an image, optionally desensitized by a mask.
pub trait Embedder {
    fn embed(&mut self, image: &Image, mask: Option<&Mask>) -> Result<Vec<f64>>;
}

/// Avgpool output in eval mode, bypassing the head. With a mask the image is
/// masked and a gated network sees the mask; without one the gate is off.
pub fn extract_embedding(
    net: &mut Network<f32>,
    image: &Image,
    mask: Option<&Mask>,
) -> Result<Vec<f64>> {
    let masked;
    let input = match mask {
        Some(m) => {
            masked = apply_mask(image, m)?;
            &masked
        }
        None => image,
    };
    let x = net.batch(&[input])?;
    let gate = mask.filter(|_| net.has_fsm()).map(|m| vec![m.clone()]);
    let emb = net.features(&x, gate.as_deref(), Mode::Eval)?;
    Ok(emb.data().iter().map(|&v| v as f64).collect())
}

impl Embedder for Network<f32> {
    fn embed(&mut self, image: &Image, mask: Option<&Mask>) -> Result<Vec<f64>> {
        extract_embedding(self, image, mask)
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(NetError::Shape(format!(
            "embeddings of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(NetError::ZeroNorm);
    }
    Ok(dot / (na * nb))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Same,
    Different,
}

/// Similarity and decision (`same` iff similarity ≥ threshold).
pub fn cosine_verify(a: &[f64], b: &[f64], threshold: f64) -> Result<(Decision, f64)> {
    let s = cosine_similarity(a, b)?;
    let d = if s >= threshold {
        Decision::Same
    } else {
        Decision::Different
    };
    Ok((d, s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    /// Query image index.
    pub a: usize,
    /// Gallery image index.
    pub b: usize,
    pub same: bool,
}

/// `count` pairs, half same-identity and half different, drawn by a seeded
/// sampler. Classes with a single image cannot form same pairs.
pub fn make_pairs(labels: &[usize], count: usize, seed: u64) -> Result<Vec<Pair>> {
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let multi: Vec<&Vec<usize>> = by_class.values().filter(|v| v.len() >= 2).collect();
    if multi.is_empty() || by_class.len() < 2 || count == 0 {
        return Err(NetError::NoPairs);
    }
    let mut rng = stream_rng(seed, 0);
    let mut pairs = Vec::with_capacity(count);
    for k in 0..count {
        if k % 2 == 0 {
            let members = multi[rng.gen_range(0..multi.len())];
            let picked: Vec<usize> = members.choose_multiple(&mut rng, 2).copied().collect();
            pairs.push(Pair {
                a: picked[0],
                b: picked[1],
                same: true,
            });
        } else {
            let a = rng.gen_range(0..labels.len());
            let mut b = rng.gen_range(0..labels.len());
            while labels[b] == labels[a] {
                b = rng.gen_range(0..labels.len());
            }
            pairs.push(Pair { a, b, same: false });
        }
    }
    Ok(pairs)
}

/// Threshold maximizing accuracy on labelled similarities; candidates are
/// midpoints between consecutive sorted values. Ties keep the lowest.
pub fn calibrate_threshold(scored: &[(f64, bool)]) -> Result<f64> {
    if scored.is_empty() {
        return Err(NetError::NoPairs);
    }
    let mut sims: Vec<f64> = scored.iter().map(|s| s.0).collect();
    sims.sort_by(f64::total_cmp);
    let mut candidates = vec![sims[0] - 1e-9];
    candidates.extend(sims.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    candidates.push(sims[sims.len() - 1] + 1e-9);
    let mut best = (candidates[0], -1.0);
    for t in candidates {
        let acc = verification_accuracy(scored, t);
        if acc > best.1 {
            best = (t, acc);
        }
    }
    Ok(best.0)
}

pub fn verification_accuracy(scored: &[(f64, bool)], threshold: f64) -> f64 {
    let correct = scored
        .iter()
        .filter(|(s, same)| (*s >= threshold) == *same)
        .count();
    correct as f64 / scored.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Situation {
    /// Query and gallery both masked.
    BothMasked,
    /// Clean query, masked gallery.
    CleanQuery,
    /// Both clean.
    BothClean,
}

impl Situation {
    pub const ALL: [Situation; 3] = [
        Situation::BothMasked,
        Situation::CleanQuery,
        Situation::BothClean,
    ];

    fn masks(self) -> (bool, bool) {
        match self {
            Situation::BothMasked => (true, true),
            Situation::CleanQuery => (false, true),
            Situation::BothClean => (false, false),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SituationResult {
    pub situation: Situation,
    pub threshold: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SituationReport {
    pub pairs: usize,
    pub calibration_pairs: usize,
    pub results: Vec<SituationResult>,
}

impl SituationReport {
    pub fn accuracy(&self, situation: Situation) -> Option<f64> {
        self.results
            .iter()
            .find(|r| r.situation == situation)
            .map(|r| r.accuracy)
    }
}

/// A set of images with verification pairs over it.
#[derive(Debug, Clone, Copy)]
pub struct PairSet<'a> {
    pub images: &'a [Image],
    pub pairs: &'a [Pair],
}

fn score_pairs<E: Embedder + ?Sized>(
    embedder: &mut E,
    set: &PairSet<'_>,
    mask: &Mask,
    situation: Situation,
) -> Result<Vec<(f64, bool)>> {
    let (qm, gm) = situation.masks();
    let mut cache: std::collections::HashMap<(usize, bool), Vec<f64>> = Default::default();
    let mut embed = |i: usize, masked: bool| -> Result<Vec<f64>> {
        if let Some(e) = cache.get(&(i, masked)) {
            return Ok(e.clone());
        }
        let e = embedder.embed(&set.images[i], masked.then_some(mask))?;
        cache.insert((i, masked), e.clone());
        Ok(e)
    };
    set.pairs
        .iter()
        .map(|p| {
            let ea = embed(p.a, qm)?;
            let eb = embed(p.b, gm)?;
            Ok((cosine_similarity(&ea, &eb)?, p.same))
        })
        .collect()
}

/// Verification accuracy in every situation, with the threshold of each
/// situation calibrated on the disjoint `calibration` set under the same
/// masking.
pub fn eval_situations<E: Embedder + ?Sized>(
    embedder: &mut E,
    test: PairSet<'_>,
    calibration: PairSet<'_>,
    mask: &Mask,
) -> Result<SituationReport> {
    if test.pairs.is_empty() || calibration.pairs.is_empty() {
        return Err(NetError::NoPairs);
    }
    let mut results = Vec::with_capacity(3);
    for situation in Situation::ALL {
        let threshold =
            calibrate_threshold(&score_pairs(embedder, &calibration, mask, situation)?)?;
        let accuracy =
            verification_accuracy(&score_pairs(embedder, &test, mask, situation)?, threshold);
        results.push(SituationResult {
            situation,
            threshold,
            accuracy,
        });
    }
    Ok(SituationReport {
        pairs: test.pairs.len(),
        calibration_pairs: calibration.pairs.len(),
        results,
    })
}
