//! Desk-scale trend experiments on the bundled synthetic set.
//!
//! One [`SeedRun`] trains the four models of a seed (clean, randomly
//! mask-trained, gated and ungated on the searched mask) and evaluates them;
//! the table functions aggregate runs over seeds. Everything is deterministic
//! in the [`BenchConfig`].

use std::path::Path;
use std::time::Instant;

use desense_core::baselines::{gaussian_blur, mosaic};
use desense_core::dataset::Dataset;
use desense_core::maskgen::{level_band, masked_ratio, rmg_in_band};
use desense_core::metrics::{dssim, psnr};
use desense_core::rng::sample_indices;
use desense_core::saliency::{binarize, build_template, MsmConfig, SaliencyMap};
use desense_core::search::{search, SearchConfig, SearchReport, TemplateInfo};
use desense_core::synth::{generate, SynthConfig};
use desense_core::{apply_mask, netpbm, upsample_mask, Image, Mask, RmgRanges};
use desense_net::fedsim::{run_federated, FedConfig, MomentumPolicy, RoundRecord};
use desense_net::saliency::{GradientSaliency, NetScorer};
use desense_net::train::{accuracy, train, EvalMasks};
use desense_net::verify::{eval_situations, make_pairs, PairSet, Situation, SituationReport};
use desense_net::{Arch, MaskPolicy, Network, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::artifacts::{write_json, write_text};
use crate::error::{CliError, Result};
use crate::report;

/// Label recorded for templates built from input-gradient saliency.
pub const SALIENCY_SOURCE: &str = "input-gradient";
const IN_BAND_ATTEMPTS: usize = 512;
pub const LEVELS: [u8; 6] = [1, 2, 3, 4, 5, 6];
pub const SWEEP_T: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub data: SynthConfig,
    pub train_per_class: usize,
    pub calibration_per_class: usize,
    pub widths: [usize; 4],
    pub insertion_point: usize,
    pub fsm_width: usize,
    pub train: TrainConfig,
    pub msm: MsmConfig,
    pub search_n: usize,
    pub gamma: f64,
    pub search_batch: usize,
    /// Random masks per test image and level.
    pub level_masks_per_image: usize,
    pub pairs: usize,
    pub calibration_pairs: usize,
    pub seeds: Vec<u64>,
    pub fed_clients: usize,
    pub fed_rounds: usize,
    pub sweep: Vec<f64>,
    /// Candidate stroke ranges; `None` derives them from the image size.
    #[serde(default)]
    pub search_ranges: Option<RmgRanges>,
    #[serde(default)]
    pub level_ranges: Option<RmgRanges>,
    /// Side of the re-rendered corpus for the privacy table (a multiple of
    /// the data side); `None` uses the test images as they are.
    #[serde(default)]
    pub privacy_side: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            data: SynthConfig {
                classes: 10,
                per_class: 70,
                ..Default::default()
            },
            train_per_class: 40,
            calibration_per_class: 10,
            widths: [8, 16, 32, 64],
            insertion_point: 3,
            fsm_width: 8,
            train: TrainConfig::default(),
            msm: MsmConfig::default(),
            search_n: 8,
            gamma: 1.0,
            search_batch: 512,
            level_masks_per_image: 4,
            pairs: 400,
            calibration_pairs: 200,
            seeds: (0..5).collect(),
            fed_clients: 3,
            fed_rounds: 10,
            privacy_side: Some(256),
            sweep: SWEEP_T.to_vec(),
            search_ranges: None,
            level_ranges: None,
        }
    }
}

/// Class-stratified train / calibration / test split of the bundled set.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub calibration: Dataset,
    pub test: Dataset,
}

pub struct Lab {
    pub cfg: BenchConfig,
    pub splits: Splits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelAccuracy {
    pub level: u8,
    pub clean: f64,
    pub masked: f64,
}

/// Masked-test accuracy of each model on the searched mask of a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchedAccuracy {
    pub seed: u64,
    pub mask_ratio: f64,
    pub clean: f64,
    pub masked: f64,
    pub fixed: f64,
    pub fsm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub template_kept: f64,
    pub levels: Vec<LevelAccuracy>,
    pub searched: SearchedAccuracy,
    pub situations: SituationReport,
    /// Wall time of the level experiment (two trainings plus evaluation).
    pub level_secs: f64,
    /// Wall time of the searched-mask experiment, including its share of
    /// the clean and mask-trained models.
    pub searched_secs: f64,
}

pub struct SeedRun {
    pub result: SeedResult,
    pub clean: Network<f32>,
    pub masked: Network<f32>,
    pub fsm: Network<f32>,
    pub fixed: Network<f32>,
    pub msm: SaliencyMap,
    pub template: Mask,
    pub mask: Mask,
    pub search: SearchReport,
}

/// The MSM as it is stored on disk: rescaled to unit peak and quantized to
/// 8 bits. Binarization is scale-free, so only quantization changes it.
pub fn stored_msm(msm: &SaliencyMap) -> Result<SaliencyMap> {
    Ok(SaliencyMap::from_pgm(&msm.normalized().to_pgm())?)
}

fn level_mask_seed(seed: u64, level: u8, index: usize) -> u64 {
    (seed << 40) | (u64::from(level) << 32) | index as u64
}

/// Base seed of the mask search of run `seed`, spaced so candidate seeds of
/// different runs never collide.
pub fn search_seed(seed: u64) -> u64 {
    seed.wrapping_mul(1000)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

impl Lab {
    pub fn new(cfg: BenchConfig) -> Result<Self> {
        let data = generate(&cfg.data)?;
        let (train, rest) = data.split_per_class(cfg.train_per_class);
        let (calibration, test) = rest.split_per_class(cfg.calibration_per_class);
        if calibration.is_empty() || test.is_empty() {
            return Err(CliError::Usage(
                "bench split leaves no calibration or test images".into(),
            ));
        }
        Ok(Self {
            cfg,
            splits: Splits {
                train,
                calibration,
                test,
            },
        })
    }

    /// Test images re-rendered at `privacy_side` with `mask` upsampled to
    /// match. Kernel sizes of the baselines are absolute, so this compares
    /// them at a face-crop resolution.
    pub fn privacy_corpus(&self, mask: &Mask) -> Result<Option<(Vec<Image>, Mask)>> {
        let side = self.side();
        let Some(big) = self.cfg.privacy_side.filter(|&b| b != side) else {
            return Ok(None);
        };
        if big % side != 0 {
            return Err(CliError::Usage(format!(
                "privacy side {big} is not a multiple of {side}"
            )));
        }
        let data = generate(&SynthConfig {
            size: big,
            ..self.cfg.data.clone()
        })?;
        let (_, rest) = data.split_per_class(self.cfg.train_per_class);
        let (_, test) = rest.split_per_class(self.cfg.calibration_per_class);
        Ok(Some((test.images, upsample_mask(mask, big / side)?)))
    }

    /// A lab over loaded data; image size and class count come from `train`.
    pub fn from_splits(mut cfg: BenchConfig, splits: Splits) -> Result<Self> {
        let (w, h, c) = splits
            .train
            .shape()
            .ok_or_else(|| CliError::Data("empty training set".into()))?;
        if w != h || c != 1 {
            return Err(CliError::Data(format!(
                "expected square grayscale images, got {w}x{h}x{c}"
            )));
        }
        cfg.data.size = w;
        cfg.data.classes = splits.train.num_classes();
        cfg.privacy_side = None;
        Ok(Self { cfg, splits })
    }

    pub fn side(&self) -> usize {
        self.cfg.data.size
    }

    pub fn arch(&self, fsm: bool) -> Arch {
        let arch = Arch::new(self.side(), 1, self.cfg.data.classes).with_widths(self.cfg.widths);
        if fsm {
            arch.with_fsm(self.cfg.insertion_point, self.cfg.fsm_width)
        } else {
            arch
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.cfg.train.clone()
        }
    }

    pub fn train_model(&self, seed: u64, fsm: bool, policy: MaskPolicy) -> Result<Network<f32>> {
        let net = Network::new(self.arch(fsm), seed)?;
        Ok(train(
            net,
            &self.splits.train,
            &self.train_config(seed),
            policy,
            None,
        )?
        .0)
    }

    pub fn level_ranges(&self) -> RmgRanges {
        self.cfg
            .level_ranges
            .clone()
            .unwrap_or_else(|| RmgRanges::levels(self.side(), self.side()))
    }

    /// `level_masks_per_image` in-band masks for every test image.
    pub fn level_masks(&self, seed: u64, level: u8) -> Result<Vec<Mask>> {
        let ranges = self.level_ranges();
        let n = self.splits.test.len() * self.cfg.level_masks_per_image;
        (0..n)
            .map(|i| {
                let s = level_mask_seed(seed, level, i);
                Ok(rmg_in_band(
                    &ranges,
                    level_band(level),
                    self.side(),
                    self.side(),
                    s,
                    IN_BAND_ATTEMPTS,
                )?
                .mask)
            })
            .collect()
    }

    /// Mean accuracy over the mask repetitions of [`Lab::level_masks`].
    pub fn level_accuracy(&self, net: &mut Network<f32>, masks: &[Mask]) -> Result<f64> {
        let test = &self.splits.test;
        let mut total = 0.0;
        let chunks: Vec<&[Mask]> = masks.chunks(test.len()).collect();
        for chunk in &chunks {
            total += accuracy(net, &test.images, &test.labels, EvalMasks::PerImage(chunk))?;
        }
        Ok(total / chunks.len() as f64)
    }

    /// MSM of the clean model over K seeded training images, in stored form,
    /// and its template at `threshold`.
    pub fn template(
        &self,
        clean: &mut Network<f32>,
        seed: u64,
        threshold: f64,
    ) -> Result<(SaliencyMap, Mask)> {
        let cfg = MsmConfig {
            threshold,
            ..self.cfg.msm
        };
        let mut idx = sample_indices(self.splits.train.len(), cfg.k, seed);
        idx.sort_unstable();
        let images: Vec<&Image> = idx.iter().map(|&i| &self.splits.train.images[i]).collect();
        let (msm, _) = build_template(
            &mut GradientSaliency::new(clean, SALIENCY_SOURCE),
            &images,
            &cfg,
        )?;
        let msm = stored_msm(&msm)?;
        let template = binarize(&msm, &cfg);
        Ok((msm, template))
    }

    pub fn search_config(&self, base_seed: u64) -> SearchConfig {
        SearchConfig {
            n: self.cfg.search_n,
            gamma: self.cfg.gamma,
            ranges: self
                .cfg
                .search_ranges
                .clone()
                .unwrap_or_else(|| RmgRanges::search(self.side(), self.side())),
            batch: self.cfg.search_batch,
            seed: base_seed,
        }
    }

    pub fn search(
        &self,
        clean: &mut Network<f32>,
        template: &Mask,
        base_seed: u64,
        threshold: f64,
    ) -> Result<(Mask, SearchReport)> {
        let cfg = MsmConfig {
            threshold,
            ..self.cfg.msm
        };
        let info = TemplateInfo::new(&cfg, SALIENCY_SOURCE, template);
        let train = &self.splits.train;
        Ok(search(
            &self.search_config(base_seed),
            template,
            info,
            &mut NetScorer { net: clean },
            &train.images,
            &train.labels,
        )?)
    }

    pub fn masked_accuracy(&self, net: &mut Network<f32>, mask: &Mask) -> Result<f64> {
        let test = &self.splits.test;
        Ok(accuracy(
            net,
            &test.images,
            &test.labels,
            EvalMasks::Fixed(mask),
        )?)
    }

    pub fn situations(
        &self,
        net: &mut Network<f32>,
        mask: &Mask,
        seed: u64,
    ) -> Result<SituationReport> {
        let (test, cal) = (&self.splits.test, &self.splits.calibration);
        let test_pairs = make_pairs(&test.labels, self.cfg.pairs, 2 * seed)?;
        let cal_pairs = make_pairs(&cal.labels, self.cfg.calibration_pairs, 2 * seed + 1)?;
        Ok(eval_situations(
            net,
            PairSet {
                images: &test.images,
                pairs: &test_pairs,
            },
            PairSet {
                images: &cal.images,
                pairs: &cal_pairs,
            },
            mask,
        )?)
    }

    pub fn run_seed(&self, seed: u64) -> Result<SeedRun> {
        let start = Instant::now();
        let mut clean = self.train_model(seed, false, MaskPolicy::None)?;
        let clean_secs = start.elapsed().as_secs_f64();
        let t = Instant::now();
        let mut masked =
            self.train_model(seed, false, MaskPolicy::PerLevel(self.level_ranges()))?;
        let masked_secs = t.elapsed().as_secs_f64();
        let mut levels = Vec::with_capacity(LEVELS.len());
        for level in LEVELS {
            let masks = self.level_masks(seed, level)?;
            levels.push(LevelAccuracy {
                level,
                clean: self.level_accuracy(&mut clean, &masks)?,
                masked: self.level_accuracy(&mut masked, &masks)?,
            });
        }
        let level_secs = start.elapsed().as_secs_f64();

        let t = Instant::now();
        let threshold = self.cfg.msm.threshold;
        let (msm, template) = self.template(&mut clean, seed, threshold)?;
        let (mask, report) = self.search(&mut clean, &template, search_seed(seed), threshold)?;
        let mut fsm = self.train_model(seed, true, MaskPolicy::Fixed(mask.clone()))?;
        let mut fixed = self.train_model(seed, false, MaskPolicy::Fixed(mask.clone()))?;
        let searched = SearchedAccuracy {
            seed,
            mask_ratio: masked_ratio(&mask),
            clean: self.masked_accuracy(&mut clean, &mask)?,
            masked: self.masked_accuracy(&mut masked, &mask)?,
            fixed: self.masked_accuracy(&mut fixed, &mask)?,
            fsm: self.masked_accuracy(&mut fsm, &mask)?,
        };
        let situations = self.situations(&mut fsm, &mask, seed)?;
        let searched_secs = t.elapsed().as_secs_f64() + clean_secs + masked_secs;
        Ok(SeedRun {
            result: SeedResult {
                seed,
                template_kept: 1.0 - masked_ratio(&template),
                levels,
                searched,
                situations,
                level_secs,
                searched_secs,
            },
            clean,
            masked,
            fsm,
            fixed,
            msm,
            template,
            mask,
            search: report,
        })
    }
}

/// Spearman rank correlation, ties given their mean rank.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0 + 1.0;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRow {
    pub level: u8,
    pub clean: Vec<f64>,
    pub masked: Vec<f64>,
    pub clean_mean: f64,
    pub masked_mean: f64,
    /// `masked_mean − clean_mean`.
    pub delta: f64,
}

/// Accuracy of the clean and the randomly mask-trained model per level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelTable {
    pub seeds: Vec<u64>,
    pub masks_per_image: usize,
    pub test_images: usize,
    pub rows: Vec<LevelRow>,
    pub clean_spearman: f64,
    pub seconds: f64,
}

pub fn level_table(lab: &Lab, results: &[SeedResult]) -> LevelTable {
    let rows: Vec<LevelRow> = LEVELS
        .iter()
        .enumerate()
        .map(|(i, &level)| {
            let clean: Vec<f64> = results.iter().map(|r| r.levels[i].clean).collect();
            let masked: Vec<f64> = results.iter().map(|r| r.levels[i].masked).collect();
            let (clean_mean, masked_mean) = (mean(&clean), mean(&masked));
            LevelRow {
                level,
                clean,
                masked,
                clean_mean,
                masked_mean,
                delta: masked_mean - clean_mean,
            }
        })
        .collect();
    let lv: Vec<f64> = rows.iter().map(|r| f64::from(r.level)).collect();
    let cm: Vec<f64> = rows.iter().map(|r| r.clean_mean).collect();
    LevelTable {
        seeds: results.iter().map(|r| r.seed).collect(),
        masks_per_image: lab.cfg.level_masks_per_image,
        test_images: lab.splits.test.len(),
        clean_spearman: spearman(&lv, &cm),
        rows,
        seconds: results.iter().map(|r| r.level_secs).sum(),
    }
}

/// Accuracy of every model on the searched mask of each seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchedTable {
    pub rows: Vec<SearchedAccuracy>,
    pub mean_ratio: f64,
    pub mean_clean: f64,
    pub mean_masked: f64,
    pub mean_fixed: f64,
    pub mean_fsm: f64,
    pub seconds: f64,
}

pub fn searched_table(results: &[SeedResult]) -> SearchedTable {
    let rows: Vec<SearchedAccuracy> = results.iter().map(|r| r.searched.clone()).collect();
    let m = |f: fn(&SearchedAccuracy) -> f64| mean(&rows.iter().map(f).collect::<Vec<_>>());
    SearchedTable {
        mean_ratio: m(|r| r.mask_ratio),
        mean_clean: m(|r| r.clean),
        mean_masked: m(|r| r.masked),
        mean_fixed: m(|r| r.fixed),
        mean_fsm: m(|r| r.fsm),
        seconds: results.iter().map(|r| r.searched_secs).sum(),
        rows,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SituationRow {
    pub seed: u64,
    pub both_masked: f64,
    pub clean_query: f64,
    pub both_clean: f64,
}

/// Verification accuracy of the gated model in the three situations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SituationTable {
    pub pairs: usize,
    pub calibration_pairs: usize,
    pub rows: Vec<SituationRow>,
    pub mean: [f64; 3],
}

pub fn situation_table(results: &[SeedResult]) -> SituationTable {
    let rows: Vec<SituationRow> = results
        .iter()
        .map(|r| {
            let acc = |s| r.situations.accuracy(s).unwrap_or(f64::NAN);
            SituationRow {
                seed: r.seed,
                both_masked: acc(Situation::BothMasked),
                clean_query: acc(Situation::CleanQuery),
                both_clean: acc(Situation::BothClean),
            }
        })
        .collect();
    let m = |f: fn(&SituationRow) -> f64| mean(&rows.iter().map(f).collect::<Vec<_>>());
    SituationTable {
        pairs: results.first().map_or(0, |r| r.situations.pairs),
        calibration_pairs: results
            .first()
            .map_or(0, |r| r.situations.calibration_pairs),
        mean: [
            m(|r| r.both_masked),
            m(|r| r.clean_query),
            m(|r| r.both_clean),
        ],
        rows,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyRow {
    pub method: String,
    pub k: Option<usize>,
    pub dssim: f64,
    /// Mean over images with finite PSNR; `None` when every output is
    /// identical to its input.
    pub psnr_db: Option<f64>,
}

/// Mean dSSIM and PSNR of each desensitization over the test images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyTable {
    pub images: usize,
    pub side: usize,
    pub mask_ratio: f64,
    pub rows: Vec<PrivacyRow>,
}

pub const MOSAIC_K: [usize; 2] = [8, 16];
pub const BLUR_K: [usize; 3] = [9, 18, 19];

fn privacy_row(
    method: &str,
    k: Option<usize>,
    images: &[Image],
    f: impl Fn(&Image) -> Result<Image>,
) -> Result<PrivacyRow> {
    let (mut d, mut p, mut finite) = (0.0, 0.0, 0usize);
    for img in images {
        let out = f(img)?;
        d += dssim(img, &out)?;
        let db = psnr(img, &out)?;
        if db.is_finite() {
            p += db;
            finite += 1;
        }
    }
    Ok(PrivacyRow {
        method: method.into(),
        k,
        dssim: d / images.len() as f64,
        psnr_db: (finite > 0).then(|| p / finite as f64),
    })
}

pub fn privacy_table(images: &[Image], mask: &Mask) -> Result<PrivacyTable> {
    let mut rows = vec![privacy_row("mask", None, images, |i| {
        Ok(apply_mask(i, mask)?)
    })?];
    for k in MOSAIC_K {
        rows.push(privacy_row("mosaic", Some(k), images, |i| {
            Ok(mosaic(i, k))
        })?);
    }
    for k in BLUR_K {
        rows.push(privacy_row("blur", Some(k), images, |i| {
            Ok(gaussian_blur(i, k))
        })?);
    }
    Ok(PrivacyTable {
        images: images.len(),
        side: mask.width(),
        mask_ratio: masked_ratio(mask),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "T")]
    pub threshold: f64,
    pub template_kept: f64,
    /// Mask file, relative to the sweep directory.
    pub mask_file: String,
    pub search_file: String,
    pub mask_ratio: f64,
    pub dssim: f64,
    pub masked_acc: Option<f64>,
    pub fsm_acc: f64,
}

/// Per-threshold outcome of the whole pipeline from one stored MSM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub seed: u64,
    pub msm_file: String,
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_FILE: &str = "sweep_t.json";
pub const SWEEP_TABLE: &str = "sweep_t.md";
pub const SWEEP_MSM: &str = "msm.pgm";

pub fn mask_file_name(threshold: f64) -> String {
    format!("mask_T{threshold:.2}.pgm")
}

/// Models and saliency a sweep starts from.
pub struct SweepInputs<'a> {
    pub clean: &'a mut Network<f32>,
    /// Randomly mask-trained comparison model, if any.
    pub masked: Option<&'a mut Network<f32>>,
    pub msm: &'a SaliencyMap,
    /// Training seed of the gated models.
    pub seed: u64,
    pub search_seed: u64,
}

/// Runs template, search, gated training and evaluation for every threshold
/// from one MSM, writing the MSM, every mask and search report, the table
/// JSON and its rendering into `dir`.
pub fn sweep(lab: &Lab, inputs: SweepInputs<'_>, dir: &Path) -> Result<SweepTable> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let msm_path = dir.join(SWEEP_MSM);
    std::fs::write(&msm_path, stored_msm(inputs.msm)?.to_pgm())
        .map_err(|e| CliError::io(&msm_path, e))?;
    let msm =
        SaliencyMap::from_pgm(&std::fs::read(&msm_path).map_err(|e| CliError::io(&msm_path, e))?)?;
    let SweepInputs {
        clean,
        mut masked,
        seed,
        search_seed,
        ..
    } = inputs;
    let mut rows = Vec::with_capacity(lab.cfg.sweep.len());
    for &threshold in &lab.cfg.sweep {
        let cfg = MsmConfig {
            threshold,
            ..lab.cfg.msm
        };
        let template = binarize(&msm, &cfg);
        let (mask, report) = lab.search(clean, &template, search_seed, threshold)?;
        let mask_file = mask_file_name(threshold);
        let search_file = format!("search_T{threshold:.2}.json");
        netpbm::save_mask(dir.join(&mask_file), &mask)?;
        write_json(&dir.join(&search_file), &report)?;
        let mut fsm = lab.train_model(seed, true, MaskPolicy::Fixed(mask.clone()))?;
        let images = &lab.splits.test.images;
        let mut d = 0.0;
        for img in images {
            d += dssim(img, &apply_mask(img, &mask)?)?;
        }
        let masked_acc = match masked.as_deref_mut() {
            Some(net) => Some(lab.masked_accuracy(net, &mask)?),
            None => None,
        };
        rows.push(SweepRow {
            threshold,
            template_kept: 1.0 - masked_ratio(&template),
            mask_file,
            search_file,
            mask_ratio: masked_ratio(&mask),
            dssim: d / images.len() as f64,
            masked_acc,
            fsm_acc: lab.masked_accuracy(&mut fsm, &mask)?,
        });
    }
    let table = SweepTable {
        seed,
        msm_file: SWEEP_MSM.into(),
        rows,
    };
    write_json(&dir.join(SWEEP_FILE), &table)?;
    write_text(&dir.join(SWEEP_TABLE), &report::render_sweep(&table))?;
    Ok(table)
}

/// Federated training of the gated model on disjoint shards against the
/// centralized model of the same seed, at equal schedule length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedTable {
    pub seed: u64,
    pub clients: usize,
    pub rounds: usize,
    pub local_iters: usize,
    pub momentum: MomentumPolicy,
    pub centralized_acc: f64,
    pub federated_acc: f64,
    pub history: Vec<RoundRecord>,
}

pub fn federated(lab: &Lab, run: &mut SeedRun) -> Result<FedTable> {
    let seed = run.result.seed;
    let total = lab.cfg.train.iterations;
    let rounds = lab.cfg.fed_rounds;
    if rounds == 0 || !total.is_multiple_of(rounds) {
        return Err(CliError::Usage(format!(
            "{total} iterations do not split into {rounds} rounds"
        )));
    }
    let fed = FedConfig::new(lab.cfg.fed_clients, rounds, total / rounds);
    let init = Network::new(lab.arch(true), seed)?;
    let out = run_federated(
        init,
        &fed,
        &lab.train_config(seed),
        &lab.splits.train,
        Some(&run.mask),
        Some(&lab.splits.test),
    )?;
    let mut global = out.global;
    Ok(FedTable {
        seed,
        clients: fed.clients,
        rounds,
        local_iters: fed.local_iters,
        momentum: out.momentum,
        centralized_acc: lab.masked_accuracy(&mut run.fsm, &run.mask)?,
        federated_acc: lab.masked_accuracy(&mut global, &run.mask)?,
        history: out.history,
    })
}

/// File names of the stored tables.
pub const LEVEL_FILE: &str = "levels.json";
pub const SEARCHED_FILE: &str = "searched.json";
pub const SITUATION_FILE: &str = "situations.json";
pub const PRIVACY_FILE: &str = "privacy.json";
pub const PRIVACY_NATIVE_FILE: &str = "privacy_native.json";
pub const FED_FILE: &str = "federated.json";
pub const BENCH_FILE: &str = "bench.json";
pub const SEEDS_FILE: &str = "seeds.json";

/// Everything the full bench produces.
pub struct BenchOutcome {
    pub levels: LevelTable,
    pub searched: SearchedTable,
    pub situations: SituationTable,
    /// Measured on the re-rendered corpus when `privacy_side` is set.
    pub privacy: PrivacyTable,
    pub privacy_native: PrivacyTable,
    pub sweep: SweepTable,
    pub federated: FedTable,
    /// Searched mask of the first seed.
    pub mask: Mask,
    pub sweep_secs: f64,
}

/// Runs every seed, the sweep and the federated comparison, storing all
/// tables as JSON in `dir` (the sweep in `dir/sweep`).
pub fn run_bench(lab: &Lab, dir: &Path, mut progress: impl FnMut(&str)) -> Result<BenchOutcome> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    write_json(&dir.join(BENCH_FILE), &lab.cfg)?;
    let mut first: Option<SeedRun> = None;
    let mut results = Vec::with_capacity(lab.cfg.seeds.len());
    for &seed in &lab.cfg.seeds {
        let run = lab.run_seed(seed)?;
        progress(&format!(
            "seed {seed}: levels {:.0}s, searched {:.0}s, mask ratio {:.3}",
            run.result.level_secs, run.result.searched_secs, run.result.searched.mask_ratio
        ));
        results.push(run.result.clone());
        if first.is_none() {
            first = Some(run);
        }
    }
    let mut first = first.ok_or_else(|| CliError::Usage("bench needs at least one seed".into()))?;
    write_json(&dir.join(SEEDS_FILE), &results)?;
    netpbm::save_mask(dir.join("mask.pgm"), &first.mask)?;
    let levels = level_table(lab, &results);
    let searched = searched_table(&results);
    let situations = situation_table(&results);
    let privacy_native = privacy_table(&lab.splits.test.images, &first.mask)?;
    let privacy = match lab.privacy_corpus(&first.mask)? {
        Some((images, mask)) => privacy_table(&images, &mask)?,
        None => privacy_native.clone(),
    };
    write_json(&dir.join(LEVEL_FILE), &levels)?;
    write_json(&dir.join(SEARCHED_FILE), &searched)?;
    write_json(&dir.join(SITUATION_FILE), &situations)?;
    write_json(&dir.join(PRIVACY_FILE), &privacy)?;
    write_json(&dir.join(PRIVACY_NATIVE_FILE), &privacy_native)?;
    let t = Instant::now();
    let sweep_inputs = SweepInputs {
        clean: &mut first.clean,
        masked: Some(&mut first.masked),
        msm: &first.msm,
        seed: first.result.seed,
        search_seed: search_seed(first.result.seed),
    };
    let sweep_table = sweep(lab, sweep_inputs, &dir.join("sweep"))?;
    let sweep_secs = t.elapsed().as_secs_f64();
    progress(&format!("sweep {sweep_secs:.0}s"));
    let fed = federated(lab, &mut first)?;
    write_json(&dir.join(FED_FILE), &fed)?;
    progress("federated done");
    Ok(BenchOutcome {
        levels,
        searched,
        situations,
        privacy,
        privacy_native,
        sweep: sweep_table,
        federated: fed,
        mask: first.mask,
        sweep_secs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn spearman_known_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[0.9, 0.5, 0.1]), -1.0);
        assert_eq!(
            spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 2.0, 3.0]),
            0.9486832980505138
        );
    }

    proptest! {
        #[test]
        fn spearman_is_rank_invariant(v in proptest::collection::vec(-1e3f64..1e3, 3..12)) {
            prop_assume!(v.iter().any(|&a| a != v[0]));
            let idx: Vec<f64> = (0..v.len()).map(|i| i as f64).collect();
            let rho = spearman(&idx, &v);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&rho));
            // a monotone transform leaves ranks unchanged
            let cubed: Vec<f64> = v.iter().map(|a| a.powi(3) + 7.0).collect();
            prop_assert!((spearman(&idx, &cubed) - rho).abs() < 1e-12);
            let neg: Vec<f64> = v.iter().map(|a| -a).collect();
            prop_assert!((spearman(&idx, &neg) + rho).abs() < 1e-12);
        }
    }
}
