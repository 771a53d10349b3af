//! Subcommand definitions and their implementations.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use desense_core::baselines::{gaussian_blur, mosaic};
use desense_core::dataset::Dataset;
use desense_core::maskgen::{level_band, masked_ratio, rmg, rmg_in_band};
use desense_core::metrics::{dssim, psnr, ssim};
use desense_core::rng::sample_indices;
use desense_core::saliency::{binarize, build_template, MsmConfig, SaliencyMap};
use desense_core::search::{search, TemplateInfo};
use desense_core::synth::{generate, SynthConfig};
use desense_core::{apply_mask, netpbm, Image, Mask};
use desense_net::fedsim::{run_federated, MomentumPolicy};
use desense_net::saliency::{GradientSaliency, NetScorer};
use desense_net::train::{accuracy, train, EvalMasks, EvalSet};
use desense_net::verify::{eval_situations, make_pairs, PairSet, SituationReport};
use desense_net::{MaskPolicy, ModelState, Network};
use serde::{Deserialize, Serialize};

use crate::artifacts::{write_json, write_jsonl, write_text};
use crate::config::Config;
use crate::error::{CliError, Result};
use crate::experiments::{self, BenchConfig, Lab, Splits, SweepInputs, SALIENCY_SOURCE};
use crate::report;

#[derive(Debug, Parser)]
#[command(
    name = "desense",
    version,
    about = "Mask-based image desensitization pipeline"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the bundled synthetic identity set as a dataset directory.
    Gendata(GendataArgs),
    /// Mean saliency map of a clean model and its critical template.
    Gentemplate(GentemplateArgs),
    /// One random free-form mask.
    Genmask(GenmaskArgs),
    /// Search for the desensitization mask.
    Search(SearchArgs),
    /// Desensitize a dataset by mask, blur or mosaic.
    Desensitize(DesensitizeArgs),
    /// SSIM, dSSIM and PSNR between two datasets.
    Metrics(MetricsArgs),
    /// Train a clean, mask-trained, fixed-mask or gated model.
    Train(TrainArgs),
    /// Federated training with a shared mask.
    Fedtrain(FedtrainArgs),
    /// Closed-set accuracy and verification situations.
    Eval(EvalArgs),
    /// Render tables from stored JSON artifacts.
    Report(ReportArgs),
    /// Run the pipeline for several template thresholds.
    #[command(name = "sweep_T", alias = "sweep-t")]
    SweepT(SweepArgs),
    /// All desk-scale trend experiments on the bundled set.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GendataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 70)]
    pub per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write `train`, `calibration` and `test` subdirectories instead of one
    /// set, taking this many images per class for training...
    #[arg(long, requires = "calibration_per_class")]
    pub train_per_class: Option<usize>,
    /// ...and this many for calibration; the rest is the test set.
    #[arg(long, requires = "train_per_class")]
    pub calibration_per_class: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GentemplateArgs {
    /// Clean-trained checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed of the K-image sample.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "K")]
    pub k: Option<usize>,
    #[arg(long = "T")]
    pub threshold: Option<f64>,
    /// MSM output, rescaled to unit peak.
    #[arg(long)]
    pub out_msm: PathBuf,
    /// Template mask output.
    #[arg(long)]
    pub out: PathBuf,
    /// Template provenance JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenmaskArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    /// Rejection-sample into the ratio band of this level (1–6).
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=6))]
    pub level: Option<u8>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    /// Clean-trained scorer checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base seed; candidate i uses seed + i + 1.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Ready-made template mask.
    #[arg(long, conflicts_with = "msm")]
    pub template: Option<PathBuf>,
    /// Stored MSM, binarized at T.
    #[arg(long)]
    pub msm: Option<PathBuf>,
    #[arg(long = "T")]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Mask,
    Blur,
    Mosaic,
}

#[derive(Debug, Args)]
pub struct DesensitizeArgs {
    #[arg(long, value_enum)]
    pub method: Method,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Kernel size for blur and mosaic.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub original: PathBuf,
    #[arg(long)]
    pub desensitized: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    /// Clean images.
    Clean,
    /// Fresh random level-banded masks per batch.
    Mask,
    /// The given mask on every sample, no gate.
    Fixed,
    /// The given mask on every sample, gated.
    Fsm,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Clean)]
    pub mode: Mode,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Training history as JSON lines.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Held-out set evaluated at the history's evaluation points.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Momentum {
    Reset,
    Carry,
}

#[derive(Debug, Args)]
pub struct FedtrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Shared desensitization mask; clean training without it.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Gate the model with the mask.
    #[arg(long)]
    pub fsm: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub clients: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub local_iters: Option<usize>,
    #[arg(long, value_enum)]
    pub momentum: Option<Momentum>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-round history as JSON lines.
    #[arg(long)]
    pub history: PathBuf,
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Test set.
    #[arg(long)]
    pub data: PathBuf,
    /// Disjoint calibration set; enables the verification situations.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Pair sampling seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 400)]
    pub pairs: usize,
    #[arg(long, default_value_t = 200)]
    pub calibration_pairs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Clean-trained scorer checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Randomly mask-trained comparison checkpoint.
    #[arg(long)]
    pub masked_model: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub msm: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "T", value_delimiter = ',', default_values_t = experiments::SWEEP_T)]
    pub thresholds: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long)]
    pub iters: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub a: String,
    pub b: String,
    pub ssim: f64,
    pub dssim: f64,
    /// `None` for identical images.
    pub psnr_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusMean {
    pub ssim: f64,
    pub dssim: f64,
    /// Mean over pairs with finite PSNR.
    pub psnr_db: Option<f64>,
    pub identical: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pairs: Vec<PairMetrics>,
    pub corpus_mean: CorpusMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub gated: bool,
    pub mask_ratio: Option<f64>,
    pub clean_accuracy: Option<f64>,
    pub masked_accuracy: Option<f64>,
    pub situations: Option<SituationReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedSummary {
    pub clients: usize,
    pub rounds_run: usize,
    pub local_iters: usize,
    pub momentum: MomentumPolicy,
    pub stopped_early: bool,
    pub final_acc: Option<f64>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gendata(a) => gendata(a),
        Command::Gentemplate(a) => gentemplate(a),
        Command::Genmask(a) => genmask(a),
        Command::Search(a) => search_cmd(a),
        Command::Desensitize(a) => desensitize(a),
        Command::Metrics(a) => metrics(a),
        Command::Train(a) => train_cmd(a),
        Command::Fedtrain(a) => fedtrain(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report_cmd(a),
        Command::SweepT(a) => sweep_cmd(a),
        Command::Bench(a) => bench(a),
    }
}

fn load_data(dir: &Path) -> Result<Dataset> {
    let data =
        Dataset::load_dir(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    if data.is_empty() {
        return Err(CliError::Data(format!("{}: no images", dir.display())));
    }
    Ok(data)
}

fn load_model(path: &Path) -> Result<Network<f32>> {
    let state =
        ModelState::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(Network::from_state(&state)?)
}

fn load_mask(path: &Path) -> Result<Mask> {
    netpbm::load_mask(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_msm(path: &Path) -> Result<SaliencyMap> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    SaliencyMap::from_pgm(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn require_mask(mask: &Option<PathBuf>, what: &str) -> Result<Mask> {
    match mask {
        Some(p) => load_mask(p),
        None => Err(CliError::Usage(format!("{what} needs --mask"))),
    }
}

fn gendata(a: GendataArgs) -> Result<()> {
    let cfg = SynthConfig {
        classes: a.classes,
        per_class: a.per_class,
        size: a.size,
        seed: a.seed,
        noise: a.noise,
        ..Default::default()
    };
    let data = generate(&cfg)?;
    match (a.train_per_class, a.calibration_per_class) {
        (Some(t), Some(c)) => {
            let (train, rest) = data.split_per_class(t);
            let (calibration, test) = rest.split_per_class(c);
            if [&train, &calibration, &test].iter().any(|d| d.is_empty()) {
                return Err(CliError::Usage(format!(
                    "{} images per class cannot fill all three splits",
                    a.per_class
                )));
            }
            train.save_dir(a.out.join("train"))?;
            calibration.save_dir(a.out.join("calibration"))?;
            test.save_dir(a.out.join("test"))?;
        }
        _ => data.save_dir(&a.out)?,
    }
    Ok(())
}

fn gentemplate(a: GentemplateArgs) -> Result<()> {
    let mut cfg = Config::load(a.config.as_deref())?.msm;
    cfg.k = a.k.unwrap_or(cfg.k);
    cfg.threshold = a.threshold.unwrap_or(cfg.threshold);
    let data = load_data(&a.data)?;
    let mut net = load_model(&a.model)?;
    let mut idx = sample_indices(data.len(), cfg.k, a.seed);
    idx.sort_unstable();
    let images: Vec<&Image> = idx.iter().map(|&i| &data.images[i]).collect();
    let (msm, _) = build_template(
        &mut GradientSaliency::new(&mut net, SALIENCY_SOURCE),
        &images,
        &cfg,
    )?;
    let stored = experiments::stored_msm(&msm)?;
    std::fs::write(&a.out_msm, stored.to_pgm()).map_err(|e| CliError::io(&a.out_msm, e))?;
    let template = binarize(&stored, &cfg);
    netpbm::save_mask(&a.out, &template)?;
    if let Some(path) = &a.report {
        write_json(path, &TemplateInfo::new(&cfg, SALIENCY_SOURCE, &template))?;
    }
    Ok(())
}

fn genmask(a: GenmaskArgs) -> Result<()> {
    let cfg = Config::load(a.config.as_deref())?;
    let mask = match a.level {
        Some(level) => {
            let ranges = cfg.rmg.level_ranges(a.width, a.height);
            rmg_in_band(&ranges, level_band(level), a.width, a.height, a.seed, 512)?.mask
        }
        None => {
            let ranges = cfg.rmg.search_ranges(a.width, a.height);
            ranges.validate()?;
            rmg(&ranges.draw_for_seed(a.seed), a.width, a.height, a.seed)?
        }
    };
    netpbm::save_mask(&a.out, &mask)?;
    Ok(())
}

fn search_cmd(a: SearchArgs) -> Result<()> {
    let config = Config::load(a.config.as_deref())?;
    let data = load_data(&a.data)?;
    let (w, h, _) = data.shape().expect("nonempty");
    let mut scfg = config.search_config(w, h);
    scfg.seed = a.seed.unwrap_or(scfg.seed);
    scfg.n = a.n.unwrap_or(scfg.n);
    scfg.gamma = a.gamma.unwrap_or(scfg.gamma);
    let msm_cfg = MsmConfig {
        threshold: a.threshold.unwrap_or(config.msm.threshold),
        ..config.msm
    };
    msm_cfg.validate()?;
    let (template, source) = match (&a.template, &a.msm) {
        (Some(t), None) => (load_mask(t)?, format!("template {}", t.display())),
        (None, Some(m)) => (
            binarize(&load_msm(m)?, &msm_cfg),
            SALIENCY_SOURCE.to_string(),
        ),
        _ => {
            return Err(CliError::Usage(
                "search needs exactly one of --template or --msm".into(),
            ))
        }
    };
    let mut net = load_model(&a.model)?;
    let info = TemplateInfo::new(&msm_cfg, source, &template);
    let (mask, report) = search(
        &scfg,
        &template,
        info,
        &mut NetScorer { net: &mut net },
        &data.images,
        &data.labels,
    )?;
    netpbm::save_mask(&a.out, &mask)?;
    write_json(&a.report, &report)
}

fn desensitize(a: DesensitizeArgs) -> Result<()> {
    let data = load_data(&a.input)?;
    let op: Box<dyn Fn(&Image) -> Result<Image>> = match a.method {
        Method::Mask => {
            let mask = require_mask(&a.mask, "--method mask")?;
            Box::new(move |i| Ok(apply_mask(i, &mask)?))
        }
        Method::Blur => {
            let k = a.k.unwrap_or(9);
            if k == 0 {
                return Err(CliError::Usage("--k must be >= 1".into()));
            }
            Box::new(move |i| Ok(gaussian_blur(i, k)))
        }
        Method::Mosaic => {
            let k = a.k.unwrap_or(16);
            if k == 0 {
                return Err(CliError::Usage("--k must be >= 1".into()));
            }
            Box::new(move |i| Ok(mosaic(i, k)))
        }
    };
    let images = data.images.iter().map(op).collect::<Result<Vec<_>>>()?;
    Dataset::new(images, data.labels, data.paths)?.save_dir(&a.out)?;
    Ok(())
}

pub fn metrics_report(original: &Dataset, desensitized: &Dataset) -> Result<MetricsReport> {
    let index: std::collections::HashMap<&str, usize> = desensitized
        .paths
        .iter()
        .enumerate()
        .map(|(i, p)| (p.as_str(), i))
        .collect();
    let mut pairs = Vec::with_capacity(original.len());
    for (img, path) in original.images.iter().zip(&original.paths) {
        let j = *index
            .get(path.as_str())
            .ok_or_else(|| CliError::Data(format!("{path} has no desensitized counterpart")))?;
        let other = &desensitized.images[j];
        let s = ssim(img, other)?;
        let p = psnr(img, other)?;
        pairs.push(PairMetrics {
            a: path.clone(),
            b: desensitized.paths[j].clone(),
            ssim: s,
            dssim: dssim(img, other)?,
            psnr_db: p.is_finite().then_some(p),
        });
    }
    if pairs.is_empty() {
        return Err(CliError::Data("no image pairs".into()));
    }
    let n = pairs.len() as f64;
    let finite: Vec<f64> = pairs.iter().filter_map(|p| p.psnr_db).collect();
    let corpus_mean = CorpusMean {
        ssim: pairs.iter().map(|p| p.ssim).sum::<f64>() / n,
        dssim: pairs.iter().map(|p| p.dssim).sum::<f64>() / n,
        psnr_db: (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64),
        identical: pairs.len() - finite.len(),
    };
    Ok(MetricsReport { pairs, corpus_mean })
}

fn metrics(a: MetricsArgs) -> Result<()> {
    let report = metrics_report(&load_data(&a.original)?, &load_data(&a.desensitized)?)?;
    match &a.out {
        Some(path) => write_json(path, &report),
        None => {
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("plain data")
            );
            Ok(())
        }
    }
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let config = Config::load(a.config.as_deref())?;
    let data = load_data(&a.data)?;
    let (w, h, c) = data.shape().expect("nonempty");
    if w != h {
        return Err(CliError::Data(format!(
            "training images must be square, got {w}x{h}"
        )));
    }
    let mut cfg = config.train.train_config(a.seed);
    cfg.iterations = a.iters.unwrap_or(cfg.iterations);
    let (policy, fsm) = match a.mode {
        Mode::Clean => (MaskPolicy::None, false),
        Mode::Mask => (MaskPolicy::PerLevel(config.rmg.level_ranges(w, h)), false),
        Mode::Fixed => (
            MaskPolicy::Fixed(require_mask(&a.mask, "--mode fixed")?),
            false,
        ),
        Mode::Fsm => (
            MaskPolicy::Fixed(require_mask(&a.mask, "--mode fsm")?),
            true,
        ),
    };
    let net = Network::new(config.train.arch(w, c, data.num_classes(), fsm), a.seed)?;
    let eval_data = a.eval_data.as_deref().map(load_data).transpose()?;
    let eval = eval_data.as_ref().map(|d| EvalSet {
        data: d,
        masks: match &policy {
            MaskPolicy::Fixed(m) => EvalMasks::Fixed(m),
            _ => EvalMasks::None,
        },
    });
    let (net, history) = train(net, &data, &cfg, policy.clone(), eval)?;
    net.state().save(&a.out)?;
    if let Some(path) = &a.history {
        write_jsonl(path, &history)?;
    }
    Ok(())
}

fn fedtrain(a: FedtrainArgs) -> Result<()> {
    let config = Config::load(a.config.as_deref())?;
    let data = load_data(&a.data)?;
    let (w, _, c) = data.shape().expect("nonempty");
    let mask = a.mask.as_deref().map(load_mask).transpose()?;
    if a.fsm && mask.is_none() {
        return Err(CliError::Usage("--fsm needs --mask".into()));
    }
    let mut fed = config.fed.fed_config();
    fed.clients = a.clients.unwrap_or(fed.clients);
    fed.rounds = a.rounds.unwrap_or(fed.rounds);
    fed.local_iters = a.local_iters.unwrap_or(fed.local_iters);
    if let Some(m) = a.momentum {
        fed.momentum = match m {
            Momentum::Reset => MomentumPolicy::Reset,
            Momentum::Carry => MomentumPolicy::Carry,
        };
    }
    let net = Network::new(config.train.arch(w, c, data.num_classes(), a.fsm), a.seed)?;
    let eval = a.eval_data.as_deref().map(load_data).transpose()?;
    let out = run_federated(
        net,
        &fed,
        &config.train.train_config(a.seed),
        &data,
        mask.as_ref(),
        eval.as_ref(),
    )?;
    out.global.state().save(&a.out)?;
    write_jsonl(&a.history, &out.history)?;
    let summary = FedSummary {
        clients: fed.clients,
        rounds_run: out.history.len(),
        local_iters: fed.local_iters,
        momentum: out.momentum,
        stopped_early: out.stopped_early,
        final_acc: out.history.last().and_then(|r| r.global_acc),
    };
    println!("{}", serde_json::to_string(&summary).expect("plain data"));
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut net = load_model(&a.model)?;
    let data = load_data(&a.data)?;
    let mask = a.mask.as_deref().map(load_mask).transpose()?;
    let closed_set = data.labels.iter().all(|&l| l < net.arch().classes);
    let clean_accuracy = closed_set
        .then(|| accuracy(&mut net, &data.images, &data.labels, EvalMasks::None))
        .transpose()?;
    let masked_accuracy = match (&mask, closed_set) {
        (Some(m), true) => Some(accuracy(
            &mut net,
            &data.images,
            &data.labels,
            EvalMasks::Fixed(m),
        )?),
        _ => None,
    };
    let situations = match (&a.calibration, &mask) {
        (Some(cal_dir), Some(m)) => {
            let cal = load_data(cal_dir)?;
            let test_pairs = make_pairs(&data.labels, a.pairs, 2 * a.seed)?;
            let cal_pairs = make_pairs(&cal.labels, a.calibration_pairs, 2 * a.seed + 1)?;
            Some(eval_situations(
                &mut net,
                PairSet {
                    images: &data.images,
                    pairs: &test_pairs,
                },
                PairSet {
                    images: &cal.images,
                    pairs: &cal_pairs,
                },
                m,
            )?)
        }
        (Some(_), None) => {
            return Err(CliError::Usage(
                "verification situations need --mask".into(),
            ))
        }
        _ => None,
    };
    let report = EvalReport {
        images: data.len(),
        gated: net.has_fsm(),
        mask_ratio: mask.as_ref().map(masked_ratio),
        clean_accuracy,
        masked_accuracy,
        situations,
    };
    write_json(&a.out, &report)
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let text = report::regenerate(&a.dir)?;
    match &a.out {
        Some(path) => write_text(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Bench settings taken from a run configuration.
pub fn bench_config(config: &Config) -> BenchConfig {
    BenchConfig {
        widths: config.train.widths,
        insertion_point: config.train.insertion_point,
        fsm_width: config.train.fsm_width,
        train: config.train.train_config(0),
        msm: config.msm,
        search_n: config.search.n,
        gamma: config.search.gamma,
        search_batch: config.search.batch,
        fed_clients: config.fed.clients,
        fed_rounds: config.fed.rounds,
        search_ranges: config.rmg.search.clone(),
        level_ranges: config.rmg.levels.clone(),
        ..BenchConfig::default()
    }
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let config = Config::load(a.config.as_deref())?;
    let mut cfg = bench_config(&config);
    cfg.sweep = a.thresholds.clone();
    if let Some(t) = cfg.sweep.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(CliError::Usage(format!("T = {t} outside (0, 1)")));
    }
    let splits = Splits {
        train: load_data(&a.data)?,
        calibration: Dataset::default(),
        test: load_data(&a.test)?,
    };
    let lab = Lab::from_splits(cfg, splits)?;
    let msm = load_msm(&a.msm)?;
    let mut clean = load_model(&a.model)?;
    let mut masked = a.masked_model.as_deref().map(load_model).transpose()?;
    let inputs = SweepInputs {
        clean: &mut clean,
        masked: masked.as_mut(),
        msm: &msm,
        seed: a.seed,
        search_seed: config.search.seed,
    };
    experiments::sweep(&lab, inputs, &a.out)?;
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let mut cfg = BenchConfig {
        seeds: (0..a.seeds).collect(),
        ..BenchConfig::default()
    };
    if let Some(iters) = a.iters {
        cfg.train.iterations = iters;
    }
    let lab = Lab::new(cfg)?;
    experiments::run_bench(&lab, &a.out, |m| eprintln!("{m}"))?;
    write_text(&a.out.join("report.md"), &report::regenerate(&a.out)?)
}
