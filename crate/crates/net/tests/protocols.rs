use desense_core::dataset::Dataset;
use desense_core::synth::{generate, SynthConfig};
use desense_core::{Image, Mask};
use desense_net::fedsim::{run_federated, FedConfig, MomentumPolicy};
use desense_net::train::{train, TrainConfig};
use desense_net::verify::{
    calibrate_threshold, cosine_similarity, cosine_verify, eval_situations, make_pairs, Decision,
    Embedder, PairSet, Situation,
};
use desense_net::{Arch, MaskPolicy, NetError, Network, Result};

#[test]
fn cosine_cases() {
    let s = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
    assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    assert!((cosine_similarity(&[2.0, -1.0], &[4.0, -2.0]).unwrap() - 1.0).abs() < 1e-15);
    assert!(matches!(
        cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
        Err(NetError::ZeroNorm)
    ));
    assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
    assert_eq!(
        cosine_verify(&[1.0, 0.0], &[1.0, 1.0], 0.7).unwrap().0,
        Decision::Same
    );
    assert_eq!(
        cosine_verify(&[1.0, 0.0], &[1.0, 1.0], 0.71).unwrap().0,
        Decision::Different
    );
}

#[test]
fn threshold_separates_clean_scores() {
    let scored = [(0.9, true), (0.8, true), (0.3, false), (0.1, false)];
    let t = calibrate_threshold(&scored).unwrap();
    assert!((t - 0.55).abs() < 1e-12);
    assert!(calibrate_threshold(&[]).is_err());
}

#[test]
fn pairs_are_balanced_and_seeded() {
    let labels = [0, 0, 1, 1, 2, 2, 2];
    let pairs = make_pairs(&labels, 40, 3).unwrap();
    assert_eq!(pairs, make_pairs(&labels, 40, 3).unwrap());
    assert_eq!(pairs.iter().filter(|p| p.same).count(), 20);
    for p in &pairs {
        assert_eq!(labels[p.a] == labels[p.b], p.same);
        assert_ne!(p.a, p.b);
    }
    assert!(make_pairs(&[0, 1, 2], 4, 0).is_err());
}

/// Embeds an image by its brightness as a direction on the unit circle and
/// records which calls saw a mask.
#[derive(Default)]
struct AngleEmbedder {
    masked_calls: usize,
    clean_calls: usize,
}

impl Embedder for AngleEmbedder {
    fn embed(&mut self, image: &Image, mask: Option<&Mask>) -> Result<Vec<f64>> {
        match mask {
            Some(_) => self.masked_calls += 1,
            None => self.clean_calls += 1,
        }
        let angle = image.samples()[0] * std::f64::consts::PI;
        Ok(vec![angle.cos(), angle.sin()])
    }
}

fn class_images(per_class: usize) -> (Vec<Image>, Vec<usize>) {
    let labels: Vec<usize> = (0..4).flat_map(|c| vec![c; per_class]).collect();
    let images = labels
        .iter()
        .map(|&c| Image::filled(4, 4, 1, c as f64 * 0.25).unwrap())
        .collect();
    (images, labels)
}

#[test]
fn perfect_embedder_scores_perfectly_everywhere() {
    let (images, labels) = class_images(5);
    let test_pairs = make_pairs(&labels, 30, 1).unwrap();
    let cal_pairs = make_pairs(&labels, 30, 2).unwrap();
    let mask = Mask::ones(4, 4);
    let mut e = AngleEmbedder::default();
    let report = eval_situations(
        &mut e,
        PairSet {
            images: &images,
            pairs: &test_pairs,
        },
        PairSet {
            images: &images,
            pairs: &cal_pairs,
        },
        &mask,
    )
    .unwrap();
    for s in Situation::ALL {
        assert_eq!(report.accuracy(s), Some(1.0), "{s:?}");
    }
}

#[test]
fn both_clean_situation_never_masks() {
    let (images, labels) = class_images(3);
    let pairs = make_pairs(&labels, 10, 4).unwrap();
    let set = PairSet {
        images: &images,
        pairs: &pairs,
    };
    let mut e = AngleEmbedder::default();
    let report = eval_situations(&mut e, set, set, &Mask::zeros(4, 4)).unwrap();
    assert_eq!(report.results.len(), 3);
    // the first two situations mask at least the gallery side; rerunning the
    // clean one alone must not touch the mask at all
    let mut clean_only = AngleEmbedder::default();
    let scored: Vec<(f64, bool)> = pairs
        .iter()
        .map(|p| {
            let a = clean_only.embed(&images[p.a], None).unwrap();
            let b = clean_only.embed(&images[p.b], None).unwrap();
            (cosine_similarity(&a, &b).unwrap(), p.same)
        })
        .collect();
    let t = calibrate_threshold(&scored).unwrap();
    let clean = report
        .results
        .iter()
        .find(|r| r.situation == Situation::BothClean)
        .unwrap();
    assert_eq!(clean.threshold, t);
    assert!(e.masked_calls > 0 && e.clean_calls > 0);
    assert_eq!(clean_only.masked_calls, 0);
}

fn fed_data() -> Dataset {
    generate(&SynthConfig {
        classes: 3,
        per_class: 6,
        size: 32,
        seed: 8,
        ..Default::default()
    })
    .unwrap()
}

fn fed_setup() -> (Network<f32>, TrainConfig) {
    let net = Network::<f32>::new(Arch::new(32, 1, 3).with_widths([4, 4, 6, 8]), 2).unwrap();
    let cfg = TrainConfig {
        iterations: 12,
        batch_size: 4,
        lr: 0.05,
        seed: 11,
        ..Default::default()
    };
    (net, cfg)
}

#[test]
fn single_client_equals_centralized() {
    let data = fed_data();
    let (net, cfg) = fed_setup();
    let (central, _) = train(net.clone(), &data, &cfg, MaskPolicy::None, None).unwrap();

    let one_round = FedConfig::new(1, 1, 12);
    let out = run_federated(net.clone(), &one_round, &cfg, &data, None, None).unwrap();
    assert_eq!(out.global.state(), central.state());

    let carried = FedConfig {
        momentum: MomentumPolicy::Carry,
        ..FedConfig::new(1, 3, 4)
    };
    let out = run_federated(net.clone(), &carried, &cfg, &data, None, None).unwrap();
    assert_eq!(out.global.state(), central.state());

    // resetting momentum between rounds changes the trajectory
    let reset = FedConfig::new(1, 3, 4);
    let out = run_federated(net, &reset, &cfg, &data, None, None).unwrap();
    assert_ne!(out.global.state(), central.state());
}

#[test]
fn identical_clients_average_exactly() {
    let data = fed_data();
    let (net, cfg) = fed_setup();
    let all: Vec<usize> = (0..data.len()).collect();
    let fed = FedConfig {
        shards: Some(vec![all.clone(), all.clone(), all]),
        client_seeds: Some(vec![cfg.seed; 3]),
        allow_overlap: true,
        ..FedConfig::new(3, 2, 6)
    };
    let out = run_federated(net.clone(), &fed, &cfg, &data, None, None).unwrap();
    let single = FedConfig::new(1, 2, 6);
    let reference = run_federated(net, &single, &cfg, &data, None, None).unwrap();
    assert_eq!(out.global.state(), reference.global.state());
    assert_eq!(out.history.len(), 2);
    assert_eq!(out.history[0].client_losses.len(), 3);
}

#[test]
fn overlapping_shards_need_opt_in() {
    let data = fed_data();
    let (net, cfg) = fed_setup();
    let all: Vec<usize> = (0..data.len()).collect();
    let fed = FedConfig {
        shards: Some(vec![all.clone(), all]),
        ..FedConfig::new(2, 1, 2)
    };
    assert!(run_federated(net, &fed, &cfg, &data, None, None).is_err());
}

#[test]
fn parallel_clients_match_sequential() {
    let data = fed_data();
    let (net, cfg) = fed_setup();
    let seq = FedConfig::new(3, 2, 4);
    let par = FedConfig {
        parallel: true,
        ..seq.clone()
    };
    let a = run_federated(net.clone(), &seq, &cfg, &data, None, None).unwrap();
    let b = run_federated(net, &par, &cfg, &data, None, None).unwrap();
    assert_eq!(a.global.state(), b.global.state());
    assert_eq!(a.history, b.history);
}
