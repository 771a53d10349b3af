//! Single-process federated training with parameter averaging.
//!
//! Each round every client starts from the global state, trains on its own
//! shard of desensitized images, and uploads its parameters; the server
//! replaces the global state by the shard-size-weighted mean.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use desense_core::dataset::Dataset;
use desense_core::rng::stream_rng;
use desense_core::Mask;

use crate::error::{NetError, Result};
use crate::network::Network;
use crate::state::{ModelState, NamedTensor};
use crate::train::{accuracy, EvalMasks, MaskPolicy, TrainConfig, Trainer};

/// What happens to client momentum buffers between rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MomentumPolicy {
    /// Zeroed at the start of every round.
    #[default]
    Reset,
    /// Kept by each client across rounds.
    Carry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub clients: usize,
    pub rounds: usize,
    pub local_iters: usize,
    /// Disjoint index sets covering the training set; `None` splits evenly.
    #[serde(default)]
    pub shards: Option<Vec<Vec<usize>>>,
    /// Per-client sampling seeds; defaults to `train.seed + k`.
    #[serde(default)]
    pub client_seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub momentum: MomentumPolicy,
    /// Stop once global accuracy fails to improve for this many rounds.
    #[serde(default)]
    pub plateau_patience: Option<usize>,
    /// Skip the shard disjointness check (for replicated-shard experiments).
    #[serde(default)]
    pub allow_overlap: bool,
    /// Run the clients of a round on separate threads. Uploads are still
    /// averaged in client order, so results match the sequential run.
    #[serde(default)]
    pub parallel: bool,
}

impl FedConfig {
    pub fn new(clients: usize, rounds: usize, local_iters: usize) -> Self {
        Self {
            clients,
            rounds,
            local_iters,
            shards: None,
            client_seeds: None,
            momentum: MomentumPolicy::Reset,
            plateau_patience: None,
            allow_overlap: false,
            parallel: false,
        }
    }
}

/// Random near-equal disjoint split; each shard is sorted, so a single shard
/// is the identity order.
pub fn even_shards(n: usize, clients: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if clients == 0 || clients > n {
        return Err(NetError::InvalidConfig(format!(
            "cannot split {n} images over {clients} clients"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, 3));
    let mut shards = vec![Vec::new(); clients];
    for (i, idx) in order.into_iter().enumerate() {
        shards[i % clients].push(idx);
    }
    shards.iter_mut().for_each(|s| s.sort_unstable());
    Ok(shards)
}

pub fn validate_shards(shards: &[Vec<usize>], n: usize, allow_overlap: bool) -> Result<()> {
    if shards.is_empty() || shards.iter().any(|s| s.is_empty()) {
        return Err(NetError::InvalidConfig(
            "every client needs a nonempty shard".into(),
        ));
    }
    let mut seen = vec![0usize; n];
    for &i in shards.iter().flatten() {
        if i >= n {
            return Err(NetError::InvalidConfig(format!(
                "shard index {i} outside dataset of {n}"
            )));
        }
        seen[i] += 1;
    }
    if !allow_overlap {
        if let Some(i) = seen.iter().position(|&c| c != 1) {
            return Err(NetError::InvalidConfig(format!(
                "shards must partition the dataset; image {i} appears {} times",
                seen[i]
            )));
        }
    }
    Ok(())
}

/// Weighted mean of states. Each element is accumulated in `f64` over
/// terms sorted by value, so the result does not depend on client order and
/// equal inputs average to themselves exactly.
pub fn fedavg(states: &[ModelState], weights: &[f64]) -> Result<ModelState> {
    let first = states
        .first()
        .ok_or_else(|| NetError::InvalidConfig("fedavg of no states".into()))?;
    if states.len() != weights.len() {
        return Err(NetError::InvalidConfig(
            "one weight per state required".into(),
        ));
    }
    if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(NetError::InvalidConfig("weights must be positive".into()));
    }
    if let Some(bad) = states.iter().find(|s| !s.same_layout(first)) {
        return Err(NetError::ArchMismatch(format!(
            "{:?} vs {:?}",
            bad.arch, first.arch
        )));
    }
    let total: f64 = weights.iter().sum();
    let norm: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let mut terms = Vec::with_capacity(states.len());
    let tensors = first
        .tensors
        .iter()
        .enumerate()
        .map(|(ti, t)| {
            let data = (0..t.data.len())
                .map(|e| {
                    terms.clear();
                    terms.extend(
                        states
                            .iter()
                            .zip(&norm)
                            .map(|(s, w)| (s.tensors[ti].data[e] as f64, *w)),
                    );
                    if terms.iter().all(|(v, _)| *v == terms[0].0) {
                        return terms[0].0 as f32;
                    }
                    terms.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
                    terms.iter().map(|(v, w)| v * w).sum::<f64>() as f32
                })
                .collect();
            NamedTensor {
                name: t.name.clone(),
                shape: t.shape.clone(),
                role: t.role,
                data,
            }
        })
        .collect();
    Ok(ModelState {
        arch: first.arch.clone(),
        tensors,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub client_losses: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub global_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FedOutcome {
    pub global: Network<f32>,
    pub history: Vec<RoundRecord>,
    pub momentum: MomentumPolicy,
    pub stopped_early: bool,
}

/// Runs the protocol. Every client trains on images desensitized by the same
/// `mask` (or clean images when `None`). The rate schedule spans
/// `rounds × local_iters` steps.
pub fn run_federated(
    global: Network<f32>,
    cfg: &FedConfig,
    train_cfg: &TrainConfig,
    data: &Dataset,
    mask: Option<&Mask>,
    eval: Option<&Dataset>,
) -> Result<FedOutcome> {
    if cfg.rounds == 0 || cfg.local_iters == 0 {
        return Err(NetError::InvalidConfig(
            "rounds and local iterations must be >= 1".into(),
        ));
    }
    let shards = match &cfg.shards {
        Some(s) => s.clone(),
        None => even_shards(data.len(), cfg.clients, train_cfg.seed)?,
    };
    if shards.len() != cfg.clients {
        return Err(NetError::InvalidConfig(format!(
            "{} shards for {} clients",
            shards.len(),
            cfg.clients
        )));
    }
    validate_shards(&shards, data.len(), cfg.allow_overlap)?;
    let seeds: Vec<u64> = match &cfg.client_seeds {
        Some(s) if s.len() == cfg.clients => s.clone(),
        Some(_) => {
            return Err(NetError::InvalidConfig(
                "one seed per client required".into(),
            ))
        }
        None => (0..cfg.clients as u64)
            .map(|k| train_cfg.seed.wrapping_add(k))
            .collect(),
    };
    let schedule = TrainConfig {
        iterations: cfg.rounds * cfg.local_iters,
        eval_every: 0,
        ..train_cfg.clone()
    };
    let policy = match mask {
        Some(m) => MaskPolicy::Fixed(m.clone()),
        None => MaskPolicy::None,
    };
    let mut clients = seeds
        .iter()
        .map(|&seed| {
            Trainer::new(
                global.clone(),
                TrainConfig {
                    seed,
                    ..schedule.clone()
                },
                policy.clone(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let weights: Vec<f64> = shards.iter().map(|s| s.len() as f64).collect();
    let mut global = global;
    let mut history = Vec::with_capacity(cfg.rounds);
    let (mut best, mut stale, mut stopped_early) = (f64::NEG_INFINITY, 0usize, false);
    for round in 0..cfg.rounds {
        let broadcast = global.state();
        let local = |client: &mut Trainer, shard: &[usize]| -> Result<(f64, ModelState)> {
            client.net.load_state(&broadcast)?;
            if cfg.momentum == MomentumPolicy::Reset {
                client.reset_momentum();
            }
            let records = client
                .run(data, shard, cfg.local_iters, None)
                .map_err(|e| NetError::Diverged {
                    round,
                    source: Box::new(e),
                })?;
            let loss = records.iter().map(|r| r.loss).sum::<f64>() / records.len() as f64;
            Ok((loss, client.net.state()))
        };
        let results: Vec<Result<(f64, ModelState)>> = if cfg.parallel {
            std::thread::scope(|scope| {
                let handles: Vec<_> = clients
                    .iter_mut()
                    .zip(&shards)
                    .map(|(client, shard)| scope.spawn(|| local(client, shard)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("client thread panicked"))
                    .collect()
            })
        } else {
            clients
                .iter_mut()
                .zip(&shards)
                .map(|(client, shard)| local(client, shard))
                .collect()
        };
        let mut uploads = Vec::with_capacity(cfg.clients);
        let mut client_losses = Vec::with_capacity(cfg.clients);
        for r in results {
            let (loss, state) = r?;
            client_losses.push(loss);
            uploads.push(state);
        }
        global.load_state(&fedavg(&uploads, &weights)?)?;
        let global_acc = match eval {
            Some(e) => {
                let masks = mask.map_or(EvalMasks::None, EvalMasks::Fixed);
                Some(accuracy(&mut global, &e.images, &e.labels, masks)?)
            }
            None => None,
        };
        history.push(RoundRecord {
            round,
            client_losses,
            global_acc,
        });
        if let (Some(patience), Some(acc)) = (cfg.plateau_patience, global_acc) {
            if acc > best {
                best = acc;
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(FedOutcome {
        global,
        history,
        momentum: cfg.momentum,
        stopped_early,
    })
}
