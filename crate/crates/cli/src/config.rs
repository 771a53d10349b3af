//! JSON run configuration. Every section and key is optional; missing
//! values fall back to the desk defaults below.

use std::path::Path;

use desense_core::saliency::MsmConfig;
use desense_core::search::SearchConfig;
use desense_core::RmgRanges;
use desense_net::fedsim::{FedConfig, MomentumPolicy};
use desense_net::{Arch, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub rmg: RmgSection,
    pub msm: MsmConfig,
    pub search: SearchSection,
    pub train: TrainSection,
    pub fed: FedSection,
}

/// Stroke parameter ranges. `None` derives them from the image size.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmgSection {
    /// Ranges for search candidates and plain `genmask`.
    pub search: Option<RmgRanges>,
    /// Ranges for level-banded masks (mask-trained models, level tests).
    pub levels: Option<RmgRanges>,
}

impl RmgSection {
    pub fn search_ranges(&self, width: usize, height: usize) -> RmgRanges {
        self.search
            .clone()
            .unwrap_or_else(|| RmgRanges::search(width, height))
    }

    pub fn level_ranges(&self, width: usize, height: usize) -> RmgRanges {
        self.levels
            .clone()
            .unwrap_or_else(|| RmgRanges::levels(width, height))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub n: usize,
    pub gamma: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for SearchSection {
    fn default() -> Self {
        Self {
            n: 8,
            gamma: 1.0,
            batch: 512,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub drops: Vec<f64>,
    pub weight_decay: f64,
    pub eval_every: usize,
    /// Stage gated by the FSM (1–4).
    pub insertion_point: usize,
    pub fsm_width: usize,
    pub widths: [usize; 4],
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            iters: t.iterations,
            batch: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            drops: t.lr_drops,
            weight_decay: t.weight_decay,
            eval_every: 0,
            insertion_point: 3,
            fsm_width: 8,
            widths: [16, 32, 64, 128],
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            iterations: self.iters,
            batch_size: self.batch,
            lr: self.lr,
            momentum: self.momentum,
            lr_drops: self.drops.clone(),
            weight_decay: self.weight_decay,
            seed,
            eval_every: self.eval_every,
        }
    }

    pub fn arch(&self, side: usize, channels: usize, classes: usize, fsm: bool) -> Arch {
        let arch = Arch::new(side, channels, classes).with_widths(self.widths);
        if fsm {
            arch.with_fsm(self.insertion_point, self.fsm_width)
        } else {
            arch
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedSection {
    pub clients: usize,
    pub rounds: usize,
    pub local_iters: usize,
    pub momentum: MomentumPolicy,
    pub plateau_patience: Option<usize>,
    pub parallel: bool,
}

impl Default for FedSection {
    fn default() -> Self {
        Self {
            clients: 3,
            rounds: 10,
            local_iters: 60,
            momentum: MomentumPolicy::Reset,
            plateau_patience: None,
            parallel: false,
        }
    }
}

impl FedSection {
    pub fn fed_config(&self) -> FedConfig {
        FedConfig {
            momentum: self.momentum,
            plateau_patience: self.plateau_patience,
            parallel: self.parallel,
            ..FedConfig::new(self.clients, self.rounds, self.local_iters)
        }
    }
}

impl Config {
    /// Reads a config file; `None` gives the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn search_config(&self, width: usize, height: usize) -> SearchConfig {
        SearchConfig {
            n: self.search.n,
            gamma: self.search.gamma,
            ranges: self.rmg.search_ranges(width, height),
            batch: self.search.batch,
            seed: self.search.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c: Config = serde_json::from_str("{}").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.msm.threshold, 0.5);
        assert_eq!(c.search.n, 8);
        assert_eq!(c.train.drops, vec![0.5, 0.7, 0.9]);
    }

    #[test]
    fn documented_keys_parse() {
        let text = r#"{
            "msm": {"K": 32, "T": 0.6, "smoothing_radius": 2},
            "search": {"n": 4, "gamma": 0.5, "batch": 64, "seed": 3},
            "train": {"iters": 100, "batch": 16, "lr": 0.1, "momentum": 0.8,
                      "drops": [0.5], "insertion_point": 2},
            "fed": {"clients": 2, "rounds": 5, "local_iters": 20}
        }"#;
        let c: Config = serde_json::from_str(text).unwrap();
        assert_eq!(c.msm.k, 32);
        assert_eq!(c.search.gamma, 0.5);
        assert_eq!(c.train.insertion_point, 2);
        let t = c.train.train_config(9);
        assert_eq!((t.iterations, t.batch_size, t.seed), (100, 16, 9));
        assert_eq!(c.fed.fed_config().local_iters, 20);
        assert_eq!(c.search_config(64, 64).seed, 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<Config>(r#"{"trian": {}}"#).is_err());
        assert!(serde_json::from_str::<Config>(r#"{"train": {"iterz": 3}}"#).is_err());
    }
}
