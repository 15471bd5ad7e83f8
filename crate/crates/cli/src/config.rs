use std::path::Path;

use evifuse::losses::LossWeights;
use evifuse::net::{Fusion, NetworkConfig, TrainConfig};
use evifuse::phantom::Perturbation;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub count: usize,
    pub size: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self { count: 200, size: 32 }
    }
}

/// Cases (groups of consecutive slices) are split, never individual slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train_fraction: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub fusion: Fusion,
    /// Perturbations in flag syntax (`noise:0.1`, `blur:10,13`, `missing:1`,
    /// `none`); one report row each.
    pub perturb: Vec<String>,
    pub ece_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fusion: Fusion::Mems,
            perturb: Vec::new(),
            ece_bins: evifuse::metrics::DEFAULT_ECE_BINS,
        }
    }
}

/// Everything a run depends on. The top-level `seed` drives every random
/// stream: it overrides the network and training seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub phantom: PhantomConfig,
    pub split: SplitConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            phantom: PhantomConfig::default(),
            split: SplitConfig::default(),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Propagates the seed and checks every block.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        self.network.seed = self.seed;
        self.train.seed = self.seed;
        self.network.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        if !(self.split.train_fraction >= 0.0 && self.split.train_fraction <= 1.0) {
            return Err(CliError::Config(format!(
                "split.train_fraction {} not in [0, 1]",
                self.split.train_fraction
            )));
        }
        if self.eval.ece_bins == 0 {
            return Err(CliError::Config("eval.ece_bins must be >= 1".into()));
        }
        self.perturbations()?;
        Ok(self)
    }

    /// Parsed `eval.perturb`; an empty list means a single clean run.
    pub fn perturbations(&self) -> Result<Vec<Perturbation>, CliError> {
        if self.eval.perturb.is_empty() {
            return Ok(vec![Perturbation::None]);
        }
        self.eval
            .perturb
            .iter()
            .map(|s| s.parse::<Perturbation>().map_err(CliError::from))
            .collect()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn meta(&self) -> RunMeta {
        let config_hash = self.hash();
        RunMeta {
            run_id: format!("s{}-{}", self.seed, &config_hash[..12]),
            seed: self.seed,
            config_hash,
        }
    }
}

/// Identity stamped on every output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMeta {
    /// `s<seed>-<first 12 hex digits of the config hash>`.
    pub run_id: String,
    pub seed: u64,
    pub config_hash: String,
}
