//! Experiment configuration shared by the command-line driver and bindings.
//!
//! ```json
//! {
//!   "feeder": "builtin:5bus",
//!   "profiles": null,
//!   "split": {"train": [0, 1, 2], "eval": [10, 11], "test": [12, 13, 14]},
//!   "reward": {"c_v": 100.0},
//!   "train": {"episodes": 1500, "attack_kind": "pgd"},
//!   "eval": {"episodes": 50, "workers": 4},
//!   "checkpoint_every": 250,
//!   "seed": 7
//! }
//! ```
//!
//! Every field is optional. `seed` overrides both `train.seed` and
//! `eval.seed` when present. Relative paths resolve against the directory of
//! the config file.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::env::{LoadProfile, ProfileSplit, RewardConfig, Scenario};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::feeder::Feeder;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Feeder JSON path or `builtin:<name>`.
    pub feeder: String,
    /// Directory of profile CSVs; `None` selects the built-in set.
    pub profiles: Option<PathBuf>,
    pub split: ProfileSplit,
    pub reward: RewardConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Save the network every this many episodes (0 disables).
    pub checkpoint_every: usize,
    pub output: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            feeder: "builtin:5bus".into(),
            profiles: None,
            split: ProfileSplit::default(),
            reward: RewardConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            checkpoint_every: 0,
            output: None,
            seed: None,
        }
    }
}

impl ExperimentConfig {
    /// Parses config text; errors carry the line and column of the fault.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut config: Self = serde_json::from_str(text)?;
        config.apply_seed();
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidInput(format!("cannot read config {}: {e}", path.display())))?;
        let mut config = Self::from_json(&text)
            .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
        if let Some(dir) = path.parent() {
            config.resolve_paths(dir);
        }
        Ok(config)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.apply_seed();
    }

    fn apply_seed(&mut self) {
        if let Some(seed) = self.seed {
            self.train.seed = seed;
            self.eval.seed = seed;
        }
    }

    fn resolve_paths(&mut self, dir: &Path) {
        if !self.feeder.starts_with("builtin:") && Path::new(&self.feeder).is_relative() {
            self.feeder = dir.join(&self.feeder).to_string_lossy().into_owned();
        }
        if let Some(p) = &self.profiles {
            if p.is_relative() {
                self.profiles = Some(dir.join(p));
            }
        }
    }

    /// Checks referenced files and every nested config without building anything.
    pub fn validate(&self) -> Result<()> {
        if !self.feeder.starts_with("builtin:") && !Path::new(&self.feeder).is_file() {
            return Err(Error::InvalidInput(format!("feeder file not found: {}", self.feeder)));
        }
        if let Some(p) = &self.profiles {
            if !p.is_dir() {
                return Err(Error::InvalidInput(format!(
                    "profiles directory not found: {}",
                    p.display()
                )));
            }
        }
        self.train.validate()?;
        self.eval.attack.validate()?;
        Ok(())
    }

    pub fn scenario(&self) -> Result<Arc<Scenario>> {
        self.validate()?;
        let feeder = Feeder::load(&self.feeder)?;
        let profiles = match &self.profiles {
            Some(dir) => LoadProfile::load_dir(dir)?,
            None => LoadProfile::builtin_set(),
        };
        Ok(Arc::new(Scenario::new(feeder, profiles, self.split.clone(), self.reward)?))
    }
}
