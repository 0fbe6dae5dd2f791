//! Experiment configuration: one JSON document driving the whole pipeline.
//!
//! Defaults follow the attacked-model recipe: ε = 8/255, η = 1/255,
//! T = 100, t = −0.8, MAP over the top 5000 results, and the toy dataset
//! recipe (8 classes, 64 features, 2000/8000/500 split).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use pharos_core::attack::AttackConfig;
use pharos_core::data::GenParams;
use pharos_core::hashcore::MAX_BITS;
use pharos_core::model::TrainConfig;
use pharos_core::{Error, Result};

/// The JSON schema the config file is validated against. Deserialization
/// is strict (unknown fields are rejected at every level), so a document
/// accepted by [`ExperimentConfig::load`] conforms to this schema.
pub const EXPERIMENT_SCHEMA: &str = include_str!("../schema/experiment.schema.json");

/// Hashing-model shape plus its SGD recipe.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Code length K.
    pub bits: usize,
    /// Hidden layer widths of the tanh network.
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            bits: 32,
            hidden: vec![64],
            train: TrainConfig::default(),
        }
    }
}

/// Adversarial-training knobs layered on top of the base train recipe.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvSection {
    /// PGD iterations for the inner perturbation during training.
    pub inner_steps: usize,
    /// Overrides `model.train.epochs` for the adversarial run when set.
    pub epochs: Option<usize>,
}

impl Default for AdvSection {
    fn default() -> Self {
        AdvSection { inner_steps: 10, epochs: None }
    }
}

/// Retrieval evaluation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// MAP cutoff N.
    pub topn: usize,
    /// Cutoffs for the P@N curve.
    pub pn_grid: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            topn: 5000,
            pn_grid: vec![1, 5, 10, 20, 50, 100, 200, 500, 1000, 2000, 5000],
        }
    }
}

/// The complete experiment recipe. Every field has a default, so `{}` is a
/// valid document describing the toy benchmark.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: GenParams,
    pub model: ModelSection,
    pub attack: AttackConfig,
    pub adv: AdvSection,
    pub eval: EvalSection,
    /// Global seed; when set it overrides the per-section seeds.
    pub seed: Option<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: GenParams::default(),
            model: ModelSection::default(),
            attack: AttackConfig::default(),
            adv: AdvSection::default(),
            eval: EvalSection::default(),
            seed: None,
        }
    }
}

impl ExperimentConfig {
    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.train.validate()?;
        self.attack.validate()?;
        if self.model.bits == 0 || self.model.bits > MAX_BITS {
            return Err(Error::config(format!(
                "model.bits must lie in 1..={MAX_BITS}, got {}",
                self.model.bits
            )));
        }
        if self.model.hidden.is_empty() || self.model.hidden.iter().any(|&w| w == 0) {
            return Err(Error::config("model.hidden must list positive layer widths"));
        }
        if self.eval.topn == 0 {
            return Err(Error::config("eval.topn must be positive"));
        }
        if self.eval.pn_grid.is_empty() || self.eval.pn_grid.iter().any(|&g| g == 0) {
            return Err(Error::config("eval.pn_grid must list positive cutoffs"));
        }
        Ok(())
    }

    /// Propagates the global seed (when present) into every section, so a
    /// single `--seed` pins the entire pipeline.
    pub fn resolved(mut self) -> Self {
        if let Some(s) = self.seed {
            self.dataset.seed = s;
            self.model.train.seed = s;
            self.attack.seed = s;
        }
        self
    }
}
