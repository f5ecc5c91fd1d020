//! TOML run configuration shared by every subcommand.
//!
//! One file describes the model, dataset, budget, selection, and training
//! setup; each stage reads only the sections it needs. Unknown keys are
//! rejected so a typo cannot silently change a comparison.

use std::fs;
use std::path::Path;

use fps_core::data::DatasetSpec;
use fps_core::model::Arch;
use fps_core::select::BudgetSpec;
use fps_core::train::TrainConfig;
use fps_core::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub dataset: DatasetSpec,
    pub budget: BudgetSection,
    #[serde(default)]
    pub selection: SelectionSection,
    pub train: Option<TrainConfig>,
    pub compare: Option<CompareSection>,
}

impl RunConfig {
    /// Force the model, dataset, and training seeds to one value.
    pub fn override_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.dataset.seed = seed;
        if let Some(train) = &mut self.train {
            train.seed = seed;
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub arch: Arch,
    #[serde(default)]
    pub seed: u64,
}

/// Update budget as either a fraction of the eligible parameters or an
/// absolute count; exactly one key must be set.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSection {
    pub fraction: Option<f64>,
    pub count: Option<u64>,
}

impl BudgetSection {
    pub fn to_spec(&self) -> Result<BudgetSpec> {
        match (self.fraction, self.count) {
            (Some(f), None) => Ok(BudgetSpec::Fraction(f)),
            (None, Some(c)) => Ok(BudgetSpec::Absolute(c)),
            (Some(_), Some(_)) => Err(Error::contract(
                "budget must set exactly one of `fraction` and `count`, got both",
            )),
            (None, None) => Err(Error::contract(
                "budget must set exactly one of `fraction` and `count`, got neither",
            )),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSection {
    /// Strategy used when a single mask is built outside a comparison.
    pub strategy: Option<String>,
    /// Forward-pass batch size for statistics and gradient scoring.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Cap on gradient-scoring batches; unset scores a full epoch.
    pub gps_max_batches: Option<usize>,
}

impl Default for SelectionSection {
    fn default() -> Self {
        SelectionSection {
            strategy: None,
            batch_size: default_batch(),
            gps_max_batches: None,
        }
    }
}

fn default_batch() -> usize {
    32
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    pub strategies: Vec<String>,
    #[serde(default)]
    pub parallel: bool,
    /// Write per-strategy training-curve files next to the report.
    #[serde(default)]
    pub curves: bool,
}

pub fn load(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        offset: e.span().map(|s| s.start as u64).unwrap_or(0),
        msg: e.message().to_string(),
    })
}
