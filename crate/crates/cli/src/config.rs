//! The run configuration file: one TOML document with a table per stage.

use std::path::Path;

use mmca::features::ExtractConfig;
use mmca::grid;
use mmca::ingest::CleaningConfig;
use mmca::model::ModelConfig;
use mmca::synth::ScenarioConfig;
use mmca::training::TrainConfig;
use mmca::{Error, Result};
use serde::{Deserialize, Serialize};

/// Which dates train and which test. Explicit lists win; otherwise the last
/// `test_fraction` of days (rounded, at least one when two or more days
/// exist) are held out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_days: Vec<String>,
    pub test_days: Vec<String>,
    pub test_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train_days: Vec::new(), test_days: Vec::new(), test_fraction: 0.2 }
    }
}

impl SplitConfig {
    /// Resolve to (train, test) day numbers among `days`.
    pub fn resolve(&self, days: &[i64]) -> Result<(Vec<i64>, Vec<i64>)> {
        let parse = |v: &[String]| v.iter().map(|s| grid::parse_day(s)).collect::<Result<Vec<i64>>>();
        let (train, test) = (parse(&self.train_days)?, parse(&self.test_days)?);
        if !train.is_empty() || !test.is_empty() {
            let test = if test.is_empty() { days.iter().copied().filter(|d| !train.contains(d)).collect() } else { test };
            let train = if train.is_empty() { days.iter().copied().filter(|d| !test.contains(d)).collect() } else { train };
            return Ok((train, test));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!("test_fraction {} outside [0, 1)", self.test_fraction)));
        }
        let mut n_test = (days.len() as f64 * self.test_fraction).round() as usize;
        if days.len() >= 2 && self.test_fraction > 0.0 {
            n_test = n_test.clamp(1, days.len() - 1);
        }
        let cut = days.len() - n_test.min(days.len());
        Ok((days[..cut].to_vec(), days[cut..].to_vec()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Miscoverage of the reported prediction intervals.
    pub alpha: f64,
    pub mape_epsilon_mph: f64,
    pub export_attention: bool,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { alpha: 0.1, mape_epsilon_mph: mmca::objective::MAPE_EPSILON_MPH, export_attention: true, batch_size: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenetrationConfig {
    /// Fractions of the journeys to keep, relative to the full data set.
    pub keep_fractions: Vec<f64>,
}

impl Default for PenetrationConfig {
    fn default() -> Self {
        // 1.0%, 1.5%, ..., 4.0% of traffic when the full set is 4%
        Self { keep_fractions: (2..=8).map(|k| k as f64 * 0.5 / 4.0).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub cleaning: CleaningConfig,
    pub extract: ExtractConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub penetration: PenetrationConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Apply `--seed`: scenario, weight init and training all follow it.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.scenario.seed = s;
            self.model.init_seed = s;
            self.train.seed = s;
        }
        self
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.eval.alpha > 0.0 && self.eval.alpha < 1.0) || self.eval.batch_size == 0 {
            return Err(Error::Config("eval.alpha must be in (0, 1) and eval.batch_size positive".into()));
        }
        if self.penetration.keep_fractions.iter().any(|k| !(*k > 0.0 && *k <= 1.0)) {
            return Err(Error::Config("penetration.keep_fractions must be in (0, 1]".into()));
        }
        Ok(())
    }
}
