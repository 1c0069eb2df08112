//! Run configuration file (TOML). Every section rejects unknown keys and the
//! whole file is validated before any stage runs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use demandcast::datagen::CatalogSpec;
use demandcast::evaluation::{ScalingConfig, StalenessConfig, TrainSetup};
use demandcast::features::CovariateSchema;
use demandcast::imputation::ImputationConfig;
use demandcast::model::{ModelConfig, MAX_DISCOUNT};
use demandcast::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchemaConfig {
    /// History weeks seen by the encoder.
    pub window: usize,
    /// Width of the calendar position encoding.
    pub e_dim: usize,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        SchemaConfig { window: 26, e_dim: 10 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictConfig {
    /// Forecast origin for every article; each article's last week if unset.
    pub origin: Option<usize>,
    /// Discount axis of the grid; `0, 0.05, …, 0.70` if unset.
    pub discounts: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    /// Backtest origins (last history week). Defaults to the last week that
    /// leaves `horizon` weeks of actuals.
    pub origins: Option<Vec<usize>>,
    pub horizon: usize,
    /// Train a fresh model per origin instead of scoring the checkpoint.
    pub retrain: bool,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            origins: None,
            horizon: 26,
            retrain: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces the catalog, model and training seeds.
    pub seed: Option<u64>,
    /// When set, replaces the training worker count.
    pub workers: Option<usize>,
    pub out_dir: PathBuf,
    /// Training uses weeks before this one; defaults to one past the first
    /// evaluation origin.
    pub train_cutoff: Option<usize>,
    pub catalog: CatalogSpec,
    pub imputation: ImputationConfig,
    pub schema: SchemaConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub predict: PredictConfig,
    pub evaluate: EvaluateConfig,
    pub scaling: ScalingConfig,
    pub staleness: StalenessConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            workers: None,
            out_dir: PathBuf::from("out"),
            train_cutoff: None,
            catalog: CatalogSpec::default(),
            imputation: ImputationConfig::default(),
            schema: SchemaConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            predict: PredictConfig::default(),
            evaluate: EvaluateConfig::default(),
            scaling: ScalingConfig::default(),
            staleness: StalenessConfig::default(),
        }
    }
}

/// Command-line overrides, applied before validation.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub discounts: Option<Vec<f64>>,
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        toml::from_str(text).map_err(|e| anyhow::anyhow!(demandcast::Error::Config(one_line(&e.to_string()))))
    }

    pub fn load(path: &Path, overrides: &Overrides) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| demandcast::Error::io(path, e))
            .context("reading run config")?;
        let mut cfg = Self::parse(&text)?;
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if o.seed.is_some() {
            self.seed = o.seed;
        }
        if o.workers.is_some() {
            self.workers = o.workers;
        }
        if let Some(dir) = &o.out_dir {
            self.out_dir = dir.clone();
        }
        if o.discounts.is_some() {
            self.predict.discounts = o.discounts.clone();
        }
        if let Some(seed) = self.seed {
            self.catalog.seed = seed;
            self.model.seed = seed;
            self.train.seed = seed;
        }
        if let Some(w) = self.workers {
            self.train.workers = w;
        }
    }

    pub fn workers(&self) -> usize {
        self.train.workers
    }

    /// Covariate schema for `n_markets` markets.
    pub fn schema(&self, n_markets: usize) -> demandcast::Result<CovariateSchema> {
        CovariateSchema::new(
            n_markets,
            self.schema.window,
            self.schema.e_dim,
            self.catalog.n_brands,
            self.catalog.n_commodity_groups,
        )
    }

    pub fn train_setup(&self, n_markets: usize) -> demandcast::Result<TrainSetup> {
        Ok(TrainSetup {
            model: self.model.clone(),
            schema: self.schema(n_markets)?,
            train: self.train.clone(),
        })
    }

    pub fn discounts(&self) -> Vec<f64> {
        self.predict
            .discounts
            .clone()
            .unwrap_or_else(demandcast::inference::default_discounts)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.catalog.validate()?;
        self.imputation.validate()?;
        let schema = self.schema(self.catalog.n_markets)?;
        self.model.validate(&schema)?;
        self.train.validate(self.catalog.n_markets)?;
        let d = self.discounts();
        if d.is_empty() || d.iter().any(|x| !(0.0..=MAX_DISCOUNT).contains(x)) || d.windows(2).any(|w| w[0] >= w[1]) {
            bail!(demandcast::Error::Config(format!(
                "predict.discounts must be increasing values in [0, {MAX_DISCOUNT}]"
            )));
        }
        if self.evaluate.horizon == 0 || self.evaluate.horizon > self.model.prediction_horizon {
            bail!(demandcast::Error::Config(format!(
                "evaluate.horizon must lie in 1..={}",
                self.model.prediction_horizon
            )));
        }
        if self.scaling.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            bail!(demandcast::Error::Config("scaling.fractions must lie in (0, 1]".into()));
        }
        if self.scaling.horizon > self.model.prediction_horizon || self.staleness.horizon > self.model.prediction_horizon {
            bail!(demandcast::Error::Config(
                "experiment horizons cannot exceed model.prediction_horizon".into()
            ));
        }
        Ok(())
    }

    /// Evaluation origins for data ending at `last_week` (exclusive).
    pub fn origins(&self, last_week: usize) -> anyhow::Result<Vec<usize>> {
        match &self.evaluate.origins {
            Some(o) if !o.is_empty() => Ok(o.clone()),
            _ => match last_week.checked_sub(self.evaluate.horizon + 1) {
                Some(o) => Ok(vec![o]),
                None => bail!(demandcast::Error::Config(format!(
                    "data ends at week {last_week}, too short for an evaluation horizon of {}",
                    self.evaluate.horizon
                ))),
            },
        }
    }

    /// First week excluded from training.
    pub fn cutoff(&self, last_week: usize) -> anyhow::Result<usize> {
        match self.train_cutoff {
            Some(c) => Ok(c),
            None => Ok(self.origins(last_week)?.into_iter().min().map_or(last_week, |o| o + 1)),
        }
    }
}

pub fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
