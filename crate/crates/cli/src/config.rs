//! Run configuration: one JSON document with defaults for every field.
//! Precedence is flags > environment > config file > defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use milmine::data::SynthConfig;
use milmine::mining::MhimConfig;
use milmine::model::ModelConfig;
use milmine::pipeline::TrainConfig;
use milmine::{Error, Result};

pub const SEED_ENV: &str = "MILMINE_SEED";
pub const JOBS_ENV: &str = "MILMINE_JOBS";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvConfig {
    pub folds: usize,
    pub t_grid: Vec<usize>,
    pub b_grid: Vec<usize>,
    pub jobs: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            t_grid: vec![0, 1, 2],
            b_grid: vec![0, 1, 2],
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Recall@k and sensitivity percentages.
    pub k_list: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k_list: vec![10.0, 20.0, 50.0, 80.0, 90.0],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Mask settings used by `train-mhim` when `train.mhim` is not set.
    pub mhim: MhimConfig,
    pub synth: SynthConfig,
    pub cv: CvConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            mhim: MhimConfig::new(2, 2),
            synth: SynthConfig::default(),
            cv: CvConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str(&text).map_err(|e| {
                    Error::Config(format!("{}: {e}", p.display()))
                })?
            }
            None => Self::default(),
        };
        config.apply_env()?;
        config.validate()?;
        Ok(config)
    }

    fn apply_env(&mut self) -> Result<()> {
        if let Ok(value) = std::env::var(SEED_ENV) {
            let seed: u64 = value
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={value} is not a u64")))?;
            self.set_seed(seed);
        }
        if let Ok(value) = std::env::var(JOBS_ENV) {
            self.cv.jobs = value
                .parse()
                .map_err(|_| Error::Config(format!("{JOBS_ENV}={value} is not a usize")))?;
        }
        Ok(())
    }

    /// One seed drives the model init, training streams, and data generator.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
        self.synth.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.mhim.validate()?;
        self.synth.validate()?;
        if self.cv.folds < 3 {
            return Err(Error::Config(format!(
                "cv.folds = {}; need at least 3",
                self.cv.folds
            )));
        }
        if self.cv.t_grid.is_empty() || self.cv.b_grid.is_empty() {
            return Err(Error::Config("cv grids must be nonempty".into()));
        }
        if self.cv.jobs == 0 {
            return Err(Error::Config("cv.jobs must be >= 1".into()));
        }
        for &k in &self.eval.k_list {
            if !(0.0 < k && k <= 100.0) {
                return Err(Error::Config(format!("eval.k_list entry {k} outside (0, 100]")));
            }
        }
        Ok(())
    }
}
