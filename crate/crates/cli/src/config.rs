//! Run configuration: a TOML key/value file merged with command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use edgeedit::corpus::Split;
use edgeedit::editor::{EditOrder, EditSettings, InitialGraphSource};
use edgeedit::model::ModelConfig;
use edgeedit::training::{Exposure, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Keys accepted in a `--config` file. Model hyperparameters live under
/// `[model]` with the same names as [`ModelConfig`]'s fields.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub corpus: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub dicts: Option<PathBuf>,
    pub vectors: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub split: Option<String>,
    pub init: Option<String>,
    pub order: Option<String>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub exposure: Option<Exposure>,
    pub shuffle: Option<bool>,
    pub checkpoint_every: Option<usize>,
    pub model: ModelConfig,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }
}

/// Fully resolved settings of one command run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Settings {
    pub corpus: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub dicts: Option<PathBuf>,
    pub vectors: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub split: Option<Split>,
    pub init: InitialGraphSource,
    pub order: EditOrder,
    pub seed: u64,
    pub jobs: usize,
    pub exposure: Exposure,
    pub shuffle: bool,
    pub checkpoint_every: usize,
    pub model: ModelConfig,
}

/// Values given on the command line; each overrides the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub corpus: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub dicts: Option<PathBuf>,
    pub vectors: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub split: Option<String>,
    pub init: Option<String>,
    pub order: Option<String>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub dmax: Option<usize>,
    pub gcn_layers: Option<usize>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

impl Settings {
    pub fn resolve(file: ConfigFile, o: Overrides) -> Result<Self, CliError> {
        let seed = o.seed.or(file.seed).unwrap_or(0);
        let init = match o.init.or(file.init) {
            None => InitialGraphSource::Rule,
            Some(s) => match s.parse().map_err(usage)? {
                InitialGraphSource::Random { .. } => InitialGraphSource::Random { seed },
                other => other,
            },
        };
        let order = match o.order.or(file.order) {
            None => EditOrder::CloseFirst,
            Some(s) => match s.parse().map_err(usage)? {
                EditOrder::Random { .. } => EditOrder::Random { seed },
                other => other,
            },
        };
        let split = o.split.or(file.split).map(|s| s.parse::<Split>()).transpose().map_err(usage)?;
        let mut model = file.model;
        if let Some(d) = o.dmax {
            model.d_max = d;
        }
        if let Some(g) = o.gcn_layers {
            model.gcn_layers = g;
        }
        if let Some(e) = o.epochs {
            model.epochs = e;
        }
        if let Some(lr) = o.lr {
            model.learning_rate = lr;
        }
        model.validate().map_err(usage)?;
        let jobs = o.jobs.or(file.jobs).unwrap_or(1);
        if jobs == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        Ok(Settings {
            corpus: o.corpus.or(file.corpus),
            manifest: o.manifest.or(file.manifest),
            dicts: o.dicts.or(file.dicts),
            vectors: o.vectors.or(file.vectors),
            out: o.out.or(file.out),
            split,
            init,
            order,
            seed,
            jobs,
            exposure: file.exposure.unwrap_or_default(),
            shuffle: file.shuffle.unwrap_or(true),
            checkpoint_every: file.checkpoint_every.unwrap_or(0),
            model,
        })
    }

    pub fn edit_settings(&self) -> EditSettings {
        EditSettings {
            init: self.init,
            order: self.order,
            d_max: self.model.d_max,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.model.epochs,
            learning_rate: self.model.learning_rate,
            seed: self.seed,
            init: self.init,
            exposure: self.exposure,
            order: self.order,
            d_max: self.model.d_max,
            shuffle: self.shuffle,
            checkpoint_every: self.checkpoint_every,
        }
    }
}
