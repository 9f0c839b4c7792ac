//! Data sources and TOML configuration files with flag overrides.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::de::DeserializeOwned;

use ccl::data::{generate_synthetic, load_dataset, SyntheticConfig};
use ccl::trainer::TrainConfig;
use ccl::Dataset64;

use crate::{invalid, CliResult};

#[derive(Args, Debug, Default)]
#[group(multiple = false)]
pub struct DataSource {
    /// Dataset directory or manifest written by `gen-data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Generate a synthetic dataset in memory from a named preset.
    #[arg(long)]
    pub preset: Option<String>,
}

/// Where a run's data came from, as written to the run record.
#[derive(Clone, Debug)]
pub enum DataOrigin {
    Path(PathBuf),
    Synthetic(SyntheticConfig),
}

impl DataSource {
    /// Preset name when data is generated, or `None` for a dataset on disk.
    pub fn preset_or(&self, default: Option<&str>) -> CliResult<Option<String>> {
        match (&self.data, &self.preset) {
            (Some(_), _) => Ok(None),
            (None, Some(p)) => Ok(Some(p.clone())),
            (None, None) => match default {
                Some(d) => Ok(Some(d.to_string())),
                None => Err(invalid("give a data source with --data or --preset")),
            },
        }
    }

    pub fn load_path(&self) -> CliResult<(Dataset64, DataOrigin)> {
        let path = self.data.as_ref().expect("caller checked for a path");
        Ok((load_dataset(path)?, DataOrigin::Path(path.clone())))
    }
}

pub fn synthetic(preset: &str, seed: u64) -> CliResult<(Dataset64, DataOrigin)> {
    let cfg = SyntheticConfig {
        seed,
        ..SyntheticConfig::preset(preset)?
    };
    Ok((generate_synthetic(&cfg)?, DataOrigin::Synthetic(cfg)))
}

/// Parses a TOML file; unknown keys are rejected by the target type.
pub fn read_toml<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

/// Training flags shared by `train` and `ablate`.
#[derive(Args, Debug, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Stop after this many steps.
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long = "lr", allow_hyphen_values = true)]
    pub learning_rate: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub weight_decay: Option<f64>,
    /// Record train/test accuracy every this many epochs.
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub projection_heads: Option<bool>,
}

impl TrainOverrides {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.max_iter {
            cfg.max_iter = Some(v);
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = self.eval_every {
            cfg.eval_every = v;
        }
        if let Some(v) = self.latent_dim {
            cfg.model.latent_dim = Some(v);
        }
        if let Some(v) = self.projection_heads {
            cfg.model.projection_heads = v;
        }
    }
}

/// File values (or defaults), then flags.
pub fn resolve_train_config(file: Option<&Path>, overrides: &TrainOverrides) -> CliResult<TrainConfig> {
    let mut cfg = match file {
        Some(path) => read_toml(path)?,
        None => TrainConfig::default(),
    };
    overrides.apply(&mut cfg);
    Ok(cfg)
}
