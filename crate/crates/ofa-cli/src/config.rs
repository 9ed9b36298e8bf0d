//! Run configuration: a TOML or JSON file merged with flag overrides
//! (flags win). The seed is mandatory — either in the file or as a flag.

use anyhow::{bail, Context};
use ofa_core::model::VitConfig;
use ofa_core::train::{TrainMode, TrainOptions};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::str::FromStr;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub model: VitConfig,
    #[serde(default = "default_mode")]
    pub mode: TrainMode,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_mae_epochs")]
    pub mae_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub seed: Option<u64>,
}

fn default_mode() -> TrainMode {
    TrainMode::Ofa
}
fn default_epochs() -> usize {
    20
}
fn default_mae_epochs() -> usize {
    10
}
fn default_batch_size() -> usize {
    16
}
fn default_lr() -> f64 {
    1e-3
}
fn default_weight_decay() -> f64 {
    1e-4
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: VitConfig::default(),
            mode: default_mode(),
            epochs: default_epochs(),
            mae_epochs: default_mae_epochs(),
            batch_size: default_batch_size(),
            lr: default_lr(),
            weight_decay: default_weight_decay(),
            seed: None,
        }
    }
}

/// Flag-level overrides collected by clap; every field optional.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct ConfigOverrides {
    /// baseline | ofa | mae | mae+ofa
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub mae_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Weight of the auxiliary attention loss.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Comma-separated ascending 1-based layer indices, e.g. 1,3,6
    #[arg(long, value_name = "LAYERS")]
    pub ofa_layers: Option<String>,
    #[arg(long)]
    pub ofa_decay: Option<f64>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Comma-separated canvas sides, full scale first, e.g. 64,32
    #[arg(long, value_name = "SIDES")]
    pub scales: Option<String>,
    #[arg(long)]
    pub n_classes: Option<usize>,
    #[arg(long)]
    pub mlp_ratio: Option<usize>,
    #[arg(long)]
    pub mae_ratio: Option<f64>,
}

pub fn parse_usize_list(s: &str) -> anyhow::Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().with_context(|| format!("bad list entry {p:?}")))
        .collect()
}

/// Loads the file (TOML unless the extension is .json), then lets the flags
/// win field by field.
pub fn resolve(config_path: Option<&Path>, over: &ConfigOverrides) -> anyhow::Result<RunConfig> {
    let mut cfg = match config_path {
        None => RunConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            if path.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text).with_context(|| "parsing JSON config")?
            } else {
                toml::from_str(&text).with_context(|| "parsing TOML config")?
            }
        }
    };

    if let Some(mode) = &over.mode {
        cfg.mode = TrainMode::from_str(mode)?;
    }
    if let Some(v) = over.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = over.mae_epochs {
        cfg.mae_epochs = v;
    }
    if let Some(v) = over.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = over.lr {
        cfg.lr = v;
    }
    if let Some(v) = over.weight_decay {
        cfg.weight_decay = v;
    }
    if over.seed.is_some() {
        cfg.seed = over.seed;
    }
    if let Some(v) = over.alpha {
        cfg.model.ofa.alpha = v;
    }
    if let Some(layers) = &over.ofa_layers {
        cfg.model.ofa.ofa_layers = parse_usize_list(layers)?;
    }
    if let Some(v) = over.ofa_decay {
        cfg.model.ofa.decay = v;
    }
    if let Some(v) = over.depth {
        cfg.model.depth = v;
    }
    if let Some(v) = over.dim {
        cfg.model.dim = v;
    }
    if let Some(v) = over.heads {
        cfg.model.heads = v;
    }
    if let Some(v) = over.patch_size {
        cfg.model.patch_size = v;
    }
    if let Some(scales) = &over.scales {
        cfg.model.scales = parse_usize_list(scales)?;
    }
    if let Some(v) = over.n_classes {
        cfg.model.n_classes = v;
    }
    if let Some(v) = over.mlp_ratio {
        cfg.model.mlp_ratio = v;
    }
    if let Some(v) = over.mae_ratio {
        cfg.model.mae_ratio = v;
    }
    Ok(cfg)
}

impl RunConfig {
    pub fn train_options(&self) -> anyhow::Result<TrainOptions> {
        let Some(seed) = self.seed else {
            bail!("seed is mandatory: pass --seed or set `seed` in the config file");
        };
        if self.mode.uses_mae_pretrain() && self.mae_epochs == 0 {
            bail!("mode {} needs mae_epochs >= 1", self.mode);
        }
        if self.epochs == 0 && !self.mode.uses_mae_pretrain() {
            bail!("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            bail!("batch_size must be >= 1");
        }
        Ok(TrainOptions {
            mode: self.mode,
            epochs: self.epochs,
            mae_epochs: self.mae_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            seed,
        })
    }
}
