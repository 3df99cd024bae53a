//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{IntraError, Result};
use crate::metrics::LossWeights;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    /// Worker threads; 0 picks the number of available cores.
    pub workers: usize,
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
            workers: 1,
            deterministic: false,
        }
    }
}

/// Every accepted key, in output order.
pub const KEYS: [&str; 22] = [
    "image_size",
    "patch_size",
    "window_side",
    "latent_dim",
    "num_blocks",
    "num_heads",
    "channels",
    "use_mfsa",
    "use_long_residuals",
    "alpha",
    "beta",
    "lr",
    "batch_size",
    "windows_per_image",
    "patience",
    "max_epochs",
    "max_steps",
    "augment",
    "validate",
    "seed",
    "workers",
    "deterministic",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| IntraError::Config(format!("bad value `{value}` for `{key}`")))
}

impl RunConfig {
    /// Applies `key = value` lines over the defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        config.apply(text)?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| IntraError::io(path, e))?;
        RunConfig::parse(&text)
    }

    /// Applies `key = value` lines over the current values.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| IntraError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| IntraError::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config: "))))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "image_size" => m.image_size = parse(key, value)?,
            "patch_size" => m.patch_size = parse(key, value)?,
            "window_side" => m.window_side = parse(key, value)?,
            "latent_dim" => m.latent_dim = parse(key, value)?,
            "num_blocks" => m.num_blocks = parse(key, value)?,
            "num_heads" => m.num_heads = parse(key, value)?,
            "channels" => m.channels = parse(key, value)?,
            "use_mfsa" => m.use_mfsa = parse(key, value)?,
            "use_long_residuals" => m.use_long_residuals = parse(key, value)?,
            "alpha" => t.loss.alpha = parse(key, value)?,
            "beta" => t.loss.beta = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "windows_per_image" => t.windows_per_image = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "max_epochs" => t.max_epochs = parse(key, value)?,
            "max_steps" => t.max_steps = if value == "none" { None } else { Some(parse(key, value)?) },
            "augment" => t.augment = parse(key, value)?,
            "validate" => t.validate = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            "deterministic" => self.deterministic = parse(key, value)?,
            _ => return Err(IntraError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (m, t) = (&self.model, &self.train);
        Some(match key {
            "image_size" => m.image_size.to_string(),
            "patch_size" => m.patch_size.to_string(),
            "window_side" => m.window_side.to_string(),
            "latent_dim" => m.latent_dim.to_string(),
            "num_blocks" => m.num_blocks.to_string(),
            "num_heads" => m.num_heads.to_string(),
            "channels" => m.channels.to_string(),
            "use_mfsa" => m.use_mfsa.to_string(),
            "use_long_residuals" => m.use_long_residuals.to_string(),
            "alpha" => t.loss.alpha.to_string(),
            "beta" => t.loss.beta.to_string(),
            "lr" => t.lr.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "windows_per_image" => t.windows_per_image.to_string(),
            "patience" => t.patience.to_string(),
            "max_epochs" => t.max_epochs.to_string(),
            "max_steps" => t.max_steps.map_or("none".to_string(), |s| s.to_string()),
            "augment" => t.augment.to_string(),
            "validate" => t.validate.to_string(),
            "seed" => self.seed.to_string(),
            "workers" => self.workers.to_string(),
            "deterministic" => self.deterministic.to_string(),
            _ => return None,
        })
    }

    /// Every key with its effective value; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            writeln!(out, "{key} = {}", self.get(key).expect("known key")).expect("string write");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate_config()
    }

    pub fn loss_weights(&self) -> LossWeights {
        self.train.loss
    }

    /// Worker threads actually used.
    pub fn effective_workers(&self) -> usize {
        if self.deterministic {
            1
        } else if self.workers == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            self.workers
        }
    }
}
