//! Run configuration: a flat `key = value` text format covering the
//! network architecture, the training schedule, and the synthetic-data
//! generator, with strict unknown-key and duplicate-key rejection.
//!
//! Lines are independent; `#` starts a comment line and blank lines are
//! ignored. Every key is optional and falls back to its default, so a
//! minimal file only states what differs from the stock recipe.

use std::collections::HashSet;
use std::path::Path;

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::model::NetworkConfig;
use crate::train::TrainConfig;

/// Splits configuration text into ordered `(key, value)` pairs,
/// rejecting malformed lines and duplicate keys with line numbers.
pub(crate) fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() || value.is_empty() {
            return Err(Error::Config(format!(
                "line {}: empty {} in `{line}`",
                i + 1,
                if key.is_empty() { "key" } else { "value" }
            )));
        }
        if !seen.insert(key.to_string()) {
            return Err(Error::Config(format!("line {}: duplicate key `{key}`", i + 1)));
        }
        pairs.push((key.to_string(), value.to_string()));
    }
    Ok(pairs)
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}` needs a non-negative integer, got `{value}`")))
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}` needs a non-negative integer, got `{value}`")))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value.parse().map_err(|_| Error::Config(format!("`{key}` needs a number, got `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` needs `true` or `false`, got `{value}`"))),
    }
}

const NETWORK_KEYS: [&str; 8] = [
    "base_channels",
    "blocks",
    "classes",
    "dims",
    "image_size",
    "input_channels",
    "side",
    "unit_depth",
];

fn apply_network_key(cfg: &mut NetworkConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "dims" => cfg.dims = parse_usize(key, value)?,
        "side" => cfg.side = parse_usize(key, value)?,
        "base_channels" => cfg.base_channels = parse_usize(key, value)?,
        "blocks" => cfg.blocks = parse_usize(key, value)?,
        "unit_depth" => cfg.unit_depth = parse_usize(key, value)?,
        "classes" => cfg.classes = parse_usize(key, value)?,
        "image_size" => cfg.image_size = parse_usize(key, value)?,
        "input_channels" => cfg.input_channels = parse_usize(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Parses a network configuration in the canonical form embedded in
/// checkpoints: exactly the architecture keys, all of them present.
pub(crate) fn network_config_from_text(text: &str) -> Result<NetworkConfig> {
    let pairs = parse_pairs(text)?;
    let mut cfg = NetworkConfig::default();
    let mut present = HashSet::new();
    for (key, value) in &pairs {
        if !apply_network_key(&mut cfg, key, value)? {
            return Err(Error::Config(format!("unknown architecture key `{key}`")));
        }
        present.insert(key.as_str());
    }
    for required in NETWORK_KEYS {
        if !present.contains(required) {
            return Err(Error::Config(format!("architecture text lacks `{required}`")));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Everything one run needs: the architecture, the schedule, and the
/// synthetic-data shape (kept geometrically consistent with the network).
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Architecture description.
    pub network: NetworkConfig,
    /// Optimization schedule.
    pub train: TrainConfig,
    /// Synthetic-data generator settings (used when no real dataset is
    /// given). Geometry and seed are derived, not set directly.
    pub synth: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
        };
        cfg.tie_synth();
        cfg
    }
}

impl RunConfig {
    /// Keeps the generator aligned with the network and run seed: a
    /// synthetic dataset must always fit the architecture that consumes
    /// it, so those fields follow the other sections instead of being
    /// independently settable.
    fn tie_synth(&mut self) {
        self.synth.classes = self.network.classes;
        self.synth.image_size = self.network.image_size;
        self.synth.channels = self.network.input_channels;
        self.synth.seed = self.train.seed;
    }

    /// Parses configuration text. Unknown keys are errors — a typo must
    /// not silently train the wrong recipe.
    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let mut cfg = RunConfig {
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
        };
        for (key, value) in &pairs {
            if apply_network_key(&mut cfg.network, key, value)? {
                continue;
            }
            match key.as_str() {
                "lr_max" => cfg.train.lr_max = parse_f64(key, value)?,
                "lr_min" => cfg.train.lr_min = parse_f64(key, value)?,
                "momentum" => cfg.train.momentum = parse_f64(key, value)?,
                "weight_decay" => cfg.train.weight_decay = parse_f64(key, value)?,
                "batch_size" => cfg.train.batch_size = parse_usize(key, value)?,
                "t_0" => cfg.train.restart_period = parse_usize(key, value)?,
                "t_mult" => cfg.train.restart_mult = parse_usize(key, value)?,
                "epochs" => cfg.train.epochs = parse_usize(key, value)?,
                "seed" => cfg.train.seed = parse_u64(key, value)?,
                "augment" => cfg.train.augment = parse_bool(key, value)?,
                "augment_pad" => cfg.train.augment_pad = parse_usize(key, value)?,
                "anneal_per_iteration" => {
                    cfg.train.anneal_per_iteration = parse_bool(key, value)?
                }
                "synth_train_per_class" => {
                    cfg.synth.train_per_class = parse_usize(key, value)?
                }
                "synth_test_per_class" => cfg.synth.test_per_class = parse_usize(key, value)?,
                "synth_noise" => cfg.synth.noise = parse_f64(key, value)?,
                other => return Err(Error::Config(format!("unknown key `{other}`"))),
            }
        }
        cfg.tie_synth();
        cfg.network.validate()?;
        cfg.train.validate()?;
        cfg.synth.validate()?;
        Ok(cfg)
    }

    /// Reads and parses a configuration file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
