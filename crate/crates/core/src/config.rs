//! Flat `key = value` run configuration.
//!
//! ```text
//! # comment
//! frames = 8
//! ranks.cfa = 4
//! mask_steps = 0:40:5
//! ```
//!
//! Unknown keys and malformed values are rejected with the key named.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{MivaError, Result};
use crate::masked::{MaskStepSet, DEFAULT_EPSILON};
use crate::model::{ModelConfig, Ranks};
use crate::pipeline::{GenerationConfig, PreprocessConfig};
use crate::train::TrainConfig;

/// Learning rate used when none is configured. Raised from the `1e-5` of
/// large-scale adapter training: desk-scale runs of 2000 iterations barely
/// move zero-initialized factors at that rate.
pub const DEFAULT_LR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub frames: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub token_dim: usize,
    pub ranks: Ranks,
    pub epsilon_mask: f64,
    pub mask_steps: String,
    pub alpha_shared: f64,
    pub lowpass_ratio: f64,
    pub lr: f64,
    pub iters: usize,
    pub seed: u64,
    pub steps: usize,
}

impl Default for Config {
    fn default() -> Self {
        let m = ModelConfig::default();
        let p = PreprocessConfig::default();
        Self {
            frames: m.frames,
            image_size: m.image_size,
            patch_size: m.patch_size,
            channels: m.channels,
            token_dim: m.token_dim,
            ranks: m.ranks,
            epsilon_mask: DEFAULT_EPSILON,
            mask_steps: "0:40:5".into(),
            alpha_shared: p.alpha_shared,
            lowpass_ratio: p.lowpass_ratio,
            lr: DEFAULT_LR,
            iters: 2000,
            seed: 0,
            steps: 50,
        }
    }
}

pub const KEYS: [&str; 16] = [
    "frames",
    "image_size",
    "patch_size",
    "channels",
    "token_dim",
    "ranks.cfa",
    "ranks.ca",
    "ranks.tsa",
    "epsilon_mask",
    "mask_steps",
    "alpha_shared",
    "lowpass_ratio",
    "lr",
    "iters",
    "seed",
    "steps",
];

fn typed<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| MivaError::Config {
        key: key.to_string(),
        message: format!("cannot parse `{value}` as {}", std::any::type_name::<T>()),
    })
}

impl Config {
    /// Parse file contents on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| MivaError::Config {
                key: line.to_string(),
                message: format!("line {}: expected `key = value`", no + 1),
            })?;
            c.set(k.trim(), v.trim())?;
        }
        Ok(c)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "frames" => self.frames = typed(key, value)?,
            "image_size" => self.image_size = typed(key, value)?,
            "patch_size" => self.patch_size = typed(key, value)?,
            "channels" => self.channels = typed(key, value)?,
            "token_dim" => self.token_dim = typed(key, value)?,
            "ranks.cfa" => self.ranks.cfa = typed(key, value)?,
            "ranks.ca" => self.ranks.ca = typed(key, value)?,
            "ranks.tsa" => self.ranks.tsa = typed(key, value)?,
            "epsilon_mask" => self.epsilon_mask = typed(key, value)?,
            "mask_steps" => {
                // Syntax only; the range is checked against the step count at use.
                let probe = if value.trim() == "all" { "0" } else { value };
                MaskStepSet::parse(probe, usize::MAX).map_err(|e| MivaError::Config {
                    key: key.to_string(),
                    message: e.to_string(),
                })?;
                self.mask_steps = value.to_string();
            }
            "alpha_shared" => self.alpha_shared = typed(key, value)?,
            "lowpass_ratio" => self.lowpass_ratio = typed(key, value)?,
            "lr" => self.lr = typed(key, value)?,
            "iters" => self.iters = typed(key, value)?,
            "seed" => self.seed = typed(key, value)?,
            "steps" => self.steps = typed(key, value)?,
            _ => {
                return Err(MivaError::Config {
                    key: key.to_string(),
                    message: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    /// Every key with its current value, in canonical order.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let values = [
            self.frames.to_string(),
            self.image_size.to_string(),
            self.patch_size.to_string(),
            self.channels.to_string(),
            self.token_dim.to_string(),
            self.ranks.cfa.to_string(),
            self.ranks.ca.to_string(),
            self.ranks.tsa.to_string(),
            format!("{:e}", self.epsilon_mask),
            self.mask_steps.clone(),
            self.alpha_shared.to_string(),
            self.lowpass_ratio.to_string(),
            format!("{:e}", self.lr),
            self.iters.to_string(),
            self.seed.to_string(),
            self.steps.to_string(),
        ];
        KEYS.iter().map(|k| k.to_string()).zip(values).collect()
    }

    /// Rebuild from a map written by [`Config::to_map`]; keys absent from
    /// the map keep their defaults.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in map {
            c.set(k, v)?;
        }
        Ok(c)
    }

    /// Serialized form accepted by [`Config::parse`].
    pub fn to_text(&self) -> String {
        self.to_map().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let m = ModelConfig {
            frames: self.frames,
            image_size: self.image_size,
            patch_size: self.patch_size,
            channels: self.channels,
            token_dim: self.token_dim,
            ranks: self.ranks,
            ..ModelConfig::default()
        };
        m.validate()?;
        Ok(m)
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            steps: self.steps,
            seed: self.seed,
            preprocess: PreprocessConfig {
                alpha_shared: self.alpha_shared,
                lowpass_ratio: self.lowpass_ratio,
            },
            mask_steps: self.mask_steps.clone(),
            epsilon_mask: self.epsilon_mask,
            ..GenerationConfig::default()
        }
    }

    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            iterations: self.iters,
            seed: self.seed,
            epsilon_mask: self.epsilon_mask,
            ..TrainConfig::default()
        }
    }
}
