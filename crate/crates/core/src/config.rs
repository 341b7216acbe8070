//! Flat `key = value` run configuration with `#` comments.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Every recognized key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "master seed for parameter init and batch sampling"),
    ("data.identities", "512", "identities in the generated corpus"),
    ("data.views", "8", "jittered views per identity"),
    ("data.size", "64", "image side in pixels (32, 64 or 128)"),
    ("data.holdout", "400", "identities with id >= this are held out of training"),
    ("codec.factor", "4", "space-to-depth block size"),
    ("encoder.patch", "4", "patch-embedding stride"),
    ("encoder.dim", "32", "encoder feature width"),
    ("encoder.blocks", "4", "nominal encoder depth; features come from the block before last"),
    ("encoder.hierarchical", "false", "concatenate features from encoder.taps"),
    ("encoder.taps", "1,2,3", "blocks tapped in hierarchical mode"),
    ("fusion.dim", "32", "condition map width"),
    ("unet.base", "32", "UNet base width"),
    ("unet.mult", "1,2,4", "channel multiplier per level"),
    ("unet.attn_levels", "0,1,2", "levels with an attention block (0 = full latent resolution)"),
    ("unet.groups", "8", "group-norm groups"),
    ("unet.time_dim", "32", "sinusoidal time-embedding width"),
    ("inject.mode", "add-in-ca", "condition injection mode"),
    ("inject.lambda", "1.0", "injection weight"),
    ("inject.interp", "bilinear", "resampling of the condition map (bilinear or nearest)"),
    ("diffusion.T", "1000", "training timesteps"),
    ("diffusion.beta_start", "0.0001", "first beta of the linear schedule"),
    ("diffusion.beta_end", "0.02", "last beta of the linear schedule"),
    ("ddim.steps", "50", "sampling steps"),
    ("ddim.seed", "0", "seed of the initial noise"),
    ("ddim.invert_iters", "3", "fixed-point refinements per inversion step"),
    ("fix.threshold", "10", "skin fix: number of leading steps with latent replacement"),
    ("train.steps", "3000", "optimizer steps"),
    ("train.batch", "8", "samples per step"),
    ("train.lr", "0.0005", "AdamW learning rate"),
    ("train.warmup", "100", "linear learning-rate warmup steps"),
    ("train.weight_decay", "0.01", "AdamW decoupled weight decay"),
    ("train.replace_prob", "0.75", "probability that a part is fed from another view"),
    ("train.log_every", "1", "steps between loss-log lines"),
    ("train.checkpoint_every", "500", "steps between periodic checkpoints (0 = final only)"),
    ("eval.triples", "100", "held-out evaluation triples"),
    ("eval.seed", "0", "seed for triple selection"),
    ("ablate.steps", "300", "training steps per mode in the ablation"),
    ("ablate.triples", "20", "evaluation triples per mode in the ablation"),
];

/// Parsed configuration: every key present, overrides validated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect() }
    }
}

impl RunConfig {
    /// Defaults overlaid with the assignments in `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key {key:?}"))),
        }
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))
    }

    pub fn parsed<V: FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.get(key)?;
        raw.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {raw:?}")))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parsed(key)
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.parsed(key)
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        let v: f64 = self.parsed(key)?;
        if !v.is_finite() {
            return Err(Error::Config(format!("{key} must be finite")));
        }
        Ok(v)
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.parsed(key)
    }

    pub fn list(&self, key: &str) -> Result<Vec<usize>> {
        let raw = self.get(key)?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("{key}: bad list entry {s:?}"))))
            .collect()
    }

    /// Canonical text form listing every key.
    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// FNV-1a hash of [`Self::render`].
    pub fn fingerprint(&self) -> u64 {
        self.render().bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
    }
}
