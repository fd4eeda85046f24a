//! Training configuration and its line-oriented `key = value` text form.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::codec::{CodecKind, LatentCodec};
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::model::{DiTConfig, ModelPreset};
use crate::optim::AdamWConfig;
use crate::schedule::ScheduleConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    pub weights: LossWeights,
    pub schedule: ScheduleConfig,
    /// `input_size` and `in_channels` follow the codec; see [`TrainConfig::sync_latent`].
    pub model: DiTConfig,
    pub codec: CodecKind,
    pub image_size: usize,
    pub seed: u64,
    /// Checkpoint interval in steps; 0 saves only at the end.
    pub checkpoint_every: usize,
    pub log_every: usize,
}

/// Keys that may differ between a checkpoint and the run resuming it.
pub const RUN_KEYS: [&str; 3] = ["iterations", "checkpoint_every", "log_every"];

impl TrainConfig {
    pub const KEYS: [&'static str; 25] = [
        "iterations",
        "batch_size",
        "lr",
        "weight_decay",
        "beta1",
        "beta2",
        "adam_eps",
        "lambda_eps",
        "lambda_rec",
        "lambda_lpips",
        "lambda_clip",
        "timesteps",
        "beta_start",
        "beta_end",
        "codec",
        "image_size",
        "patch_size",
        "hidden_size",
        "depth",
        "num_heads",
        "cond_dim",
        "time_embed_dim",
        "seed",
        "checkpoint_every",
        "log_every",
    ];

    /// Desk-scale defaults: 32x32 images, identity codec, d=128, depth 4.
    pub fn desk() -> Self {
        let mut cfg = TrainConfig {
            iterations: 2000,
            batch_size: 16,
            optim: AdamWConfig::default(),
            weights: LossWeights::default(),
            schedule: ScheduleConfig::desk(),
            model: DiTConfig::desk(),
            codec: CodecKind::Identity,
            image_size: 32,
            seed: 0,
            checkpoint_every: 500,
            log_every: 50,
        };
        cfg.sync_latent();
        cfg
    }

    /// Published hyperparameters and the XL architecture on desk-sized data.
    pub fn paper() -> Self {
        let xl = ModelPreset::dit_xl_256().config;
        let mut cfg = TrainConfig {
            iterations: 40_000,
            batch_size: 64,
            optim: AdamWConfig {
                lr: 1e-4,
                weight_decay: 1e-4,
                ..AdamWConfig::default()
            },
            schedule: ScheduleConfig::ddpm_1000(),
            model: xl,
            ..Self::desk()
        };
        cfg.sync_latent();
        cfg
    }

    /// Derive the latent grid from the codec and image size.
    pub fn sync_latent(&mut self) {
        let factor = LatentCodec::DEFAULT_FACTOR;
        self.model.input_size = self.image_size / factor;
        self.model.in_channels = match self.codec {
            CodecKind::Identity => 3 * factor * factor,
            CodecKind::TinyAe => LatentCodec::DEFAULT_AE_CHANNELS,
        };
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::param("iterations and batch_size must be at least 1"));
        }
        if self.log_every == 0 {
            return Err(Error::param("log_every must be at least 1"));
        }
        if self.image_size % LatentCodec::DEFAULT_FACTOR != 0 {
            return Err(Error::param(format!("image_size {} must be even", self.image_size)));
        }
        self.optim.validate()?;
        self.weights.validate()?;
        self.schedule.build()?;
        self.model.validate()
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let m = &self.model;
        Ok(match key {
            "iterations" => self.iterations.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.optim.lr.to_string(),
            "weight_decay" => self.optim.weight_decay.to_string(),
            "beta1" => self.optim.beta1.to_string(),
            "beta2" => self.optim.beta2.to_string(),
            "adam_eps" => self.optim.eps.to_string(),
            "lambda_eps" => self.weights.eps.to_string(),
            "lambda_rec" => self.weights.rec.to_string(),
            "lambda_lpips" => self.weights.lpips.to_string(),
            "lambda_clip" => self.weights.clip.to_string(),
            "timesteps" => self.schedule.timesteps.to_string(),
            "beta_start" => self.schedule.beta_start.to_string(),
            "beta_end" => self.schedule.beta_end.to_string(),
            "codec" => self.codec.to_string(),
            "image_size" => self.image_size.to_string(),
            "patch_size" => m.patch_size.to_string(),
            "hidden_size" => m.hidden_size.to_string(),
            "depth" => m.depth.to_string(),
            "num_heads" => m.num_heads.to_string(),
            "cond_dim" => m.cond_dim.to_string(),
            "time_embed_dim" => m.time_embed_dim.to_string(),
            "seed" => self.seed.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "log_every" => self.log_every.to_string(),
            other => return Err(Error::param(format!("unknown config key '{other}'"))),
        })
    }

    /// Set one key from its text form. Keeps the latent grid in sync.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::param(format!("invalid value '{v}' for '{key}'")))
        }
        let m = &mut self.model;
        match key {
            "iterations" => self.iterations = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.optim.lr = num(key, value)?,
            "weight_decay" => self.optim.weight_decay = num(key, value)?,
            "beta1" => self.optim.beta1 = num(key, value)?,
            "beta2" => self.optim.beta2 = num(key, value)?,
            "adam_eps" => self.optim.eps = num(key, value)?,
            "lambda_eps" => self.weights.eps = num(key, value)?,
            "lambda_rec" => self.weights.rec = num(key, value)?,
            "lambda_lpips" => self.weights.lpips = num(key, value)?,
            "lambda_clip" => self.weights.clip = num(key, value)?,
            "timesteps" => self.schedule.timesteps = num(key, value)?,
            "beta_start" => self.schedule.beta_start = num(key, value)?,
            "beta_end" => self.schedule.beta_end = num(key, value)?,
            "codec" => self.codec = value.parse()?,
            "image_size" => self.image_size = num(key, value)?,
            "patch_size" => m.patch_size = num(key, value)?,
            "hidden_size" => m.hidden_size = num(key, value)?,
            "depth" => m.depth = num(key, value)?,
            "num_heads" => m.num_heads = num(key, value)?,
            "cond_dim" => m.cond_dim = num(key, value)?,
            "time_embed_dim" => m.time_embed_dim = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "log_every" => self.log_every = num(key, value)?,
            other => return Err(Error::param(format!("unknown config key '{other}'"))),
        }
        self.sync_latent();
        Ok(())
    }

    /// Every key, in [`TrainConfig::KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            // every listed key is known to `get`
            let _ = writeln!(out, "{key} = {}", self.get(key).unwrap_or_default());
        }
        out
    }

    /// Desk defaults overridden by `text`; unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        for (offset, key, value) in parse_kv(text)? {
            cfg.set(&key, &value)
                .map_err(|e| Error::parse(offset, e.to_string()))?;
        }
        Ok(cfg)
    }

    /// Keys (other than [`RUN_KEYS`]) whose values differ.
    pub fn diff_model_keys(&self, other: &TrainConfig) -> Vec<&'static str> {
        Self::KEYS
            .iter()
            .copied()
            .filter(|k| !RUN_KEYS.contains(k))
            .filter(|k| self.get(k).ok() != other.get(k).ok())
            .collect()
    }
}

/// `key = value` lines; `#` starts a comment, blank lines are skipped.
/// Returns `(byte offset of line, key, value)`.
pub fn parse_kv(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for raw in text.split_inclusive('\n') {
        let line = raw.split('#').next().unwrap_or("").trim();
        if !line.is_empty() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(offset, format!("expected 'key = value', got '{line}'")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || v.is_empty() {
                return Err(Error::parse(offset, format!("empty key or value in '{line}'")));
            }
            if out.iter().any(|(_, seen, _): &(usize, String, String)| seen == k) {
                return Err(Error::parse(offset, format!("duplicate key '{k}'")));
            }
            out.push((offset, k.to_string(), v.to_string()));
        }
        offset += raw.len();
    }
    Ok(out)
}
