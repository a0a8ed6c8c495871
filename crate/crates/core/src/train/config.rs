use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{Ablations, LayerProfile, ModelConfig, Positional, Variant};
use crate::tensor::AdamConfig;

/// Everything one training run depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Weight of the connection loss.
    pub alpha: f64,
    /// Weight of the two unimodal head losses.
    pub beta: f64,
    pub lr: f64,
    pub l2: f64,
    /// Apply L2 as decoupled weight decay instead of adding it to the gradient.
    pub decoupled_l2: bool,
    pub patience: usize,
    pub max_epochs: usize,
    /// Conversations per batch.
    pub batch_size: usize,
    pub seed: u64,
    /// Average the three heads' softmax outputs for predictions.
    pub combine_heads: bool,
    /// Which layer-count column the ablation harness uses for variant rows.
    pub layer_profile: LayerProfile,
    /// Also record eval-mode accuracy on the training split after every epoch.
    pub track_train_accuracy: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            alpha: 0.3,
            beta: 0.3,
            lr: 1e-4,
            l2: 1e-4,
            decoupled_l2: false,
            patience: 15,
            max_epochs: 300,
            batch_size: 16,
            seed: 0,
            combine_heads: false,
            layer_profile: LayerProfile::Meld,
            track_train_accuracy: false,
        }
    }
}

/// Every accepted configuration key, in the order `to_text` writes them.
pub const CONFIG_KEYS: &[&str] = &[
    "alpha",
    "beta",
    "mu",
    "lr",
    "l2",
    "decoupled_l2",
    "dropout",
    "patience",
    "max_epochs",
    "batch_size",
    "seed",
    "variant",
    "num_layers",
    "num_heads",
    "d_model",
    "d_latent",
    "d_ff",
    "num_classes",
    "ablations",
    "positional",
    "normalized_connection",
    "final_decoder_relu",
    "connection_loss_clip",
    "symmetric_joint",
    "cosine_eps",
    "layer_norm_eps",
    "combine_heads",
    "layer_profile",
    "track_train_accuracy",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{value}` for `{key}`"))),
    }
}

fn parse_opt(key: &str, value: &str) -> Result<Option<f64>> {
    match value.to_ascii_lowercase().as_str() {
        "none" | "off" | "strict" => Ok(None),
        _ => parse(key, value).map(Some),
    }
}

fn opt_text(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

impl TrainConfig {
    /// Small configuration for feature dimension `d_model` and `num_classes` classes.
    pub fn desk(d_model: usize, num_classes: usize) -> Self {
        TrainConfig {
            model: ModelConfig::desk(d_model, num_classes, 2),
            ..TrainConfig::default()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            l2: self.l2,
            decoupled: self.decoupled_l2,
            ..AdamConfig::default()
        }
    }

    /// Alpha actually applied: the connection loss does not exist without the connection network.
    pub fn effective_alpha(&self) -> f64 {
        if self.model.ablations.icn {
            0.0
        } else {
            self.alpha
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        match key.trim() {
            "alpha" => self.alpha = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "mu" => m.mu = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "l2" => self.l2 = parse(key, v)?,
            "decoupled_l2" => self.decoupled_l2 = parse_bool(key, v)?,
            "dropout" => m.dropout = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "max_epochs" => self.max_epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "variant" => m.variant = v.parse::<Variant>()?,
            "num_layers" => m.num_layers = parse(key, v)?,
            "num_heads" => m.num_heads = parse(key, v)?,
            "d_model" => m.d_model = parse(key, v)?,
            "d_latent" => m.d_latent = parse(key, v)?,
            "d_ff" => m.d_ff = parse(key, v)?,
            "num_classes" => m.num_classes = parse(key, v)?,
            "ablations" => m.ablations = v.parse::<Ablations>()?,
            "positional" => m.positional = v.parse::<Positional>()?,
            "normalized_connection" => m.normalized_connection = parse_bool(key, v)?,
            "final_decoder_relu" => m.final_decoder_relu = parse_bool(key, v)?,
            "connection_loss_clip" => m.connection_loss_clip = parse_opt(key, v)?,
            "symmetric_joint" => m.symmetric_joint = parse_bool(key, v)?,
            "cosine_eps" => m.cosine_eps = parse_opt(key, v)?,
            "layer_norm_eps" => m.layer_norm_eps = parse(key, v)?,
            "combine_heads" => self.combine_heads = parse_bool(key, v)?,
            "layer_profile" => self.layer_profile = v.parse::<LayerProfile>()?,
            "track_train_accuracy" => self.track_train_accuracy = parse_bool(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Apply `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{}` is not key=value", o.as_ref())))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Parse `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        Some(match key {
            "alpha" => self.alpha.to_string(),
            "beta" => self.beta.to_string(),
            "mu" => m.mu.to_string(),
            "lr" => self.lr.to_string(),
            "l2" => self.l2.to_string(),
            "decoupled_l2" => self.decoupled_l2.to_string(),
            "dropout" => m.dropout.to_string(),
            "patience" => self.patience.to_string(),
            "max_epochs" => self.max_epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "seed" => self.seed.to_string(),
            "variant" => m.variant.to_string(),
            "num_layers" => m.num_layers.to_string(),
            "num_heads" => m.num_heads.to_string(),
            "d_model" => m.d_model.to_string(),
            "d_latent" => m.d_latent.to_string(),
            "d_ff" => m.d_ff.to_string(),
            "num_classes" => m.num_classes.to_string(),
            "ablations" => m.ablations.to_string(),
            "positional" => m.positional.to_string(),
            "normalized_connection" => m.normalized_connection.to_string(),
            "final_decoder_relu" => m.final_decoder_relu.to_string(),
            "connection_loss_clip" => opt_text(m.connection_loss_clip),
            "symmetric_joint" => m.symmetric_joint.to_string(),
            "cosine_eps" => opt_text(m.cosine_eps),
            "layer_norm_eps" => m.layer_norm_eps.to_string(),
            "combine_heads" => self.combine_heads.to_string(),
            "layer_profile" => self.layer_profile.to_string(),
            "track_train_accuracy" => self.track_train_accuracy.to_string(),
            _ => return None,
        })
    }

    /// Canonical text form; `parse_text(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    /// 64-bit FNV-1a of the canonical text form, as 16 hex digits.
    pub fn hash(&self) -> String {
        use std::hash::Hasher;
        let mut h = fnv::FnvHasher::default();
        h.write(self.to_text().as_bytes());
        format!("{:016x}", h.finish())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("l2", self.l2)] {
            if v.is_nan() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.lr.is_nan() || self.lr < 0.0 {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_epochs and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}
