//! Training configuration: a line-oriented `key = value` format with strict
//! key checking, defaults suited to desk-scale runs, and a serialization used
//! verbatim as the checkpoint's config snapshot.

use std::path::Path;

use crate::error::{GraftError, Result};
use crate::model::{ModelConfig, Variant};

/// Parses a grafting-pair tag like `R5-S2` into the transformer stage index.
pub fn parse_graft_pair(s: &str) -> Result<usize> {
    let bad = || {
        GraftError::Config(format!("bad graft_pair {s:?} (want R5-S1 through R5-S4)"))
    };
    let stage = s.strip_prefix("R5-S").ok_or_else(bad)?;
    let k: usize = stage.parse().map_err(|_| bad())?;
    if (1..=4).contains(&k) {
        Ok(k)
    } else {
        Err(bad())
    }
}

/// Formats a transformer stage index as its grafting-pair tag.
pub fn graft_pair_tag(stage: usize) -> String {
    format!("R5-S{stage}")
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Learning rate for the transformer encoder parameters.
    pub lr_backbone_attn: f64,
    /// Learning rate for everything else; held at 10x `lr_backbone_attn`
    /// unless `unlink_lr` is set.
    pub lr_other: f64,
    pub unlink_lr: bool,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of total steps spent ramping the rate up linearly; the
    /// remainder decays linearly to zero.
    pub warmup_fraction: f64,
    /// Weighting strength of the attention-guided loss.
    pub beta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lr_backbone_attn: 0.003,
            lr_other: 0.03,
            unlink_lr: false,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 4,
            epochs: 32,
            warmup_fraction: 0.1,
            beta: 1.0,
            seed: 7,
        }
    }
}

impl TrainConfig {
    /// Parses `key = value` lines. Blank lines and `#` comments are skipped;
    /// unknown keys and malformed values are errors. After parsing, the
    /// linked-rate rule is applied unless the file (or caller) unlinks it.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with(text, false)
    }

    /// Like [`parse`](Self::parse), with the unlink switch already thrown —
    /// the hook for a command-line `--unlink-lr` that must beat the
    /// linked-rate conflict check.
    pub fn parse_with(text: &str, force_unlink: bool) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut lr_other_set = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                GraftError::Config(format!("line {}: want `key = value`, got {raw:?}", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| {
                GraftError::Config(format!("line {}: bad {what} value {value:?}", lineno + 1))
            };
            macro_rules! num {
                ($t:ty, $what:literal) => {
                    value.parse::<$t>().map_err(|_| bad($what))?
                };
            }
            match key {
                "variant" => {
                    cfg.model.variant = Variant::from_tag(value).ok_or_else(|| bad("variant"))?
                }
                "cnn_hw" => cfg.model.cnn_hw = num!(usize, "cnn_hw"),
                "attn_hw" => cfg.model.attn_hw = num!(usize, "attn_hw"),
                "patch_size" => cfg.model.patch_size = num!(usize, "patch_size"),
                "channel_factor" => cfg.model.channel_factor = num!(f64, "channel_factor"),
                "attn_heads" => cfg.model.attn_heads = num!(usize, "attn_heads"),
                "cmgm_heads" => cfg.model.cmgm_heads = num!(usize, "cmgm_heads"),
                "graft_pair" => cfg.model.graft_stage = parse_graft_pair(value)?,
                "attention_cap" => cfg.model.attention_cap = num!(usize, "attention_cap"),
                "lr_backbone_attn" => cfg.lr_backbone_attn = num!(f64, "lr_backbone_attn"),
                "lr_other" => {
                    cfg.lr_other = num!(f64, "lr_other");
                    lr_other_set = true;
                }
                "unlink_lr" => cfg.unlink_lr = num!(bool, "unlink_lr"),
                "momentum" => cfg.momentum = num!(f64, "momentum"),
                "weight_decay" => cfg.weight_decay = num!(f64, "weight_decay"),
                "batch_size" => cfg.batch_size = num!(usize, "batch_size"),
                "epochs" => cfg.epochs = num!(usize, "epochs"),
                "warmup_fraction" => cfg.warmup_fraction = num!(f64, "warmup_fraction"),
                "beta" => cfg.beta = num!(f64, "beta"),
                "seed" => cfg.seed = num!(u64, "seed"),
                other => {
                    return Err(GraftError::Config(format!(
                        "line {}: unknown key {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        if force_unlink {
            cfg.unlink_lr = true;
        }
        if !cfg.unlink_lr {
            if lr_other_set && (cfg.lr_other - 10.0 * cfg.lr_backbone_attn).abs() > 1e-12 {
                return Err(GraftError::Config(
                    "lr_other conflicts with the linked-rate rule; set unlink_lr = true \
                     (or pass --unlink-lr) to override"
                        .into(),
                ));
            }
            cfg.lr_other = 10.0 * cfg.lr_backbone_attn;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with(path, false)
    }

    pub fn load_with(path: &Path, force_unlink: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GraftError::io(path, e))?;
        Self::parse_with(&text, force_unlink).map_err(|e| match e {
            GraftError::Config(msg) => GraftError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let positive = [
            ("lr_backbone_attn", self.lr_backbone_attn),
            ("lr_other", self.lr_other),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(GraftError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(GraftError::Config(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(GraftError::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(GraftError::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(GraftError::Config(format!(
                "warmup_fraction must be in [0,1], got {}",
                self.warmup_fraction
            )));
        }
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(GraftError::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        Ok(())
    }

    /// The checkpoint snapshot: every key, one per line, parseable by
    /// [`TrainConfig::parse`] back into an identical config.
    pub fn to_text(&self) -> String {
        format!(
            "variant = {}\n\
             cnn_hw = {}\n\
             attn_hw = {}\n\
             patch_size = {}\n\
             channel_factor = {}\n\
             attn_heads = {}\n\
             cmgm_heads = {}\n\
             graft_pair = {}\n\
             attention_cap = {}\n\
             lr_backbone_attn = {}\n\
             lr_other = {}\n\
             unlink_lr = {}\n\
             momentum = {}\n\
             weight_decay = {}\n\
             batch_size = {}\n\
             epochs = {}\n\
             warmup_fraction = {}\n\
             beta = {}\n\
             seed = {}\n",
            self.model.variant.tag(),
            self.model.cnn_hw,
            self.model.attn_hw,
            self.model.patch_size,
            self.model.channel_factor,
            self.model.attn_heads,
            self.model.cmgm_heads,
            graft_pair_tag(self.model.graft_stage),
            self.model.attention_cap,
            self.lr_backbone_attn,
            self.lr_other,
            self.unlink_lr,
            self.momentum,
            self.weight_decay,
            self.batch_size,
            self.epochs,
            self.warmup_fraction,
            self.beta,
            self.seed,
        )
    }
}
