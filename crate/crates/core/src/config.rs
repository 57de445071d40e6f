//! Run configuration and its flat `key = value` file format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Weights of the prediction, generation and MI terms of the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
}

impl LossWeights {
    pub fn new(alpha1: f64, alpha2: f64, alpha3: f64) -> Result<Self> {
        let w = LossWeights { alpha1, alpha2, alpha3 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha1", self.alpha1), ("alpha2", self.alpha2), ("alpha3", self.alpha3)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// Weights as applied under `variant`; `none` zeroes the MI weight.
    pub fn effective(&self, variant: MiVariant) -> LossWeights {
        match variant {
            MiVariant::None => LossWeights { alpha3: 0.0, ..*self },
            _ => *self,
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        default_weights()
    }
}

/// 0.5 / 0.5 / 0.1.
pub fn default_weights() -> LossWeights {
    LossWeights { alpha1: 0.5, alpha2: 0.5, alpha3: 0.1 }
}

macro_rules! keyword_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $kw:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $kw),+
                }
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim() {
                    $($kw => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("invalid ", stringify!($name), " `{}` (expected one of: {})"),
                        other,
                        [$($kw),+].join(", ")
                    ))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

keyword_enum! {
    /// Which auxiliary term joins the two task losses.
    MiVariant {
        Max => "max",
        Mean => "mean",
        Kl => "kl",
        None => "none",
    }
}

keyword_enum! {
    /// Which side of the MI loss, if any, is detached from the gradient.
    StopTarget {
        None => "none",
        Predict => "predict",
        Explain => "explain",
    }
}

keyword_enum! {
    /// Sequence-level confidence derived from per-token chosen probabilities.
    ConfidenceMode {
        Mean => "mean",
        Geometric => "geometric",
        First => "first",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub mi_variant: MiVariant,
    pub mi_stop_target: StopTarget,
    /// Upper bound on vocabulary size, specials included.
    pub vocab_size: usize,
    /// Global-norm gradient clipping threshold.
    pub clip_norm: f64,
    pub confidence: ConfidenceMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            embed_dim: 16,
            hidden_dim: 32,
            max_src_len: 16,
            max_tgt_len: 16,
            batch_size: 16,
            steps: 2000,
            learning_rate: 5e-3,
            weights: default_weights(),
            mi_variant: MiVariant::Max,
            mi_stop_target: StopTarget::None,
            vocab_size: 64,
            clip_norm: 5.0,
            confidence: ConfidenceMode::Mean,
        }
    }
}

pub const CONFIG_KEYS: [&str; 16] = [
    "seed",
    "embed_dim",
    "hidden_dim",
    "max_src_len",
    "max_tgt_len",
    "batch_size",
    "steps",
    "learning_rate",
    "alpha1",
    "alpha2",
    "alpha3",
    "mi_variant",
    "mi_stop_target",
    "vocab_size",
    "clip_norm",
    "confidence",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for key `{key}`")))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("max_src_len", self.max_src_len),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.max_tgt_len < 2 {
            return Err(Error::Config("max_tgt_len must be at least 2 (BOS + one token)".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.vocab_size < 6 {
            return Err(Error::Config("vocab_size must be at least 6".into()));
        }
        self.weights.validate()
    }

    /// Weights as actually applied (MI weight zeroed for `mi_variant = none`).
    pub fn effective_weights(&self) -> LossWeights {
        self.weights.effective(self.mi_variant)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "embed_dim" => self.embed_dim = parse_value(key, value)?,
            "hidden_dim" => self.hidden_dim = parse_value(key, value)?,
            "max_src_len" => self.max_src_len = parse_value(key, value)?,
            "max_tgt_len" => self.max_tgt_len = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "steps" => self.steps = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "alpha1" => self.weights.alpha1 = parse_value(key, value)?,
            "alpha2" => self.weights.alpha2 = parse_value(key, value)?,
            "alpha3" => self.weights.alpha3 = parse_value(key, value)?,
            "mi_variant" => self.mi_variant = value.parse()?,
            "mi_stop_target" => self.mi_stop_target = value.parse()?,
            "vocab_size" => self.vocab_size = parse_value(key, value)?,
            "clip_norm" => self.clip_norm = parse_value(key, value)?,
            "confidence" => self.confidence = value.parse()?,
            other => return Err(Error::UnknownConfigKey(other.to_string())),
        }
        Ok(())
    }

    /// Parses the flat format. Keys absent from the text keep their defaults;
    /// unknown keys and repeated keys are errors. `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
            seen.push(key);
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical serialization: every key, fixed order.
    pub fn to_text(&self) -> String {
        let values = [
            self.seed.to_string(),
            self.embed_dim.to_string(),
            self.hidden_dim.to_string(),
            self.max_src_len.to_string(),
            self.max_tgt_len.to_string(),
            self.batch_size.to_string(),
            self.steps.to_string(),
            self.learning_rate.to_string(),
            self.weights.alpha1.to_string(),
            self.weights.alpha2.to_string(),
            self.weights.alpha3.to_string(),
            self.mi_variant.to_string(),
            self.mi_stop_target.to_string(),
            self.vocab_size.to_string(),
            self.clip_norm.to_string(),
            self.confidence.to_string(),
        ];
        CONFIG_KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}
