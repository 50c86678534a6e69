//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment. Every key has a default,
//! unknown keys and repeated keys are rejected. [`RunConfig::render`] emits
//! every key in a fixed order, so a rendered config parses back to itself.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::net::{NetworkConfig, VariantFlags};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::arg(format!("unknown precision {other:?}, expected f32 or f64"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    /// Optimizer, schedule, loss and the run seed.
    pub train: TrainConfig,
    pub precision: Precision,
    pub lo_hu: f64,
    pub hi_hu: f64,
    /// Square working resolution of preprocessed data.
    pub size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            precision: Precision::F32,
            lo_hu: crate::data::LO_HU,
            hi_hu: crate::data::HI_HU,
            size: 64,
        }
    }
}

/// Every accepted key, in render order.
pub const KEYS: &[&str] = &[
    "levels",
    "base_channels",
    "input_channels",
    "reduction",
    "sdc_dilations",
    "upsample",
    "spatial_only",
    "deep_supervision",
    "decoder_residuals",
    "channel_branch_includes_sl",
    "precision",
    "seed",
    "learning_rate",
    "beta1",
    "beta2",
    "eps",
    "batch_size",
    "max_epochs",
    "patience",
    "min_delta",
    "alpha",
    "beta",
    "gamma",
    "smooth",
    "side_weights",
    "pooling",
    "lo_hu",
    "hi_hu",
    "size",
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::arg(format!("{key}: cannot parse {value:?}")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::arg(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Assigns one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let net = &mut self.network;
        let tr = &mut self.train;
        match key {
            "levels" => net.levels = num(key, value)?,
            "base_channels" => net.base_channels = num(key, value)?,
            "input_channels" => net.input_channels = num(key, value)?,
            "reduction" => net.reduction = num(key, value)?,
            "sdc_dilations" => net.sdc_dilations = list(key, value)?,
            "upsample" => net.upsample_mode = value.parse()?,
            "spatial_only" => net.variant.spatial_only = flag(key, value)?,
            "deep_supervision" => net.variant.deep_supervision = flag(key, value)?,
            "decoder_residuals" => net.variant.decoder_residuals = flag(key, value)?,
            "channel_branch_includes_sl" => net.variant.channel_branch_includes_sl = flag(key, value)?,
            "precision" => self.precision = value.parse()?,
            "seed" => tr.seed = num(key, value)?,
            "learning_rate" => tr.adam.learning_rate = num(key, value)?,
            "beta1" => tr.adam.beta1 = num(key, value)?,
            "beta2" => tr.adam.beta2 = num(key, value)?,
            "eps" => tr.adam.eps = num(key, value)?,
            "batch_size" => tr.batch_size = num(key, value)?,
            "max_epochs" => tr.max_epochs = num(key, value)?,
            "patience" => tr.patience = num(key, value)?,
            "min_delta" => tr.min_delta = num(key, value)?,
            "alpha" => tr.loss.alpha = num(key, value)?,
            "beta" => tr.loss.beta = num(key, value)?,
            "gamma" => tr.loss.gamma = num(key, value)?,
            "smooth" => tr.loss.smooth = num(key, value)?,
            "side_weights" => tr.loss.side_weights = if value == "uniform" { None } else { Some(list(key, value)?) },
            "pooling" => tr.loss.pooling = value.parse()?,
            "lo_hu" => self.lo_hu = num(key, value)?,
            "hi_hu" => self.hi_hu = num(key, value)?,
            "size" => self.size = num(key, value)?,
            other => return Err(Error::arg(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let net = &self.network;
        let tr = &self.train;
        let v = match key {
            "levels" => net.levels.to_string(),
            "base_channels" => net.base_channels.to_string(),
            "input_channels" => net.input_channels.to_string(),
            "reduction" => net.reduction.to_string(),
            "sdc_dilations" => join(&net.sdc_dilations),
            "upsample" => net.upsample_mode.to_string(),
            "spatial_only" => net.variant.spatial_only.to_string(),
            "deep_supervision" => net.variant.deep_supervision.to_string(),
            "decoder_residuals" => net.variant.decoder_residuals.to_string(),
            "channel_branch_includes_sl" => net.variant.channel_branch_includes_sl.to_string(),
            "precision" => self.precision.to_string(),
            "seed" => tr.seed.to_string(),
            "learning_rate" => tr.adam.learning_rate.to_string(),
            "beta1" => tr.adam.beta1.to_string(),
            "beta2" => tr.adam.beta2.to_string(),
            "eps" => tr.adam.eps.to_string(),
            "batch_size" => tr.batch_size.to_string(),
            "max_epochs" => tr.max_epochs.to_string(),
            "patience" => tr.patience.to_string(),
            "min_delta" => tr.min_delta.to_string(),
            "alpha" => tr.loss.alpha.to_string(),
            "beta" => tr.loss.beta.to_string(),
            "gamma" => tr.loss.gamma.to_string(),
            "smooth" => tr.loss.smooth.to_string(),
            "side_weights" => tr.loss.side_weights.as_deref().map_or("uniform".into(), join),
            "pooling" => tr.loss.pooling.to_string(),
            "lo_hu" => self.lo_hu.to_string(),
            "hi_hu" => self.hi_hu.to_string(),
            "size" => self.size.to_string(),
            _ => return None,
        };
        Some(v)
    }

    /// Applies `text` over the current values. `origin` names the source in
    /// error messages.
    pub fn merge(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut seen: Vec<&str> = Vec::new();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |reason: String| Error::format(origin, format!("line {}: {reason}", k + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| at(format!("expected key = value, got {line:?}")))?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(at(format!("key {key:?} appears more than once")));
            }
            seen.push(key);
            self.set(key, value).map_err(|e| at(e.to_string()))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.merge(text, "<config>")?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::default();
        cfg.merge(&fs::read_to_string(path)?, &path.display().to_string())?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.render())?;
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        if let Some(name) = self.network.variant.name() {
            out.push_str(&format!("# variant {name}\n"));
        }
        for key in KEYS {
            out.push_str(&format!("{key} = {}\n", self.get(key).expect("listed key")));
        }
        out
    }

    pub fn set_variant(&mut self, variant: VariantFlags) {
        self.network.variant = VariantFlags { channel_branch_includes_sl: self.network.variant.channel_branch_includes_sl, ..variant };
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        if !(self.lo_hu < self.hi_hu) {
            return Err(Error::arg(format!("lo_hu {} must be below hi_hu {}", self.lo_hu, self.hi_hu)));
        }
        crate::data::check_target_size(self.size, self.network.levels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.render();
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), KEYS.len());
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
        assert!(text.contains("lo_hu = -1000\nhi_hu = 170\n"));
        cfg.validate().unwrap();
    }

    #[test]
    fn every_key_round_trips() {
        let mut cfg = RunConfig::default();
        let edits = [
            ("levels", "3"),
            ("sdc_dilations", "1,3"),
            ("upsample", "nearest"),
            ("deep_supervision", "false"),
            ("precision", "f64"),
            ("learning_rate", "0.0003"),
            ("side_weights", "1,0.5,0.25"),
            ("pooling", "image"),
            ("size", "32"),
        ];
        for (k, v) in edits {
            cfg.set(k, v).unwrap();
            assert_eq!(cfg.get(k).unwrap(), v);
        }
        assert_eq!(RunConfig::parse(&cfg.render()).unwrap(), cfg);
        for key in KEYS {
            assert!(cfg.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn comments_and_whitespace() {
        let cfg = RunConfig::parse("# header\n\n  levels=3  # inline\nseed =  9\n").unwrap();
        assert_eq!(cfg.network.levels, 3);
        assert_eq!(cfg.train.seed, 9);
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        let unknown = RunConfig::parse("levles = 3\n").unwrap_err().to_string();
        assert!(unknown.contains("line 1") && unknown.contains("levles"), "{unknown}");
        let dup = RunConfig::parse("seed = 1\nseed = 1\n").unwrap_err().to_string();
        assert!(dup.contains("line 2") && dup.contains("more than once"), "{dup}");
        assert!(RunConfig::parse("levels\n").is_err());
        assert!(RunConfig::parse("levels = three\n").is_err());
        assert!(RunConfig::parse("spatial_only = yes\n").is_err());
    }

    #[test]
    fn later_merge_overrides() {
        let mut cfg = RunConfig::parse("levels = 3\nbatch_size = 2\n").unwrap();
        cfg.merge("levels = 2\n", "flags").unwrap();
        assert_eq!((cfg.network.levels, cfg.train.batch_size), (2, 2));
    }

    #[test]
    fn variant_sets_flags() {
        let mut cfg = RunConfig::default();
        cfg.set_variant("II".parse().unwrap());
        assert!(cfg.render().contains("deep_supervision = false\n"));
        assert!(cfg.render().starts_with("# variant II\n"));
    }

    #[test]
    fn validate_checks_size_and_window() {
        let mut cfg = RunConfig::default();
        cfg.size = 60;
        assert!(cfg.validate().is_err());
        cfg.size = 64;
        cfg.lo_hu = 200.0;
        assert!(cfg.validate().is_err());
    }
}
