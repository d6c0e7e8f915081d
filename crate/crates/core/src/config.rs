//! Flat `key = value` run configuration files.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! # comment to end of line
//! key = value      # trailing comments allowed
//! ```
//!
//! Keys are lowercase `[a-z0-9_]+` and may appear once. Blank lines are
//! ignored. Values are trimmed and parsed by the consumer. Command-line
//! flags are layered on top with [`KvConfig::set`], and the resolved config
//! is rendered back with [`KvConfig::to_text`] in sorted key order.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::attention::EncoderConfig;
use crate::error::{Error, Result};
use crate::fast::FastWeights;
use crate::train::{ContrastiveConfig, RunConfig};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

fn valid_key(k: &str) -> bool {
    !k.is_empty() && k.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !valid_key(k) {
                return Err(Error::Config(format!("line {}: invalid key '{k}'", no + 1)));
            }
            if v.is_empty() {
                return Err(Error::Config(format!("line {}: empty value for '{k}'", no + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key '{k}'", no + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Inserts or overrides one entry.
    pub fn set(&mut self, key: &str, value: impl ToString) -> Result<()> {
        if !valid_key(key) {
            return Err(Error::Config(format!("invalid key '{key}'")));
        }
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn remove(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn get_raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.entries
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::Config(format!("bad value '{v}' for '{key}': {e}")))
            })
            .transpose()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Later entries win.
    pub fn merged(mut self, over: &KvConfig) -> Self {
        for (k, v) in &over.entries {
            self.entries.insert(k.clone(), v.clone());
        }
        self
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Rejects keys outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        for k in self.keys() {
            if !allowed.contains(&k) {
                return Err(Error::Config(format!("unknown config key '{k}'")));
            }
        }
        Ok(())
    }
}

fn set_from<T: FromStr>(kv: &KvConfig, key: &str, slot: &mut T) -> Result<()>
where
    T::Err: std::fmt::Display,
{
    if let Some(v) = kv.get(key)? {
        *slot = v;
    }
    Ok(())
}

/// `DxHxW`, e.g. `8x8x8`.
pub fn parse_volume(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = s.split('x').collect();
    let bad = || Error::Config(format!("volume '{s}' is not DxHxW"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| bad())?;
    }
    Ok(out)
}

pub const ENCODER_KEYS: &[&str] = &["volume", "patch", "width", "n_spatial", "n_temporal"];

fn apply_encoder(kv: &KvConfig, enc: &mut EncoderConfig) -> Result<()> {
    if let Some(v) = kv.get_raw("volume") {
        enc.volume = parse_volume(v)?;
    }
    set_from(kv, "patch", &mut enc.patch)?;
    set_from(kv, "width", &mut enc.width)?;
    set_from(kv, "n_spatial", &mut enc.n_spatial)?;
    set_from(kv, "n_temporal", &mut enc.n_temporal)?;
    enc.validate()
}

fn encoder_entries(kv: &mut KvConfig, enc: &EncoderConfig) -> Result<()> {
    let [d, h, w] = enc.volume;
    kv.set("volume", format!("{d}x{h}x{w}"))?;
    kv.set("patch", enc.patch)?;
    kv.set("width", enc.width)?;
    kv.set("n_spatial", enc.n_spatial)?;
    kv.set("n_temporal", enc.n_temporal)
}

pub const RUN_KEYS: &[&str] = &[
    "strategy",
    "seed",
    "epochs",
    "batch_size",
    "lr",
    "eta_min",
    "weight_decay",
    "alpha",
    "beta",
    "gamma",
    "asp_norm",
    "n_volumes",
    "n_labels",
    "degrade_student",
    "student_from_teacher",
];

/// Overlays `kv` on `base`; unknown keys are rejected.
pub fn run_config(kv: &KvConfig, mut base: RunConfig) -> Result<RunConfig> {
    let allowed: Vec<&str> = RUN_KEYS.iter().chain(ENCODER_KEYS).copied().collect();
    kv.check_keys(&allowed)?;
    set_from(kv, "strategy", &mut base.strategy)?;
    set_from(kv, "seed", &mut base.seed)?;
    set_from(kv, "epochs", &mut base.epochs)?;
    set_from(kv, "batch_size", &mut base.batch_size)?;
    set_from(kv, "lr", &mut base.base_lr)?;
    set_from(kv, "eta_min", &mut base.eta_min)?;
    set_from(kv, "weight_decay", &mut base.weight_decay)?;
    let mut w = base.weights;
    set_from(kv, "alpha", &mut w.alpha)?;
    set_from(kv, "beta", &mut w.beta)?;
    set_from(kv, "gamma", &mut w.gamma)?;
    base.weights = FastWeights::new(w.alpha, w.beta, w.gamma)?;
    set_from(kv, "asp_norm", &mut base.asp_norm)?;
    set_from(kv, "n_volumes", &mut base.n_volumes)?;
    set_from(kv, "n_labels", &mut base.n_labels)?;
    set_from(kv, "degrade_student", &mut base.degrade_student)?;
    set_from(kv, "student_from_teacher", &mut base.student_from_teacher)?;
    apply_encoder(kv, &mut base.encoder)?;
    base.validate()?;
    Ok(base)
}

pub fn run_entries(cfg: &RunConfig) -> Result<KvConfig> {
    let mut kv = KvConfig::default();
    kv.set("strategy", cfg.strategy)?;
    kv.set("seed", cfg.seed)?;
    kv.set("epochs", cfg.epochs)?;
    kv.set("batch_size", cfg.batch_size)?;
    kv.set("lr", cfg.base_lr)?;
    kv.set("eta_min", cfg.eta_min)?;
    kv.set("weight_decay", cfg.weight_decay)?;
    kv.set("alpha", cfg.weights.alpha)?;
    kv.set("beta", cfg.weights.beta)?;
    kv.set("gamma", cfg.weights.gamma)?;
    kv.set("asp_norm", cfg.asp_norm)?;
    kv.set("n_volumes", cfg.n_volumes)?;
    kv.set("n_labels", cfg.n_labels)?;
    kv.set("degrade_student", cfg.degrade_student)?;
    kv.set("student_from_teacher", cfg.student_from_teacher)?;
    encoder_entries(&mut kv, &cfg.encoder)?;
    Ok(kv)
}

pub const CONTRASTIVE_KEYS: &[&str] = &[
    "seed",
    "epochs",
    "batch_size",
    "lr",
    "eta_min",
    "weight_decay",
    "out_dim",
    "rank",
    "txt_dim",
    "n_volumes",
    "n_labels",
    "loss_norm",
];

pub fn contrastive_config(kv: &KvConfig, mut base: ContrastiveConfig) -> Result<ContrastiveConfig> {
    let allowed: Vec<&str> = CONTRASTIVE_KEYS.iter().chain(ENCODER_KEYS).copied().collect();
    kv.check_keys(&allowed)?;
    set_from(kv, "seed", &mut base.seed)?;
    set_from(kv, "epochs", &mut base.epochs)?;
    set_from(kv, "batch_size", &mut base.batch_size)?;
    set_from(kv, "lr", &mut base.base_lr)?;
    set_from(kv, "eta_min", &mut base.eta_min)?;
    set_from(kv, "weight_decay", &mut base.weight_decay)?;
    set_from(kv, "out_dim", &mut base.out_dim)?;
    set_from(kv, "rank", &mut base.rank)?;
    set_from(kv, "txt_dim", &mut base.txt_dim)?;
    set_from(kv, "n_volumes", &mut base.n_volumes)?;
    set_from(kv, "n_labels", &mut base.n_labels)?;
    set_from(kv, "loss_norm", &mut base.loss_norm)?;
    apply_encoder(kv, &mut base.encoder)?;
    base.validate()?;
    Ok(base)
}

pub fn contrastive_entries(cfg: &ContrastiveConfig) -> Result<KvConfig> {
    let mut kv = KvConfig::default();
    kv.set("seed", cfg.seed)?;
    kv.set("epochs", cfg.epochs)?;
    kv.set("batch_size", cfg.batch_size)?;
    kv.set("lr", cfg.base_lr)?;
    kv.set("eta_min", cfg.eta_min)?;
    kv.set("weight_decay", cfg.weight_decay)?;
    kv.set("out_dim", cfg.out_dim)?;
    kv.set("rank", cfg.rank)?;
    kv.set("txt_dim", cfg.txt_dim)?;
    kv.set("n_volumes", cfg.n_volumes)?;
    kv.set("n_labels", cfg.n_labels)?;
    kv.set("loss_norm", cfg.loss_norm)?;
    encoder_entries(&mut kv, &cfg.encoder)?;
    Ok(kv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::Strategy;

    #[test]
    fn grammar() {
        let kv = KvConfig::parse("# header\n\nseed = 7 # trailing\n  epochs=3\nlr = 1e-4\n").unwrap();
        assert_eq!(kv.get::<u64>("seed").unwrap(), Some(7));
        assert_eq!(kv.get::<usize>("epochs").unwrap(), Some(3));
        assert_eq!(kv.get::<f64>("lr").unwrap(), Some(1e-4));
        assert_eq!(kv.get::<u64>("missing").unwrap(), None);
        assert!(kv.get::<u64>("lr").is_err());
        assert_eq!(kv.to_text(), "epochs = 3\nlr = 1e-4\nseed = 7\n");

        assert!(KvConfig::parse("seed").is_err());
        assert!(KvConfig::parse("seed =").is_err());
        assert!(KvConfig::parse("Seed = 1").is_err());
        assert!(KvConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(KvConfig::parse("").unwrap().is_empty());
    }

    #[test]
    fn flags_override_file() {
        let file = KvConfig::parse("seed = 1\nepochs = 2").unwrap();
        let mut flags = KvConfig::default();
        flags.set("seed", 9).unwrap();
        let kv = file.merged(&flags);
        let cfg = run_config(&kv, RunConfig::default()).unwrap();
        assert_eq!((cfg.seed, cfg.epochs), (9, 2));
    }

    #[test]
    fn run_config_round_trip() {
        let cfg = RunConfig {
            strategy: Strategy::FeatureKd,
            seed: 3,
            epochs: 0,
            base_lr: 2.5e-4,
            ..Default::default()
        };
        let kv = run_entries(&cfg).unwrap();
        let back = run_config(&KvConfig::parse(&kv.to_text()).unwrap(), RunConfig::default()).unwrap();
        assert_eq!(back, cfg);
        assert!(run_config(&KvConfig::parse("bogus = 1").unwrap(), RunConfig::default()).is_err());
        assert!(run_config(&KvConfig::parse("volume = 8x8").unwrap(), RunConfig::default()).is_err());
        assert!(run_config(&KvConfig::parse("batch_size = 0").unwrap(), RunConfig::default()).is_err());
    }

    #[test]
    fn contrastive_round_trip() {
        let cfg = ContrastiveConfig {
            rank: 3,
            out_dim: 64,
            ..Default::default()
        };
        let kv = contrastive_entries(&cfg).unwrap();
        let back = contrastive_config(&KvConfig::parse(&kv.to_text()).unwrap(), ContrastiveConfig::default()).unwrap();
        assert_eq!(back, cfg);
        assert!(contrastive_config(&KvConfig::parse("strategy = naive_kd").unwrap(), ContrastiveConfig::default()).is_err());
    }
}
