//! Run configuration: a plain `key = value` text file.
//!
//! Grammar: one `key = value` per line; `#` starts a comment; blank lines are
//! ignored; keys are unique. Unset keys keep their defaults, and every key
//! (set or not) is echoed into [`RunConfig::canonical`], whose SHA-256 is the
//! fingerprint stamped on every report.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::certify::DefenseConfig;
use crate::data::{load_cifar, load_idx, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::train::{OcclusionAugment, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Synthetic,
    Idx,
    Cifar,
}

impl DataKind {
    fn name(self) -> &'static str {
        match self {
            DataKind::Synthetic => "synthetic",
            DataKind::Idx => "idx",
            DataKind::Cifar => "cifar",
        }
    }
}

impl FromStr for DataKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(DataKind::Synthetic),
            "idx" => Ok(DataKind::Idx),
            "cifar" => Ok(DataKind::Cifar),
            other => Err(Error::config(format!("unknown data source '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataKind,
    pub data_seed: u64,
    pub classes: usize,
    pub image_size: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
    /// Comma-separated batch files.
    pub train_batches: String,
    pub test_batches: String,
    /// Evaluate at most this many test images; 0 means all.
    pub test_limit: usize,

    pub model: String,
    pub model_seed: u64,
    pub width1: usize,
    pub width2: usize,

    pub winner_rate: f32,
    pub superficial_layer: usize,
    pub patch: usize,
    pub step: usize,
    pub tau: f64,
    pub alert_cluster_min: usize,

    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub finetune_epochs: usize,
    pub finetune_learning_rate: f32,
    /// Probability of a random occluder during finetuning; 0 disables it.
    pub occlusion_prob: f32,
    /// Side of the training occluder; 0 uses the occluding window side.
    pub occlusion_side: usize,

    pub target: usize,
    pub attack_steps: usize,
    pub attack_step_size: f32,
    pub alpha: f32,
    pub attack_seed: u64,
    pub attack_images: usize,

    /// 0 selects the grid-scaled default.
    pub top_n: usize,
    /// 0 selects the grid-scaled default.
    pub bandwidth: f64,
    /// Worker threads; 0 lets the pool decide.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataKind::Synthetic,
            data_seed: 1,
            classes: 4,
            image_size: 16,
            train_count: 1200,
            test_count: 200,
            train_images: String::new(),
            train_labels: String::new(),
            test_images: String::new(),
            test_labels: String::new(),
            train_batches: String::new(),
            test_batches: String::new(),
            test_limit: 0,
            model: String::new(),
            model_seed: 7,
            width1: 12,
            width2: 24,
            winner_rate: 0.2,
            superficial_layer: 1,
            patch: 3,
            step: 3,
            tau: 0.6,
            alert_cluster_min: 1,
            seed: 0,
            epochs: 12,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 32,
            finetune_epochs: 6,
            finetune_learning_rate: 0.02,
            occlusion_prob: 0.5,
            occlusion_side: 0,
            target: 0,
            attack_steps: 100,
            attack_step_size: 0.1,
            alpha: 0.0,
            attack_seed: 3,
            attack_images: 64,
            top_n: 0,
            bandwidth: 0.0,
            workers: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value '{value}' for '{key}'")))
}

macro_rules! fields {
    ($($name:ident),* $(,)?) => {
        const KEYS: &[&str] = &[$(stringify!($name)),*];

        impl RunConfig {
            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($name) => self.$name = parse(key, value)?,)*
                    "data" => self.data = value.parse()?,
                    _ => return Err(Error::config(format!("unknown key '{key}'"))),
                }
                Ok(())
            }

            fn values(&self) -> Vec<(&'static str, String)> {
                let mut v = vec![("data", self.data.name().to_string())];
                $(v.push((stringify!($name), self.$name.to_string()));)*
                v
            }
        }
    };
}

fields!(
    data_seed, classes, image_size, train_count, test_count, train_images, train_labels, test_images,
    test_labels, train_batches, test_batches, test_limit, model, model_seed, width1, width2, winner_rate,
    superficial_layer, patch, step, tau, alert_cluster_min, seed, epochs, learning_rate, momentum,
    batch_size, finetune_epochs, finetune_learning_rate, occlusion_prob, occlusion_side, target, attack_steps,
    attack_step_size, alpha, attack_seed, attack_images, top_n, bandwidth, workers,
);

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected 'key = value'", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::config(format!("line {}: duplicate key '{key}'", n + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Every key in a fixed order, one `key = value` per line.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.values() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// First 16 hex digits of the SHA-256 of [`RunConfig::canonical`].
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Fails unless `fingerprint` is this configuration's fingerprint.
    pub fn verify_fingerprint(&self, fingerprint: &str) -> Result<()> {
        let own = self.fingerprint();
        if own == fingerprint {
            Ok(())
        } else {
            Err(Error::config(format!("fingerprint {fingerprint} does not match configuration ({own})")))
        }
    }

    pub fn keys() -> impl Iterator<Item = &'static str> {
        std::iter::once("data").chain(KEYS.iter().copied())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.winner_rate > 0.0 && self.winner_rate <= 1.0) {
            return Err(Error::config(format!("winner_rate {} outside (0, 1]", self.winner_rate)));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(Error::config("occlusion_prob outside [0, 1]"));
        }
        if self.bandwidth < 0.0 {
            return Err(Error::config("bandwidth must be >= 0"));
        }
        if self.width1 == 0 || self.width2 == 0 {
            return Err(Error::config("layer widths must be >= 1"));
        }
        if self.target >= self.classes && self.data == DataKind::Synthetic {
            return Err(Error::config(format!("target {} >= {} classes", self.target, self.classes)));
        }
        self.defense().validate()?;
        self.train_config().validate()?;
        self.finetune_config().validate()
    }

    pub fn defense(&self) -> DefenseConfig {
        DefenseConfig {
            winner_rate: self.winner_rate,
            patch: self.patch,
            step: self.step,
            tau: self.tau,
            alert_cluster_min: self.alert_cluster_min,
        }
    }

    fn occlusion(&self) -> Option<OcclusionAugment> {
        (self.occlusion_prob > 0.0).then_some(OcclusionAugment {
            side: if self.occlusion_side > 0 { self.occlusion_side } else { self.patch + self.step - 1 },
            probability: self.occlusion_prob,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            batch_size: self.batch_size,
            seed: self.seed,
            winner_rate: None,
            occlusion: None,
        }
    }

    /// Finetuning through the SIN gate at the configured winner rate.
    pub fn finetune_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.finetune_epochs,
            learning_rate: self.finetune_learning_rate,
            momentum: self.momentum,
            batch_size: self.batch_size,
            seed: self.seed.wrapping_add(1),
            winner_rate: Some(self.winner_rate),
            occlusion: self.occlusion(),
        }
    }

    fn paths(list: &str) -> Vec<PathBuf> {
        list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(PathBuf::from).collect()
    }

    fn require(value: &str, key: &str) -> Result<PathBuf> {
        if value.is_empty() {
            Err(Error::config(format!("'{key}' is required for this data source")))
        } else {
            Ok(PathBuf::from(value))
        }
    }

    /// Loads (or generates) the training and test sets.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match self.data {
            DataKind::Synthetic => {
                let spec = |seed, count| SyntheticSpec {
                    seed,
                    classes: self.classes,
                    count,
                    size: self.image_size,
                };
                (
                    spec(self.data_seed, self.train_count).generate()?,
                    spec(self.data_seed.wrapping_add(1_000_003), self.test_count).generate()?,
                )
            }
            DataKind::Idx => (
                load_idx(
                    &Self::require(&self.train_images, "train_images")?,
                    &Self::require(&self.train_labels, "train_labels")?,
                    self.classes,
                )?,
                load_idx(
                    &Self::require(&self.test_images, "test_images")?,
                    &Self::require(&self.test_labels, "test_labels")?,
                    self.classes,
                )?,
            ),
            DataKind::Cifar => {
                let load = |list: &str, key: &str| {
                    let paths = Self::paths(list);
                    if paths.is_empty() {
                        return Err(Error::config(format!("'{key}' is required for cifar data")));
                    }
                    load_cifar(&paths.iter().map(PathBuf::as_path).collect::<Vec<_>>())
                };
                (load(&self.train_batches, "train_batches")?, load(&self.test_batches, "test_batches")?)
            }
        };
        let test = if self.test_limit > 0 { test.take(self.test_limit) } else { test };
        Ok((train, test))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let cfg = RunConfig::parse("# desk run\npatch = 4\n\ntau=0.5  # looser merge\n").unwrap();
        assert_eq!(cfg.patch, 4);
        assert_eq!(cfg.tau, 0.5);
        assert_eq!(cfg.step, 3);
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        assert!(matches!(RunConfig::parse("nope = 1"), Err(Error::Config(_))));
        assert!(RunConfig::parse("patch = 2\npatch = 3").is_err());
        assert!(RunConfig::parse("patch 2").is_err());
        assert!(RunConfig::parse("patch = two").is_err());
        assert!(RunConfig::parse("winner_rate = 0").is_err());
        assert!(RunConfig::parse("tau = 1.5").is_err());
    }

    #[test]
    fn canonical_round_trip_preserves_fingerprint() {
        let cfg = RunConfig::parse("alpha = 0.01\ndata = synthetic\n").unwrap();
        let again = RunConfig::parse(&cfg.canonical()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.fingerprint(), cfg.fingerprint());
        assert_eq!(cfg.fingerprint().len(), 16);
        assert_eq!(RunConfig::keys().count(), cfg.canonical().lines().count());
    }

    #[test]
    fn fingerprint_tracks_every_value() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.set("attack_seed", "4").unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert!(a.verify_fingerprint(&b.fingerprint()).is_err());
        assert!(a.verify_fingerprint(&a.fingerprint()).is_ok());
    }

    #[test]
    fn missing_files_are_config_errors() {
        let cfg = RunConfig::parse("data = idx").unwrap();
        assert!(matches!(cfg.datasets(), Err(Error::Config(_))));
    }
}
