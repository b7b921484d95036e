//! Run configuration: dimensions, loss and optimizer hyperparameters,
//! masking ratio, seeds, and component toggles.
//!
//! The struct round-trips through a flat JSON document; the CLI overlays
//! individual fields from flags or environment variables on top of a file.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How label masking distributes the hidden entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    /// Each (image, class) pair is kept known independently with
    /// probability p.
    #[default]
    PerPair,
    /// Each image keeps a fixed round(p * C) subset of known classes.
    PerImage,
    /// A fixed round(p * N * C) subset of all pairs stays known.
    Global,
}

impl std::fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MaskStrategy::PerPair => "per_pair",
            MaskStrategy::PerImage => "per_image",
            MaskStrategy::Global => "global",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for MaskStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_pair" | "per-pair" => Ok(MaskStrategy::PerPair),
            "per_image" | "per-image" => Ok(MaskStrategy::PerImage),
            "global" => Ok(MaskStrategy::Global),
            other => Err(Error::Config(format!("unknown mask strategy '{other}'"))),
        }
    }
}

/// All knobs of a run. Serialized flat so a config file mirrors field
/// names one-to-one.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // Shapes.
    pub d_raw: usize,
    pub d_v: usize,
    pub d_t: usize,
    pub d_1: usize,
    pub d_2: usize,
    pub patches: usize,
    pub num_classes: usize,

    // Attention temperature of the semantic-guided enhancement.
    pub temperature: f64,

    // Asymmetric loss.
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub clip_c: f64,
    pub lambda1: f64,
    pub lambda2: f64,

    // Masking.
    pub known_ratio: f64,
    pub mask_strategy: MaskStrategy,

    // Optimization.
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub ema_decay: f64,
    pub eval_with_ema: bool,

    // Synthetic data.
    pub num_train: usize,
    pub num_test: usize,
    pub objects_per_image: f64,
    pub noise_sigma: f64,

    // Seeds. `seed` is the base; the optional fields override the streams
    // otherwise derived from it by tag.
    pub seed: u64,
    pub data_seed: Option<u64>,
    pub mask_seed: Option<u64>,
    pub init_seed: Option<u64>,
    pub shuffle_seed: Option<u64>,

    // Component toggles (the ablation grid flips these).
    pub region_head: bool,
    pub self_attention: bool,
    pub sgfe: bool,
    pub srfl: bool,
    pub collaborative: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            d_raw: 16,
            d_v: 32,
            d_t: 16,
            d_1: 32,
            d_2: 16,
            patches: 16,
            num_classes: 10,
            temperature: 1.0,
            gamma_pos: 0.0,
            gamma_neg: 2.0,
            clip_c: 0.05,
            lambda1: 1.0,
            lambda2: 0.8,
            known_ratio: 0.5,
            mask_strategy: MaskStrategy::PerPair,
            batch_size: 8,
            epochs: 40,
            learning_rate: 5e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            ema_decay: 0.9997,
            eval_with_ema: true,
            num_train: 2000,
            num_test: 500,
            objects_per_image: 2.9,
            noise_sigma: 0.35,
            seed: 17,
            data_seed: None,
            mask_seed: None,
            init_seed: None,
            shuffle_seed: None,
            region_head: true,
            self_attention: true,
            sgfe: true,
            srfl: true,
            collaborative: true,
        }
    }
}

/// Named presets mirroring the benchmark configurations: loss balance,
/// learning rate, batch size, and label cardinality per dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Coco,
    Voc,
    NusWide,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "coco" => Ok(Preset::Coco),
            "voc" => Ok(Preset::Voc),
            "nuswide" | "nus-wide" => Ok(Preset::NusWide),
            other => Err(Error::Config(format!("unknown preset '{other}'"))),
        }
    }
}

impl RunConfig {
    /// Applies a dataset-style preset on top of the current values.
    pub fn apply_preset(&mut self, preset: Preset) {
        self.lambda1 = 1.0;
        match preset {
            Preset::Coco => {
                self.lambda2 = 0.8;
                self.learning_rate = 5e-5;
                self.batch_size = 52;
                self.objects_per_image = 2.9;
            }
            Preset::Voc => {
                self.lambda2 = 0.1;
                self.learning_rate = 5e-5;
                self.batch_size = 64;
                self.objects_per_image = 1.5;
            }
            Preset::NusWide => {
                self.lambda2 = 2.0;
                self.learning_rate = 9e-5;
                self.batch_size = 128;
                self.objects_per_image = 2.4;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(name: &str, v: usize) -> Result<()> {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
            Ok(())
        }
        positive("d_raw", self.d_raw)?;
        positive("d_v", self.d_v)?;
        positive("d_t", self.d_t)?;
        positive("d_1", self.d_1)?;
        positive("d_2", self.d_2)?;
        positive("patches", self.patches)?;
        positive("num_classes", self.num_classes)?;
        positive("batch_size", self.batch_size)?;
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.gamma_pos < 0.0 || self.gamma_neg < 0.0 {
            return Err(Error::Config("gamma_pos and gamma_neg must be >= 0".to_string()));
        }
        if !(0.0..1.0).contains(&self.clip_c) {
            return Err(Error::Config(format!(
                "clip_c must lie in [0, 1), got {}",
                self.clip_c
            )));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("lambda1 and lambda2 must be >= 0".to_string()));
        }
        if self.lambda1 == 0.0 && self.lambda2 == 0.0 {
            return Err(Error::Config("lambda1 and lambda2 must not both be zero".to_string()));
        }
        if !(self.known_ratio > 0.0 && self.known_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "known_ratio must lie in (0, 1], got {}",
                self.known_ratio
            )));
        }
        if self.learning_rate < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "learning_rate and weight_decay must be >= 0".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("beta1 and beta2 must lie in [0, 1)".to_string()));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!(
                "ema_decay must lie in (0, 1), got {}",
                self.ema_decay
            )));
        }
        if self.objects_per_image <= 0.0 {
            return Err(Error::Config(format!(
                "objects_per_image must be positive, got {}",
                self.objects_per_image
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.collaborative && !self.region_head {
            return Err(Error::Config(
                "collaborative learning requires the region head (pseudo-labels come \
                 from refined predictions)"
                    .to_string(),
            ));
        }
        Ok(())
    }

    // Derived seed streams; explicit overrides win.
    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or_else(|| crate::rng::derive_seed(self.seed, "data"))
    }

    pub fn mask_seed(&self) -> u64 {
        self.mask_seed.unwrap_or_else(|| crate::rng::derive_seed(self.seed, "mask"))
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed.unwrap_or_else(|| crate::rng::derive_seed(self.seed, "init"))
    }

    pub fn shuffle_seed(&self) -> u64 {
        self.shuffle_seed.unwrap_or_else(|| crate::rng::derive_seed(self.seed, "shuffle"))
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad config file {}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn to_json_file(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        crate::fsio::atomic_write(path, text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn json_round_trip_preserves_every_field() {
        let mut cfg = RunConfig::default();
        cfg.known_ratio = 0.3;
        cfg.mask_strategy = MaskStrategy::Global;
        cfg.mask_seed = Some(99);
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_field_in_config_is_rejected() {
        let r: std::result::Result<RunConfig, _> = serde_json::from_str("{\"no_such_knob\": 1}");
        assert!(r.is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = RunConfig::default();
        cfg.known_ratio = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.temperature = -1.0;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.lambda1 = 0.0;
        cfg.lambda2 = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.region_head = false;
        assert!(cfg.validate().is_err());
        cfg.collaborative = false;
        cfg.validate().unwrap();
    }

    #[test]
    fn presets_set_loss_balance_and_cardinality() {
        let mut cfg = RunConfig::default();
        cfg.apply_preset(Preset::Voc);
        assert_eq!(cfg.lambda2, 0.1);
        assert_eq!(cfg.objects_per_image, 1.5);
        cfg.apply_preset(Preset::NusWide);
        assert_eq!(cfg.lambda2, 2.0);
        assert_eq!(cfg.batch_size, 128);
    }
}
