//! Experiment configuration: one JSON document with sections
//! `{data, model, training, dp, attack, federation, quantize, eval}`.
//! The `PSR_SEED` environment variable overrides the config seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};

use crate::attack::{AttackConfig, AttackMethod, DEFAULT_EPS, DEFAULT_STEP};
use crate::error::{Error, Result};
use crate::fed::TrainingMode;

/// Accepts a JSON number or a rational string such as `"8/255"`.
fn de_ratio<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f32, D::Error> {
    struct V;
    impl serde::de::Visitor<'_> for V {
        type Value = f32;

        fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
            f.write_str("a number or a fraction string like \"8/255\"")
        }

        fn visit_f64<E: serde::de::Error>(self, v: f64) -> std::result::Result<f32, E> {
            Ok(v as f32)
        }

        fn visit_u64<E: serde::de::Error>(self, v: u64) -> std::result::Result<f32, E> {
            Ok(v as f32)
        }

        fn visit_i64<E: serde::de::Error>(self, v: i64) -> std::result::Result<f32, E> {
            Ok(v as f32)
        }

        fn visit_str<E: serde::de::Error>(self, s: &str) -> std::result::Result<f32, E> {
            parse_ratio(s).map_err(|e| E::custom(e.to_string()))
        }
    }
    d.deserialize_any(V)
}

/// `"8/255"` or a plain decimal.
pub fn parse_ratio(s: &str) -> Result<f32> {
    if let Some((num, den)) = s.split_once('/') {
        let n: f32 = num
            .trim()
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad ratio numerator in {s}")))?;
        let d: f32 = den
            .trim()
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad ratio denominator in {s}")))?;
        if d == 0.0 {
            return Err(Error::InvalidConfig(format!("zero denominator in {s}")));
        }
        Ok(n / d)
    } else {
        s.trim().parse().map_err(|_| Error::InvalidConfig(format!("bad number {s}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub n_classes: usize,
    pub n_per_class: usize,
    pub image_size: usize,
    pub noise_level: f32,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            n_classes: 4,
            n_per_class: 150,
            image_size: 10,
            noise_level: 0.25,
            idx_images: None,
            idx_labels: None,
            train_fraction: 0.7,
            val_fraction: 0.15,
            test_fraction: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: String,
    /// Stage widths; empty means the architecture's defaults.
    pub widths: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { architecture: "micro-resnet-9".into(), widths: vec![] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    /// Epoch count for centralized `train` runs.
    pub epochs: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { lr: 0.05, momentum: 0.9, batch_size: 32, epochs: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpConfig {
    pub clip_norm: f32,
    pub delta: f64,
    /// Exactly one of `target_epsilon` (sigma is calibrated) and `sigma`.
    pub target_epsilon: Option<f64>,
    pub sigma: Option<f64>,
    /// Poisson sampling rate; defaults to batch_size / shard size.
    pub sampling_rate: Option<f64>,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            clip_norm: 1.0,
            delta: 1e-4,
            target_epsilon: Some(3.4),
            sigma: None,
            sampling_rate: None,
        }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        match (self.target_epsilon, self.sigma) {
            (Some(_), Some(_)) => Err(Error::InvalidConfig(
                "dp.target_epsilon and dp.sigma are mutually exclusive".into(),
            )),
            (None, None) => Err(Error::InvalidConfig(
                "dp requires either target_epsilon or sigma".into(),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSettings {
    pub method: AttackMethod,
    #[serde(deserialize_with = "de_ratio")]
    pub eps: f32,
    #[serde(deserialize_with = "de_ratio")]
    pub step_size: f32,
    pub steps: usize,
    /// Defaults to 1 (3 for fab) when absent.
    pub restarts: Option<usize>,
    pub random_start: bool,
}

impl Default for AttackSettings {
    fn default() -> Self {
        Self {
            method: AttackMethod::Pgd,
            eps: DEFAULT_EPS,
            step_size: DEFAULT_STEP,
            steps: 10,
            restarts: None,
            random_start: true,
        }
    }
}

impl AttackSettings {
    pub fn to_config(&self, method: AttackMethod, seed: u64) -> AttackConfig {
        let defaults = AttackConfig::new(method);
        AttackConfig {
            method,
            eps: self.eps,
            step_size: self.step_size,
            n_steps: self.steps,
            n_restarts: self.restarts.unwrap_or(defaults.n_restarts),
            random_start: self.random_start,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationSection {
    pub n_clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub adversary_id: Option<usize>,
    pub poison_fraction: f64,
    pub mode: TrainingMode,
    pub adv_train_fraction: f64,
    pub regenerate_poison_per_round: bool,
}

impl Default for FederationSection {
    fn default() -> Self {
        Self {
            n_clients: 2,
            rounds: 20,
            local_epochs: 1,
            adversary_id: None,
            poison_fraction: 0.0,
            mode: TrainingMode::Standard,
            adv_train_fraction: 0.2,
            regenerate_poison_per_round: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizeConfig {
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub repeats: usize,
    /// Attacks to evaluate; absent means the crafting section's method, an
    /// explicit empty list means clean accuracy only.
    pub attacks: Option<Vec<AttackMethod>>,
    pub whitebox: bool,
    pub transfer: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { repeats: 10, attacks: None, whitebox: true, transfer: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub dp: Option<DpConfig>,
    pub attack: AttackSettings,
    pub federation: FederationSection,
    pub quantize: QuantizeConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment_id: "experiment".into(),
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            dp: None,
            attack: AttackSettings::default(),
            federation: FederationSection::default(),
            quantize: QuantizeConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(dp) = &self.dp {
            dp.validate()?;
        }
        if self.federation.mode.uses_dp() && self.dp.is_none() {
            return Err(Error::InvalidConfig("federation mode needs a dp section".into()));
        }
        if self.eval.repeats == 0 {
            return Err(Error::InvalidConfig("eval.repeats must be at least 1".into()));
        }
        let split_sum =
            self.data.train_fraction + self.data.val_fraction + self.data.test_fraction;
        if (split_sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidConfig(format!("split fractions sum to {split_sum}")));
        }
        if self.quantize.enabled && self.data.val_fraction == 0.0 {
            return Err(Error::InvalidConfig(
                "quantization calibration needs a non-empty validation split".into(),
            ));
        }
        if self.data.source == DataSource::Idx
            && (self.data.idx_images.is_none() || self.data.idx_labels.is_none())
        {
            return Err(Error::InvalidConfig("idx source needs idx_images and idx_labels".into()));
        }
        Ok(())
    }

    /// Parses a config file, applying the `PSR_SEED` override.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        if let Ok(s) = std::env::var("PSR_SEED") {
            cfg.seed = s
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("PSR_SEED value {s} is not a u64")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Attacks the eval stage should run.
    pub fn eval_attacks(&self) -> Vec<AttackMethod> {
        match &self.eval.attacks {
            Some(list) => list.clone(),
            None => vec![self.attack.method],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn ratio_fields_accept_fractions_and_numbers() {
        let json = r#"{"attack": {"eps": "8/255", "step_size": 0.01}}"#;
        let cfg: ExperimentConfig = serde_json::from_str(json).unwrap();
        assert!((cfg.attack.eps - 8.0 / 255.0).abs() < 1e-7);
        assert!((cfg.attack.step_size - 0.01).abs() < 1e-7);
    }

    #[test]
    fn dp_exclusivity_is_enforced() {
        let mut cfg = ExperimentConfig::default();
        cfg.dp = Some(DpConfig { target_epsilon: Some(1.7), sigma: Some(1.0), ..Default::default() });
        assert!(cfg.validate().is_err());
        cfg.dp = Some(DpConfig { target_epsilon: None, sigma: None, ..Default::default() });
        assert!(cfg.validate().is_err());
        cfg.dp = Some(DpConfig { target_epsilon: None, sigma: Some(1.2), ..Default::default() });
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let json = r#"{"nonsense": 1}"#;
        assert!(serde_json::from_str::<ExperimentConfig>(json).is_err());
    }

    #[test]
    fn psr_seed_overrides_config_seed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"seed": 7}"#).unwrap();
        std::env::set_var("PSR_SEED", "99");
        let cfg = ExperimentConfig::load(&path).unwrap();
        std::env::remove_var("PSR_SEED");
        assert_eq!(cfg.seed, 99);
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 7);
    }
}
