use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::nn::Profile;
use crate::os_loss::OsConfig;

use super::adam::AdamHyper;

/// Everything that determines a training run. Serialized as the run's
/// `config.toml`; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub decay_base: f64,
    pub decay_every: u64,
    /// Discrete decay every `decay_every` steps; `false` decays continuously.
    pub staircase: bool,
    pub seed: u64,
    pub folds: usize,
    /// When false the penalty is never computed and the loss is plain
    /// weighted cross-entropy; `os.class_weights` still applies.
    pub os_enabled: bool,
    pub profile: Profile,
    pub os: OsConfig,
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr0: 0.003,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            decay_base: 0.7,
            decay_every: 1000,
            staircase: true,
            seed: 0,
            folds: 5,
            os_enabled: true,
            profile: Profile::FULL,
            os: OsConfig {
                k: 3,
                lambda: 0.8,
                class_weights: Vec::new(),
            },
            augment: None,
        }
    }
}

impl TrainConfig {
    /// Scaled-down settings: 64-pixel inputs, quarter widths, 20 epochs.
    pub fn desk() -> Self {
        Self {
            epochs: 20,
            profile: Profile::DESK,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs as f64),
            ("batch_size", self.batch_size as f64),
            ("lr0", self.lr0),
            ("adam_eps", self.adam_eps),
            ("decay_base", self.decay_base),
            ("decay_every", self.decay_every as f64),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("{name} must be positive, got {v}")));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be at least 2, got {}", self.folds)));
        }
        if self.profile.width_divisor == 0 || self.profile.image_side == 0 {
            return Err(Error::Config("profile extents must be positive".into()));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    /// Final-conv width passed to the model builder: `k` with the OS term,
    /// the class count without it.
    pub fn model_os_k(&self) -> Option<usize> {
        self.os_enabled.then_some(self.os.k)
    }

    /// True when the objective reduces to cross-entropy.
    pub fn is_baseline(&self) -> bool {
        !self.os_enabled || self.os.lambda == 1.0
    }

    /// Report label: `baseline` or `+OS`, with `+Aug` when augmenting.
    pub fn label(&self) -> String {
        let mut s = if self.is_baseline() { "baseline".to_string() } else { "+OS".to_string() };
        if self.augment.is_some() {
            s.push_str("+Aug");
        }
        s
    }

    pub fn class_weights(&self, num_classes: usize) -> Result<Vec<f64>> {
        if self.os.class_weights.is_empty() {
            return Ok(OsConfig::default_class_weights(num_classes));
        }
        if self.os.class_weights.len() != num_classes {
            return Err(Error::Config(format!(
                "{} class weights for {num_classes} classes",
                self.os.class_weights.len()
            )));
        }
        Ok(self.os.class_weights.clone())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }
}

/// `lr0 · base^floor(t / every)` (staircase) or `lr0 · base^(t / every)`.
pub fn lr_at_step(t: u64, cfg: &TrainConfig) -> f64 {
    let e = if cfg.staircase {
        (t / cfg.decay_every) as f64
    } else {
        t as f64 / cfg.decay_every as f64
    };
    cfg.lr0 * cfg.decay_base.powf(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn staircase_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at_step(0, &cfg), 0.003);
        assert_eq!(lr_at_step(999, &cfg), 0.003);
        assert!((lr_at_step(1000, &cfg) - 0.0021).abs() < 1e-15);
        assert!((lr_at_step(2500, &cfg) - 0.003 * 0.49).abs() < 1e-15);
        let smooth = TrainConfig {
            staircase: false,
            ..cfg
        };
        assert!(lr_at_step(500, &smooth) < 0.003);
    }

    #[test]
    fn toml_round_trip_is_fixed_point() {
        let cfg = TrainConfig {
            augment: Some(AugmentConfig::default()),
            ..TrainConfig::desk()
        };
        let text = cfg.to_toml().unwrap();
        let back = TrainConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(TrainConfig::from_toml("epochs = 3\nmystery = 1\n").is_err());
        assert!(TrainConfig::from_toml("[os]\nk = 3\nlambda = 0.5\nextra = 2\n").is_err());
    }

    #[test]
    fn labels() {
        let mut cfg = TrainConfig::default();
        assert_eq!(cfg.label(), "+OS");
        cfg.os.lambda = 1.0;
        assert_eq!(cfg.label(), "baseline");
        cfg.augment = Some(AugmentConfig::default());
        assert_eq!(cfg.label(), "baseline+Aug");
    }

    #[test]
    fn invalid_betas_rejected() {
        let cfg = TrainConfig {
            beta1: 1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
