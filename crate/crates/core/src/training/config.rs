use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every training hyperparameter. Read from flat JSON; missing fields take
/// their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// softmax temperature on cosine-derived logits
    pub tau: f64,
    /// fraction of feature channels treated as component-specific
    pub rho: f64,
    /// weight of the component loss
    pub alpha: f64,
    /// weight of the independence loss
    pub beta: f64,
    /// weight of the condition loss and the imagined-composition loss
    pub gamma: f64,
    /// probability that a batch takes the CutMix branch
    #[serde(alias = "p")]
    pub cutmix_prob: f64,
    /// `false` trains on the composition and component losses only
    pub enhanced: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden_dim: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.05,
            rho: 0.5,
            alpha: 0.2,
            beta: 0.1,
            gamma: 0.1,
            cutmix_prob: 0.7,
            enhanced: true,
            epochs: 200,
            batch_size: 32,
            learning_rate: 2e-3,
            hidden_dim: 64,
            channels: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn vanilla() -> Self {
        Self {
            enhanced: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        if !(0.0..=1.0).contains(&self.cutmix_prob) {
            return bad(format!("cutmix probability must lie in [0, 1], got {}", self.cutmix_prob));
        }
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("{name} must be a nonnegative number, got {w}"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.hidden_dim == 0 || self.channels == 0 {
            return bad("epochs, batch size and model widths must be positive".into());
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    /// Number of leading feature channels that enter the specific-part
    /// independence term.
    pub fn specific_channels(&self) -> usize {
        (self.rho * self.channels as f64).floor() as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
        assert_eq!(TrainConfig::default().specific_channels(), 16);
    }

    #[test]
    fn partial_json_keeps_defaults() {
        let c: TrainConfig = serde_json::from_str(r#"{"tau": 0.1, "p": 0.0}"#).unwrap();
        assert_eq!(c.tau, 0.1);
        assert_eq!(c.cutmix_prob, 0.0);
        assert_eq!(c.alpha, 0.2);
    }

    #[test]
    fn unknown_field_rejected() {
        assert!(serde_json::from_str::<TrainConfig>(r#"{"taus": 1}"#).is_err());
    }

    #[test]
    fn invalid_values() {
        for c in [
            TrainConfig { tau: 0.0, ..Default::default() },
            TrainConfig { rho: 1.5, ..Default::default() },
            TrainConfig { cutmix_prob: -0.1, ..Default::default() },
            TrainConfig { beta: -1.0, ..Default::default() },
        ] {
            assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        }
    }
}
