use crate::error::{Error, Result};

/// Optimisation and bag-sampling settings shared by both training stages.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Scales the epoch ratio inside the domain-weight schedule.
    pub alpha: f64,
    pub bag_size: usize,
    pub max_bags: usize,
    /// Draw fresh bag memberships every epoch instead of only reordering.
    pub resample_bags: bool,
    /// Rotation augmentation applies to slides with fewer patches than this.
    pub augment_threshold: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            momentum: 0.9,
            epochs: 10,
            alpha: 1.0,
            bag_size: 20,
            max_bags: 10,
            resample_bags: false,
            augment_threshold: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.bag_size == 0 || self.max_bags == 0 {
            return Err(Error::Config("bag_size and max_bags must be positive".into()));
        }
        Ok(())
    }
}
