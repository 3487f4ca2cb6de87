//! Adapter fine-tuning: masked QA cross-entropy with analytic gradients for
//! the adapter tensors only, the Lion optimizer, batching, and the
//! collapse probes run at checkpoints.

mod degenerate;
mod lion;
mod loss;
mod probe;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use degenerate::{detect_degenerate, repetition_ratio, DegenerateReport, DegenerateThresholds};
pub use lion::{lion_step, LionParams, OptimizerState};
pub use loss::{batch_loss, encode_example, example_loss, masked_cross_entropy, qa_loss, EncodedExample, LossOutput};
pub use probe::{default_probe_prompts, probe_schedule, run_probes, ProbeGenerator, ProbeOutput, ProbePrompt, ProbeReport};
pub use trainer::{StepReport, Trainer};

/// Learning-rate shape after warmup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear decay reaching `lr / remaining` on the last step.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub max_steps: Option<usize>,
    pub max_seq_len: usize,
    pub max_target_len: usize,
    pub lion_beta1: f64,
    pub lion_beta2: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub schedule: LrSchedule,
    pub probe_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// The full-scale recipe: batch 4, Lion at 2e-5, one epoch, 512/100
    /// token caps, no warmup and no weight decay.
    fn default() -> Self {
        Self {
            batch_size: 4,
            learning_rate: 2e-5,
            epochs: 1,
            max_steps: None,
            max_seq_len: 512,
            max_target_len: 100,
            lion_beta1: 0.9,
            lion_beta2: 0.99,
            weight_decay: 0.0,
            warmup_steps: 0,
            schedule: LrSchedule::Constant,
            probe_interval: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-model settings for overfitting a small corpus in 2000 steps:
    /// Lion at 2e-3 with `β2 = 0.9` and linear decay. Everything else keeps
    /// the full-scale recipe.
    pub fn desk() -> Self {
        Self {
            learning_rate: 2e-3,
            lion_beta2: 0.9,
            schedule: LrSchedule::Linear,
            max_steps: Some(2000),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("max_seq_len", self.max_seq_len),
            ("max_target_len", self.max_target_len),
            ("probe_interval", self.probe_interval),
        ] {
            if v == 0 {
                return Err(Error::invalid(field, "must be at least 1"));
            }
        }
        if self.max_steps == Some(0) {
            return Err(Error::invalid("max_steps", "must be at least 1"));
        }
        if self.max_target_len > self.max_seq_len {
            return Err(Error::invalid("max_target_len", "exceeds max_seq_len"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate", "must be positive"));
        }
        for (field, b) in [("lion_beta1", self.lion_beta1), ("lion_beta2", self.lion_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(field, "must lie in [0, 1)"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay", "must be non-negative"));
        }
        Ok(())
    }

    /// Optimizer steps for a corpus of `n_examples`.
    pub fn total_steps(&self, n_examples: usize) -> usize {
        self.max_steps
            .unwrap_or_else(|| self.epochs * n_examples.div_ceil(self.batch_size))
    }

    /// Learning rate at 1-based `step` of a `total`-step run.
    pub fn learning_rate_at(&self, step: usize, total: usize) -> f64 {
        if step <= self.warmup_steps {
            return self.learning_rate * step as f64 / self.warmup_steps as f64;
        }
        match self.schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Linear => {
                let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
                let left = total.saturating_sub(step) as f64 + 1.0;
                self.learning_rate * (left / span).min(1.0)
            }
        }
    }

    pub fn lion(&self, step: usize, total: usize) -> LionParams {
        LionParams {
            lr: self.learning_rate_at(step, total),
            beta1: self.lion_beta1,
            beta2: self.lion_beta2,
            weight_decay: self.weight_decay,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_recipe() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_size, 4);
        assert_eq!(c.learning_rate, 2e-5);
        assert_eq!((c.epochs, c.max_seq_len, c.max_target_len), (1, 512, 100));
        assert_eq!((c.warmup_steps, c.weight_decay), (0, 0.0));
        assert_eq!((c.lion_beta1, c.lion_beta2), (0.9, 0.99));
        c.validate().unwrap();
    }

    #[test]
    fn step_accounting() {
        let mut c = TrainConfig::default();
        assert_eq!(c.total_steps(10), 3);
        c.max_steps = Some(2000);
        assert_eq!(c.total_steps(10), 2000);
        c.warmup_steps = 4;
        assert_eq!(c.learning_rate_at(1, 10), 5e-6);
        assert_eq!(c.learning_rate_at(4, 10), 2e-5);
        assert_eq!(c.learning_rate_at(9, 10), 2e-5);
        let d = TrainConfig {
            learning_rate: 1.0,
            schedule: LrSchedule::Linear,
            ..TrainConfig::default()
        };
        assert_eq!(d.learning_rate_at(1, 4), 1.0);
        assert_eq!(d.learning_rate_at(4, 4), 0.25);
    }

    #[test]
    fn desk_settings_only_change_the_optimizer_knobs() {
        let d = TrainConfig::desk();
        d.validate().unwrap();
        assert_eq!((d.learning_rate, d.lion_beta2, d.max_steps), (2e-3, 0.9, Some(2000)));
        assert_eq!(d.schedule, LrSchedule::Linear);
        let base = TrainConfig::default();
        assert_eq!((d.batch_size, d.lion_beta1, d.weight_decay), (base.batch_size, base.lion_beta1, base.weight_decay));
    }

    #[test]
    fn rejects_target_longer_than_sequence() {
        let c = TrainConfig {
            max_target_len: 600,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
