//! Seeded mini-batch loop over encoded QA pairs.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use super::lion::{lion_step, OptimizerState};
use super::loss::{encode_example, example_loss, mean_of, EncodedExample, LossOutput};
use super::TrainConfig;
use crate::adapters::Adapter;
use crate::error::{Error, Result};
use crate::model::{ModelBundle, ModelConfig};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// 1-based index of the step just applied.
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
}

/// Owns the adapter being trained, its optimizer state and the batch order.
///
/// Each epoch visits every example once in an order drawn from a
/// SplitMix64 stream seeded with `config.seed`; the final batch of an epoch
/// may be short.
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar = f32> {
    config: TrainConfig,
    examples: Vec<EncodedExample>,
    adapter: Adapter<T>,
    state: OptimizerState<T>,
    rng: SplitMix64,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
    step: usize,
}

impl<T: Scalar> Trainer<T> {
    /// Encodes `(question, answer)` token pairs for `model` and `adapter`.
    pub fn new(config: TrainConfig, model: &ModelConfig, adapter: Adapter<T>, pairs: &[(Vec<u32>, Vec<u32>)]) -> Result<Self> {
        config.validate()?;
        adapter.check_fits(model)?;
        let prefix = adapter.as_prefix().map_or(0, |p| p.len());
        let room = config.max_seq_len.min(model.max_seq_len).saturating_sub(prefix);
        let examples = pairs
            .iter()
            .map(|(q, a)| encode_example(q, a, room, config.max_target_len))
            .collect::<Result<Vec<_>>>()?;
        Self::from_examples(config, adapter, examples)
    }

    pub fn from_examples(config: TrainConfig, adapter: Adapter<T>, examples: Vec<EncodedExample>) -> Result<Self> {
        config.validate()?;
        if examples.is_empty() {
            return Err(Error::invalid("corpus", "no training examples"));
        }
        let state = OptimizerState::new(&adapter.params());
        let rng = SplitMix64::seed_from_u64(config.seed);
        Ok(Self {
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
            step: 0,
            config,
            examples,
            adapter,
            state,
            rng,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn examples(&self) -> &[EncodedExample] {
        &self.examples
    }

    pub fn adapter(&self) -> &Adapter<T> {
        &self.adapter
    }

    pub fn into_adapter(self) -> Adapter<T> {
        self.adapter
    }

    pub fn optimizer(&self) -> &OptimizerState<T> {
        &self.state
    }

    /// Steps applied so far.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.config.total_steps(self.examples.len())
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    /// Indices of the next batch, starting a freshly shuffled epoch when the
    /// current one is used up.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.order = (0..self.examples.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
            self.epoch += 1;
        }
        let end = (self.cursor + self.config.batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }

    /// Applies the mean of `parts` as one optimizer step. A non-finite loss or
    /// gradient leaves the adapter untouched.
    pub fn apply(&mut self, parts: Vec<LossOutput<T>>) -> Result<StepReport> {
        if parts.is_empty() {
            return Err(Error::invalid("batch", "empty"));
        }
        let batch_size = parts.len();
        let mean = mean_of(&self.adapter, parts);
        let step = self.step + 1;
        let finite = mean.loss.is_finite() && mean.grads.params().iter().all(|g| g.all_finite());
        if !finite {
            return Err(Error::NonFiniteLoss { step });
        }
        let hp = self.config.lion(step, self.total_steps());
        let grads = mean.grads.params();
        lion_step(&mut self.adapter.params_mut(), &grads, &mut self.state, hp)?;
        self.step = step;
        Ok(StepReport {
            step,
            epoch: self.epoch,
            loss: mean.loss.as_f64(),
            learning_rate: hp.lr,
            batch_size,
        })
    }

    /// One step with a caller-supplied gradient function, which receives the
    /// current adapter and the batch and returns one output per example in
    /// batch order.
    pub fn step_with<F>(&mut self, losses: F) -> Result<StepReport>
    where
        F: FnOnce(&Adapter<T>, &[&EncodedExample]) -> Result<Vec<LossOutput<T>>>,
    {
        let idx = self.next_batch();
        let batch: Vec<&EncodedExample> = idx.iter().map(|&i| &self.examples[i]).collect();
        let parts = losses(&self.adapter, &batch)?;
        if parts.len() != batch.len() {
            return Err(Error::invalid("batch", "one loss per example"));
        }
        self.apply(parts)
    }

    /// One step computing every example's gradient in turn.
    pub fn step(&mut self, bundle: &ModelBundle<T>) -> Result<StepReport> {
        self.step_with(|adapter, batch| batch.iter().map(|ex| example_loss(bundle, adapter, ex)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{init_lora, LoraTargets};
    use alloc::vec;

    fn setup(seed: u64) -> (ModelBundle<f32>, Trainer<f32>) {
        let cfg = ModelConfig::tiny(1, 16, 2);
        let bundle = ModelBundle::random(cfg.clone(), 7).unwrap();
        let adapter = Adapter::Lora(init_lora(&cfg, 2, 4.0, LoraTargets::QV, 1).unwrap());
        let pairs: Vec<(Vec<u32>, Vec<u32>)> = (0..6u32).map(|i| (vec![10 + i, 11], vec![20 + i, 30])).collect();
        let config = TrainConfig {
            learning_rate: 1e-2,
            max_steps: Some(12),
            batch_size: 4,
            seed,
            ..TrainConfig::default()
        };
        let t = Trainer::new(config, &cfg, adapter, &pairs).unwrap();
        (bundle, t)
    }

    #[test]
    fn epochs_visit_every_example_once() {
        let (_, mut t) = setup(3);
        let mut seen: Vec<usize> = t.next_batch();
        assert_eq!(seen.len(), 4);
        seen.extend(t.next_batch());
        seen.sort();
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn identical_seeds_give_identical_adapters() {
        let run = |seed| {
            let (bundle, mut t) = setup(seed);
            while !t.is_done() {
                t.step(&bundle).unwrap();
            }
            t.into_adapter()
        };
        assert_eq!(run(5), run(5));
    }

    #[test]
    fn non_finite_loss_leaves_adapter_untouched() {
        let (bundle, mut t) = setup(0);
        t.step(&bundle).unwrap();
        let before = t.adapter().clone();
        let err = t
            .step_with(|adapter, batch| {
                Ok(batch
                    .iter()
                    .map(|_| LossOutput {
                        loss: f32::NAN,
                        grads: adapter.zeros_like(),
                    })
                    .collect())
            })
            .unwrap_err();
        assert_eq!(err, Error::NonFiniteLoss { step: 2 });
        assert_eq!(t.adapter(), &before);
        assert_eq!(t.steps_done(), 1);
    }
}
