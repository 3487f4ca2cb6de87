//! Temperature scaling, nucleus (top-p) filtering and seeded categorical
//! sampling.
//!
//! Randomness comes only from a caller-owned [`SplitMix64`] generator: one
//! 64-bit state word advanced by the golden-ratio increment and finalized
//! with the SplitMix64 mixer. Each draw consumes one `u64`, converted to a
//! uniform `f64` in `[0, 1)` from its top 53 bits. Identical seeds give
//! identical token streams on every platform.

use alloc::vec::Vec;

use rand::Rng;
pub use rand::SeedableRng;
pub use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Scalar;
use crate::tokenizer::EOS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Zero selects greedy decoding.
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
    pub max_new_tokens: usize,
    pub stop_tokens: Vec<u32>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 0.95,
            top_p: 0.7,
            seed: 0,
            max_new_tokens: 128,
            stop_tokens: alloc::vec![EOS],
        }
    }
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        Self {
            temperature: 0.0,
            top_p: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(Error::invalid("temperature", "must be a finite value >= 0"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::invalid("top_p", "must lie in (0, 1]"));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::invalid("max_new_tokens", "must be at least 1"));
        }
        Ok(())
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature == 0.0
    }

    pub fn rng(&self) -> SplitMix64 {
        SplitMix64::seed_from_u64(self.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tempered {
    pub logits: Vec<f64>,
    /// Set for `T = 0`; the logits are then passed through unscaled.
    pub greedy: bool,
}

pub fn apply_temperature<T: Scalar>(logits: &[T], temperature: f64) -> Result<Tempered> {
    if !(temperature >= 0.0) {
        return Err(Error::invalid("temperature", "must be >= 0"));
    }
    let greedy = temperature == 0.0;
    let logits = logits
        .iter()
        .map(|&z| if greedy { z.as_f64() } else { z.as_f64() / temperature })
        .collect();
    Ok(Tempered { logits, greedy })
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<T: Scalar>(values: &[T]) -> u32 {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best as u32
}

/// Kept tokens in descending probability order, with renormalized mass.
#[derive(Debug, Clone, PartialEq)]
pub struct Nucleus {
    pub ids: Vec<u32>,
    pub probs: Vec<f64>,
}

impl Nucleus {
    /// The filtered distribution at full vocabulary width.
    pub fn dense(&self, vocab: usize) -> Vec<f64> {
        let mut out = alloc::vec![0.0; vocab];
        for (&id, &p) in self.ids.iter().zip(&self.probs) {
            out[id as usize] = p;
        }
        out
    }
}

/// Smallest descending-probability prefix whose cumulative mass reaches `p`.
///
/// Ties are ordered by ascending id, the token that crosses `p` is kept, and
/// if rounding keeps the total below `p` everything is kept.
pub fn top_p_filter(probs: &[f64], p: f64) -> Nucleus {
    let mut order: Vec<u32> = (0..probs.len() as u32).collect();
    order.sort_by(|&a, &b| probs[b as usize].total_cmp(&probs[a as usize]).then(a.cmp(&b)));
    let keep = if p >= 1.0 {
        order.len()
    } else {
        let mut cum = 0.0;
        order
            .iter()
            .position(|&id| {
                cum += probs[id as usize];
                cum >= p
            })
            .map_or(order.len(), |i| i + 1)
    };
    order.truncate(keep);
    let mass: f64 = order.iter().map(|&id| probs[id as usize]).sum();
    let probs = order.iter().map(|&id| probs[id as usize] / mass).collect();
    Nucleus { ids: order, probs }
}

/// Temperature, then top-p, then one categorical draw. `T = 0` returns the
/// argmax without touching the generator.
pub fn sample_token<T: Scalar>(logits: &[T], config: &SamplerConfig, rng: &mut SplitMix64) -> Result<u32> {
    let tempered = apply_temperature(logits, config.temperature)?;
    if tempered.greedy {
        return Ok(argmax(&tempered.logits));
    }
    let probs = crate::tensor::softmax_slice(&tempered.logits)?;
    let nucleus = top_p_filter(&probs, config.top_p);
    Ok(draw(&nucleus, rng))
}

/// Inverse-CDF draw over the kept tokens in their stored order.
pub fn draw(nucleus: &Nucleus, rng: &mut SplitMix64) -> u32 {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (&id, &p) in nucleus.ids.iter().zip(&nucleus.probs) {
        cum += p;
        if u < cum {
            return id;
        }
    }
    *nucleus.ids.last().expect("nucleus is never empty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax_slice;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn unit_temperature_is_identity() {
        let t = apply_temperature(&[0.5f64, -1.0, 2.0], 1.0).unwrap();
        assert_eq!(t.logits, [0.5, -1.0, 2.0]);
        assert!(!t.greedy);
    }

    #[test]
    fn half_temperature_squares_the_odds() {
        let p = softmax_slice(&apply_temperature(&[0.0f64, core::f64::consts::LN_2], 0.5).unwrap().logits).unwrap();
        assert!((p[0] - 0.2).abs() < 1e-12 && (p[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn negative_temperature_is_rejected() {
        assert!(apply_temperature(&[1.0f32], -0.1).is_err());
        let bad = SamplerConfig {
            top_p: 1.5,
            ..SamplerConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Invalid { field: "top_p", .. })));
    }

    #[test]
    fn nucleus_examples() {
        let n = top_p_filter(&[0.5, 0.3, 0.2], 0.7);
        assert_eq!(n.ids, [0, 1]);
        assert!((n.probs[0] - 0.625).abs() < 1e-12 && (n.probs[1] - 0.375).abs() < 1e-12);
        let full = top_p_filter(&[0.5, 0.3, 0.2], 1.0);
        assert_eq!(full.ids, [0, 1, 2]);
        assert_eq!(full.dense(3), [0.5, 0.3, 0.2]);
        assert_eq!(top_p_filter(&[0.2, 0.5, 0.3], 0.5).ids, [1]);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        assert_eq!(top_p_filter(&[0.25; 4], 0.5).ids, [0, 1]);
    }

    #[test]
    fn greedy_ignores_top_p_and_rng() {
        let cfg = SamplerConfig {
            temperature: 0.0,
            top_p: 0.1,
            ..SamplerConfig::default()
        };
        let mut rng = cfg.rng();
        let before = rng.clone();
        assert_eq!(sample_token(&[1.0f32, 3.0, 3.0, -2.0], &cfg, &mut rng).unwrap(), 1);
        assert_eq!(rng, before);
    }

    #[test]
    fn fixed_seed_repeats_the_stream() {
        let cfg = SamplerConfig {
            top_p: 0.9,
            temperature: 1.0,
            seed: 42,
            ..SamplerConfig::default()
        };
        let logits = vec![0.1f32, 0.4, -0.3, 0.0, 0.2];
        let run = || {
            let mut rng = cfg.rng();
            (0..64).map(|_| sample_token(&logits, &cfg, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #[test]
        fn temperature_keeps_the_argmax(logits in proptest::collection::vec(-10.0f64..10.0, 2..50), t in 0.01f64..5.0) {
            let scaled = apply_temperature(&logits, t).unwrap().logits;
            prop_assert_eq!(argmax(&scaled), argmax(&logits));
        }

        #[test]
        fn samples_stay_in_the_support(logits in proptest::collection::vec(-5.0f64..5.0, 2..40), p in 0.05f64..1.0, seed: u64) {
            let cfg = SamplerConfig { temperature: 0.8, top_p: p, seed, ..SamplerConfig::default() };
            let probs = softmax_slice(&apply_temperature(&logits, 0.8).unwrap().logits).unwrap();
            let nucleus = top_p_filter(&probs, p);
            let total: f64 = nucleus.probs.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-6);
            let mut rng = cfg.rng();
            for _ in 0..20 {
                let tok = sample_token(&logits, &cfg, &mut rng).unwrap();
                prop_assert!(nucleus.ids.contains(&tok));
            }
        }
    }
}
