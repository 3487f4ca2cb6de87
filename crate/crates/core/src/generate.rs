//! Autoregressive decoding over float or quantized models, plus the
//! likelihood-based comparisons used to evaluate quantization.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::adapters::Adapter;
use crate::error::{Error, Result};
use crate::model::{KvCache, ModelBundle, ModelConfig};
use crate::quant::QuantizedBundle;
use crate::sampler::{sample_token, SamplerConfig, SplitMix64};
use crate::tensor::{Tensor, softmax_slice};
use crate::tokenizer::{Utf8StreamDecoder, BOS, EOS, SEP};
use crate::train::{EncodedExample, ProbeGenerator};

/// A model ready to produce logits: weights plus whatever adapter rides
/// along at run time.
pub trait Decoder {
    fn config(&self) -> &ModelConfig;
    fn adapter(&self) -> Option<&Adapter<f32>>;
    fn forward_all(&self, tokens: &[u32], cache: Option<&mut KvCache<f32>>) -> Result<Tensor<f32>>;

    /// Positions the adapter's prefix occupies in every layer.
    fn prefix_len(&self) -> usize {
        self.adapter().and_then(Adapter::as_prefix).map_or(0, |p| p.len())
    }

    /// Room left for real tokens.
    fn context_len(&self) -> usize {
        self.config().max_seq_len - self.prefix_len()
    }
}

/// A float bundle with an optional run-time adapter.
#[derive(Debug, Clone, Copy)]
pub struct FloatDecoder<'a> {
    pub bundle: &'a ModelBundle<f32>,
    pub adapter: Option<&'a Adapter<f32>>,
}

impl<'a> FloatDecoder<'a> {
    pub fn new(bundle: &'a ModelBundle<f32>, adapter: Option<&'a Adapter<f32>>) -> Self {
        Self { bundle, adapter }
    }
}

impl Decoder for FloatDecoder<'_> {
    fn config(&self) -> &ModelConfig {
        self.bundle.config()
    }

    fn adapter(&self) -> Option<&Adapter<f32>> {
        self.adapter
    }

    fn forward_all(&self, tokens: &[u32], cache: Option<&mut KvCache<f32>>) -> Result<Tensor<f32>> {
        self.bundle.forward_all(self.adapter, tokens, cache)
    }
}

impl Decoder for QuantizedBundle {
    fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    fn adapter(&self) -> Option<&Adapter<f32>> {
        self.adapter.as_ref()
    }

    fn forward_all(&self, tokens: &[u32], cache: Option<&mut KvCache<f32>>) -> Result<Tensor<f32>> {
        self.model.forward_all(self.adapter.as_ref(), tokens, cache)
    }
}

impl<D: Decoder + ?Sized> Decoder for &D {
    fn config(&self) -> &ModelConfig {
        (**self).config()
    }

    fn adapter(&self) -> Option<&Adapter<f32>> {
        (**self).adapter()
    }

    fn forward_all(&self, tokens: &[u32], cache: Option<&mut KvCache<f32>>) -> Result<Tensor<f32>> {
        (**self).forward_all(tokens, cache)
    }
}

/// `[BOS] q₁ [SEP] a₁ [EOS] … qₙ [SEP]`: previous turns in training layout,
/// then the open question.
pub fn encode_prompt(history: &[(Vec<u32>, Vec<u32>)], question: &[u32]) -> Vec<u32> {
    let mut out = alloc::vec![BOS];
    for (q, a) in history {
        out.extend_from_slice(q);
        out.push(SEP);
        out.extend_from_slice(a);
        out.push(EOS);
    }
    out.extend_from_slice(question);
    out.push(SEP);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// A configured stop token was sampled; it is not part of the output.
    Stop,
    MaxNewTokens,
    /// The context window filled before a stop token.
    ContextFull,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub text: String,
    pub stop: StopReason,
    pub prompt_tokens: usize,
}

/// Decodes from `prompt` until a stop token, the token budget or the end of
/// the context. `on_delta` receives each non-empty piece of text as soon as
/// it forms complete UTF-8; the pieces concatenate to `Generation::text`.
pub fn generate<D: Decoder + ?Sized>(
    decoder: &D,
    prompt: &[u32],
    config: &SamplerConfig,
    rng: &mut SplitMix64,
    mut on_delta: impl FnMut(&str),
) -> Result<Generation> {
    config.validate()?;
    if prompt.is_empty() {
        return Err(Error::invalid("prompt", "empty"));
    }
    let room = decoder.context_len();
    if prompt.len() > room {
        return Err(Error::Length {
            len: prompt.len() + decoder.prefix_len(),
            max: decoder.config().max_seq_len,
        });
    }
    let tokenizer = decoder.config().tokenizer();
    let mut cache = KvCache::new(decoder.config());
    let mut stream = Utf8StreamDecoder::new();
    let mut text = String::new();
    let mut tokens = Vec::new();
    let mut emit = |piece: String, text: &mut String| {
        if !piece.is_empty() {
            on_delta(&piece);
            text.push_str(&piece);
        }
    };
    let mut logits = decoder.forward_all(prompt, Some(&mut cache))?;
    let stop = loop {
        let last = logits.row(logits.rows() - 1);
        let tok = sample_token(last, config, rng)?;
        if config.stop_tokens.contains(&tok) {
            break StopReason::Stop;
        }
        tokens.push(tok);
        if let Some(b) = tokenizer.byte(tok) {
            emit(stream.push(b), &mut text);
        }
        if tokens.len() >= config.max_new_tokens {
            break StopReason::MaxNewTokens;
        }
        if cache.len() >= room {
            break StopReason::ContextFull;
        }
        logits = decoder.forward_all(&[tok], Some(&mut cache))?;
    };
    emit(stream.finish(), &mut text);
    Ok(Generation {
        tokens,
        text,
        stop,
        prompt_tokens: prompt.len(),
    })
}

/// Greedy single-turn answers, the default for checkpoint probes.
pub struct GreedyProbe<D> {
    pub decoder: D,
    pub max_new_tokens: usize,
}

impl<D: Decoder> ProbeGenerator for GreedyProbe<D> {
    fn generate(&mut self, prompt: &str) -> Result<String> {
        let tokenizer = self.decoder.config().tokenizer();
        let mut question = tokenizer.encode(prompt);
        let room = self.decoder.context_len().saturating_sub(2);
        if question.len() > room {
            question.drain(..question.len() - room);
        }
        let input = encode_prompt(&[], &question);
        let config = SamplerConfig {
            max_new_tokens: self.max_new_tokens,
            ..SamplerConfig::greedy()
        };
        let mut rng = config.rng();
        Ok(generate(&self.decoder, &input, &config, &mut rng, |_| {})?.text)
    }
}

/// Per-token negative log-likelihood over the scored positions of each
/// example, summed, with the token count.
pub fn answer_nll<D: Decoder + ?Sized>(decoder: &D, examples: &[EncodedExample]) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut count = 0;
    for ex in examples {
        let logits = decoder.forward_all(&ex.tokens, None)?;
        for i in ex.sep..ex.tokens.len() - 1 {
            let p = softmax_slice(&logits.row(i).iter().map(|&z| z as f64).collect::<Vec<_>>())?;
            total -= num_traits::Float::ln(p[ex.tokens[i + 1] as usize]);
            count += 1;
        }
    }
    Ok((total, count))
}

/// `exp` of the mean answer-token negative log-likelihood.
pub fn perplexity<D: Decoder + ?Sized>(decoder: &D, examples: &[EncodedExample]) -> Result<f64> {
    let (nll, n) = answer_nll(decoder, examples)?;
    if n == 0 {
        return Err(Error::invalid("examples", "no scored tokens"));
    }
    Ok(num_traits::Float::exp(nll / n as f64))
}

/// Mean absolute logit difference between two decoders over every position
/// of every sequence.
pub fn logit_divergence<A: Decoder + ?Sized, B: Decoder + ?Sized>(a: &A, b: &B, sequences: &[Vec<u32>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in sequences {
        let la = a.forward_all(seq, None)?;
        let lb = b.forward_all(seq, None)?;
        for (x, y) in la.data().iter().zip(lb.data()) {
            total += (*x as f64 - *y as f64).abs();
        }
        count += la.len();
    }
    if count == 0 {
        return Err(Error::invalid("sequences", "empty"));
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{init_lora, LoraTargets};

    fn tiny() -> ModelBundle<f32> {
        ModelBundle::random(ModelConfig::tiny(2, 16, 2), 9).unwrap()
    }

    #[test]
    fn prompt_layout_matches_training() {
        let p = encode_prompt(&[(alloc::vec![10], alloc::vec![20, 21])], &[30]);
        assert_eq!(p, [BOS, 10, SEP, 20, 21, EOS, 30, SEP]);
    }

    #[test]
    fn deltas_concatenate_to_the_text() {
        let m = tiny();
        let d = FloatDecoder::new(&m, None);
        let cfg = SamplerConfig {
            temperature: 1.0,
            top_p: 1.0,
            seed: 3,
            max_new_tokens: 40,
            stop_tokens: alloc::vec![],
        };
        let mut seen = String::new();
        let g = generate(&d, &[BOS, 50, SEP], &cfg, &mut cfg.rng(), |s| seen.push_str(s)).unwrap();
        assert_eq!(seen, g.text);
        assert_eq!(g.tokens.len(), 40);
        assert_eq!(g.stop, StopReason::MaxNewTokens);
    }

    #[test]
    fn context_fills_up() {
        let m = tiny();
        let d = FloatDecoder::new(&m, None);
        let cfg = SamplerConfig {
            max_new_tokens: 500,
            stop_tokens: alloc::vec![],
            ..SamplerConfig::greedy()
        };
        let prompt: Vec<u32> = (0..60).map(|i| 10 + i).collect();
        let g = generate(&d, &prompt, &cfg, &mut cfg.rng(), |_| {}).unwrap();
        assert_eq!(g.stop, StopReason::ContextFull);
        assert_eq!(g.tokens.len(), 5);
    }

    #[test]
    fn fresh_adapter_does_not_change_perplexity() {
        let m = tiny();
        let a = Adapter::Lora(init_lora(m.config(), 2, 4.0, LoraTargets::QV, 0).unwrap());
        let ex = [crate::train::encode_example(&[40, 41], &[50, 51, 52], 64, 100).unwrap()];
        let base = perplexity(&FloatDecoder::new(&m, None), &ex).unwrap();
        let with = perplexity(&FloatDecoder::new(&m, Some(&a)), &ex).unwrap();
        assert_eq!(base, with);
        assert!(base > 1.0);
    }

    #[test]
    fn divergence_with_itself_is_zero() {
        let m = tiny();
        let d = FloatDecoder::new(&m, None);
        assert_eq!(logit_divergence(&d, &d, &[alloc::vec![1, 2, 3]]).unwrap(), 0.0);
    }
}
