//! A small pre-norm decoder-only transformer.
//!
//! Blocks are `x += attn(LN(x)); x += ffn(LN(x))` with GELU feed-forward
//! layers and learned absolute position embeddings, followed by a final
//! layer norm and an untied output head. Weights are stored `[out × in]`.
//!
//! [`Transformer`] is generic over the projection type so the same forward
//! pass serves float weights ([`Linear`]) and INT4 weights
//! ([`crate::quant::QLinear`]).

mod cache;
mod forward;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::SplitMix64;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{dot, Scalar, Tensor, DEFAULT_NORM_EPS};
use crate::tokenizer::{ByteTokenizer, MIN_SPECIAL};

pub use cache::KvCache;
pub(crate) use forward::{attend, gelu, gelu_grad};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_special: usize,
    pub max_seq_len: usize,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// The default desk-scale model: 4 layers, width 64, 4 heads, FFN 256.
    pub fn desk() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            n_special: MIN_SPECIAL,
            max_seq_len: 512,
            norm_eps: DEFAULT_NORM_EPS,
        }
    }

    /// A model small enough for finite-difference checks.
    pub fn tiny(n_layers: usize, d_model: usize, n_heads: usize) -> Self {
        Self {
            n_layers,
            d_model,
            n_heads,
            d_ff: 2 * d_model,
            n_special: MIN_SPECIAL,
            max_seq_len: 64,
            norm_eps: DEFAULT_NORM_EPS,
        }
    }

    pub fn vocab_size(&self) -> usize {
        256 + self.n_special
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn tokenizer(&self) -> ByteTokenizer {
        ByteTokenizer::new(self.n_special)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::invalid(field, "must be at least 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(
                "d_model",
                format!("{} is not divisible by n_heads {}", self.d_model, self.n_heads),
            ));
        }
        if self.n_special < MIN_SPECIAL {
            return Err(Error::invalid("n_special", format!("must be at least {MIN_SPECIAL}")));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::invalid("norm_eps", "must be positive"));
        }
        Ok(())
    }

    /// Closed-form parameter count of a base model with this config.
    pub fn parameter_count(&self) -> usize {
        let (v, d, f, l) = (self.vocab_size(), self.d_model, self.d_ff, self.max_seq_len);
        let norms = 2 * d;
        let attn = 4 * (d * d + d);
        let ffn = (f * d + f) + (d * f + d);
        let block = 2 * norms + attn + ffn;
        v * d + l * d + self.n_layers * block + norms + v * d
    }

    /// `key=value` lines, one per field, in a fixed order.
    pub fn to_text(&self) -> String {
        format!(
            "n_layers={}\nd_model={}\nn_heads={}\nd_ff={}\nn_special={}\nmax_seq_len={}\nnorm_eps={:e}\n",
            self.n_layers, self.d_model, self.n_heads, self.d_ff, self.n_special, self.max_seq_len, self.norm_eps
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut fields = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid("config", format!("line without '=': {line}")))?;
            fields.insert(k.trim(), v.trim());
        }
        fn take<F: core::str::FromStr>(fields: &BTreeMap<&str, &str>, key: &'static str) -> Result<F> {
            fields
                .get(key)
                .ok_or_else(|| Error::invalid(key, "missing from config block"))?
                .parse()
                .map_err(|_| Error::invalid(key, "not a number"))
        }
        let config = Self {
            n_layers: take(&fields, "n_layers")?,
            d_model: take(&fields, "d_model")?,
            n_heads: take(&fields, "n_heads")?,
            d_ff: take(&fields, "d_ff")?,
            n_special: take(&fields, "n_special")?,
            max_seq_len: take(&fields, "max_seq_len")?,
            norm_eps: take(&fields, "norm_eps")?,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Something that maps rows of width `d_in` to rows of width `d_out`.
pub trait Project<T: Scalar> {
    fn d_in(&self) -> usize;
    fn d_out(&self) -> usize;
    /// Writes `rows × d_out` outputs into `out`, overwriting it.
    fn project(&self, x: &[T], rows: usize, out: &mut [T]);
}

/// Dense affine projection, weight stored `[d_out × d_in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Project<T> for Linear<T> {
    fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }

    fn project(&self, x: &[T], rows: usize, out: &mut [T]) {
        let (d_in, d_out) = (self.d_in(), self.d_out());
        let w = self.weight.data();
        let b = self.bias.data();
        for r in 0..rows {
            let xr = &x[r * d_in..(r + 1) * d_in];
            let or = &mut out[r * d_out..(r + 1) * d_out];
            for o in 0..d_out {
                or[o] = dot(xr, &w[o * d_in..(o + 1) * d_in]) + b[o];
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T: Scalar = f32> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Names of the six per-layer projections, in storage order.
pub const PROJECTIONS: [&str; 6] = ["attn.q", "attn.k", "attn.v", "attn.o", "ffn.in", "ffn.out"];

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T: Scalar, P> {
    pub attn_norm: Norm<T>,
    pub q: P,
    pub k: P,
    pub v: P,
    pub o: P,
    pub ffn_norm: Norm<T>,
    pub ff_in: P,
    pub ff_out: P,
}

impl<T: Scalar, P> Block<T, P> {
    pub fn projections(&self) -> [(&'static str, &P); 6] {
        [
            (PROJECTIONS[0], &self.q),
            (PROJECTIONS[1], &self.k),
            (PROJECTIONS[2], &self.v),
            (PROJECTIONS[3], &self.o),
            (PROJECTIONS[4], &self.ff_in),
            (PROJECTIONS[5], &self.ff_out),
        ]
    }

    pub(crate) fn map_projections<Q>(self, mut f: impl FnMut(&'static str, P) -> Result<Q>) -> Result<Block<T, Q>> {
        Ok(Block {
            attn_norm: self.attn_norm,
            q: f(PROJECTIONS[0], self.q)?,
            k: f(PROJECTIONS[1], self.k)?,
            v: f(PROJECTIONS[2], self.v)?,
            o: f(PROJECTIONS[3], self.o)?,
            ffn_norm: self.ffn_norm,
            ff_in: f(PROJECTIONS[4], self.ff_in)?,
            ff_out: f(PROJECTIONS[5], self.ff_out)?,
        })
    }
}

/// Decoder weights. Immutable once built: transformations such as merging
/// an adapter or quantizing produce a new value.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer<T: Scalar, P> {
    pub(crate) config: ModelConfig,
    pub(crate) embed: Tensor<T>,
    pub(crate) pos_embed: Tensor<T>,
    pub(crate) blocks: Vec<Block<T, P>>,
    pub(crate) final_norm: Norm<T>,
    pub(crate) lm_head: Tensor<T>,
}

/// Float model: configuration, canonical weights and (implicitly) the byte
/// tokenizer determined by `config.n_special`.
pub type ModelBundle<T = f32> = Transformer<T, Linear<T>>;

impl<T: Scalar, P> Transformer<T, P> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> ByteTokenizer {
        self.config.tokenizer()
    }

    pub fn blocks(&self) -> &[Block<T, P>] {
        &self.blocks
    }

    pub(crate) fn map_blocks<Q>(self, mut f: impl FnMut(usize, Block<T, P>) -> Result<Block<T, Q>>) -> Result<Transformer<T, Q>> {
        let blocks = self
            .blocks
            .into_iter()
            .enumerate()
            .map(|(i, b)| f(i, b))
            .collect::<Result<Vec<_>>>()?;
        Ok(Transformer {
            config: self.config,
            embed: self.embed,
            pos_embed: self.pos_embed,
            blocks,
            final_norm: self.final_norm,
            lm_head: self.lm_head,
        })
    }

    /// Float tensors that are never quantized: embeddings, norms, output head.
    pub fn unquantized_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("embed.weight".to_string(), &self.embed),
            ("pos_embed.weight".to_string(), &self.pos_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm.weight"), &b.attn_norm.gain));
            out.push((format!("layers.{i}.attn_norm.bias"), &b.attn_norm.bias));
            out.push((format!("layers.{i}.ffn_norm.weight"), &b.ffn_norm.gain));
            out.push((format!("layers.{i}.ffn_norm.bias"), &b.ffn_norm.bias));
        }
        out.push(("final_norm.weight".to_string(), &self.final_norm.gain));
        out.push(("final_norm.bias".to_string(), &self.final_norm.bias));
        out.push(("lm_head.weight".to_string(), &self.lm_head));
        out
    }
}

/// Expected shape of every canonical tensor, in canonical order.
pub fn canonical_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (v, d, f) = (config.vocab_size(), config.d_model, config.d_ff);
    let mut out = vec![
        ("embed.weight".to_string(), vec![v, d]),
        ("pos_embed.weight".to_string(), vec![config.max_seq_len, d]),
    ];
    for i in 0..config.n_layers {
        let p = |s: &str| format!("layers.{i}.{s}");
        out.push((p("attn_norm.weight"), vec![d]));
        out.push((p("attn_norm.bias"), vec![d]));
        for name in ["attn.q", "attn.k", "attn.v", "attn.o"] {
            out.push((p(&format!("{name}.weight")), vec![d, d]));
            out.push((p(&format!("{name}.bias")), vec![d]));
        }
        out.push((p("ffn_norm.weight"), vec![d]));
        out.push((p("ffn_norm.bias"), vec![d]));
        out.push((p("ffn.in.weight"), vec![f, d]));
        out.push((p("ffn.in.bias"), vec![f]));
        out.push((p("ffn.out.weight"), vec![d, f]));
        out.push((p("ffn.out.bias"), vec![d]));
    }
    out.push(("final_norm.weight".to_string(), vec![d]));
    out.push(("final_norm.bias".to_string(), vec![d]));
    out.push(("lm_head.weight".to_string(), vec![v, d]));
    out
}

/// Standard deviations used by [`ModelBundle::random`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitScale {
    pub embed: f64,
    pub position: f64,
    /// Multiplies `1/sqrt(d_in)` for every projection.
    pub projection: f64,
    pub lm_head: f64,
}

impl Default for InitScale {
    fn default() -> Self {
        Self {
            embed: 1.0,
            position: 1.0,
            projection: 1.0,
            lm_head: 0.5,
        }
    }
}

pub(crate) fn gaussian<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("finite positive std");
    Tensor::from_fn(shape, |_| T::from_f64(normal.sample(rng)))
}

impl<T: Scalar> ModelBundle<T> {
    /// Seeded random weights; norms start at gain 1, bias 0.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::random_with(config, InitScale::default(), seed)
    }

    pub fn random_with(config: ModelConfig, scale: InitScale, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        config.validate()?;
        let mut rng = SplitMix64::seed_from_u64(seed);
        let (v, d, f) = (config.vocab_size(), config.d_model, config.d_ff);
        let norm = |w: usize| Norm {
            gain: Tensor::filled(&[w], T::one()),
            bias: Tensor::zeros(&[w]),
        };
        let linear = |rng: &mut SplitMix64, d_out: usize, d_in: usize| Linear {
            weight: gaussian(&[d_out, d_in], scale.projection / num_traits::Float::sqrt(d_in as f64), rng),
            bias: gaussian(&[d_out], 0.02, rng),
        };
        let embed = gaussian(&[v, d], scale.embed, &mut rng);
        let pos_embed = gaussian(&[config.max_seq_len, d], scale.position, &mut rng);
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            blocks.push(Block {
                attn_norm: norm(d),
                q: linear(&mut rng, d, d),
                k: linear(&mut rng, d, d),
                v: linear(&mut rng, d, d),
                o: linear(&mut rng, d, d),
                ffn_norm: norm(d),
                ff_in: linear(&mut rng, f, d),
                ff_out: linear(&mut rng, d, f),
            });
        }
        let lm_head = gaussian(&[v, d], scale.lm_head, &mut rng);
        Ok(Self {
            config,
            embed,
            pos_embed,
            blocks,
            final_norm: norm(d),
            lm_head,
        })
    }

    /// Every weight set to `value` (used for symmetry checks).
    pub fn constant(config: ModelConfig, value: T) -> Result<Self> {
        config.validate()?;
        let named = canonical_shapes(&config)
            .into_iter()
            .map(|(n, s)| (n, Tensor::filled(&s, value)))
            .collect();
        Self::from_named(config, named)
    }

    /// Canonical `(name, tensor)` pairs in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("embed.weight".to_string(), &self.embed),
            ("pos_embed.weight".to_string(), &self.pos_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm.weight"), &b.attn_norm.gain));
            out.push((format!("layers.{i}.attn_norm.bias"), &b.attn_norm.bias));
            for (name, lin) in b.projections().into_iter().take(4) {
                out.push((format!("layers.{i}.{name}.weight"), &lin.weight));
                out.push((format!("layers.{i}.{name}.bias"), &lin.bias));
            }
            out.push((format!("layers.{i}.ffn_norm.weight"), &b.ffn_norm.gain));
            out.push((format!("layers.{i}.ffn_norm.bias"), &b.ffn_norm.bias));
            for (name, lin) in b.projections().into_iter().skip(4) {
                out.push((format!("layers.{i}.{name}.weight"), &lin.weight));
                out.push((format!("layers.{i}.{name}.bias"), &lin.bias));
            }
        }
        out.push(("final_norm.weight".to_string(), &self.final_norm.gain));
        out.push(("final_norm.bias".to_string(), &self.final_norm.bias));
        out.push(("lm_head.weight".to_string(), &self.lm_head));
        out
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.named_tensors().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Builds a bundle from named tensors, checking presence and shape of
    /// every canonical name. Extra names are rejected.
    pub fn from_named(config: ModelConfig, mut named: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        for (name, shape) in canonical_shapes(&config) {
            match named.get(&name) {
                None => return Err(Error::MissingTensor(name)),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::ShapeMismatch {
                        name,
                        expected: shape,
                        found: t.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        if named.len() != canonical_shapes(&config).len() {
            let known: Vec<String> = canonical_shapes(&config).into_iter().map(|(n, _)| n).collect();
            let extra = named.keys().find(|k| !known.contains(k)).cloned().unwrap_or_default();
            return Err(Error::invalid("tensors", format!("unexpected tensor {extra}")));
        }
        let mut take = |name: String| named.remove(&name).expect("presence checked above");
        let norm = |take: &mut dyn FnMut(String) -> Tensor<T>, prefix: &str| Norm {
            gain: take(format!("{prefix}.weight")),
            bias: take(format!("{prefix}.bias")),
        };
        let lin = |take: &mut dyn FnMut(String) -> Tensor<T>, prefix: String| Linear {
            weight: take(format!("{prefix}.weight")),
            bias: take(format!("{prefix}.bias")),
        };
        let embed = take("embed.weight".into());
        let pos_embed = take("pos_embed.weight".into());
        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            blocks.push(Block {
                attn_norm: norm(&mut take, &format!("layers.{i}.attn_norm")),
                q: lin(&mut take, format!("layers.{i}.attn.q")),
                k: lin(&mut take, format!("layers.{i}.attn.k")),
                v: lin(&mut take, format!("layers.{i}.attn.v")),
                o: lin(&mut take, format!("layers.{i}.attn.o")),
                ffn_norm: norm(&mut take, &format!("layers.{i}.ffn_norm")),
                ff_in: lin(&mut take, format!("layers.{i}.ffn.in")),
                ff_out: lin(&mut take, format!("layers.{i}.ffn.out")),
            });
        }
        let final_norm = norm(&mut take, "final_norm");
        let lm_head = take("lm_head.weight".into());
        Ok(Self {
            config,
            embed,
            pos_embed,
            blocks,
            final_norm,
            lm_head,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over every canonical tensor's name and little-endian bytes.
    pub fn weight_digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for (name, t) in self.named_tensors() {
            hasher.update(name.as_bytes());
            buf.clear();
            for &v in t.data() {
                v.extend_le_bytes(&mut buf);
            }
            hasher.update(&buf);
        }
        hasher.finalize().into()
    }

    pub fn cast<U: Scalar>(&self) -> ModelBundle<U> {
        let named = self.named_tensors().into_iter().map(|(n, t)| (n, t.cast::<U>())).collect();
        ModelBundle::from_named(self.config.clone(), named).expect("same config and shapes")
    }

    pub(crate) fn block_mut(&mut self, i: usize) -> &mut Block<T, Linear<T>> {
        &mut self.blocks[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_defaults() {
        let c = ModelConfig::desk();
        assert_eq!((c.n_layers, c.d_model, c.n_heads, c.d_ff, c.max_seq_len), (4, 64, 4, 256, 512));
        assert_eq!(c.vocab_size(), 260);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut c = ModelConfig::tiny(1, 16, 4);
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Invalid { field: "d_model", .. })));
    }

    #[test]
    fn parameter_count_matches_manual_count() {
        // 2 layers, d=8, ff=16, V=260, L=64:
        // embed 2080 + pos 512 + per block (32 norms + 288 attn + 280 ffn) * 2 + final 16 + head 2080
        let c = ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            n_special: 4,
            max_seq_len: 64,
            norm_eps: 1e-5,
        };
        let manual = 2080 + 512 + 2 * (32 + 288 + 280) + 16 + 2080;
        assert_eq!(c.parameter_count(), manual);
        let m = ModelBundle::<f32>::random(c.clone(), 1).unwrap();
        assert_eq!(m.parameter_count(), manual);
        let desk = ModelBundle::<f32>::random(ModelConfig::desk(), 1).unwrap();
        assert_eq!(desk.parameter_count(), ModelConfig::desk().parameter_count());
    }

    #[test]
    fn config_text_round_trip() {
        let c = ModelConfig::desk();
        assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
        assert!(ModelConfig::from_text("n_layers=4\n").is_err());
    }

    #[test]
    fn from_named_reports_missing_and_misshapen_tensors() {
        let c = ModelConfig::tiny(1, 16, 2);
        let m = ModelBundle::<f32>::random(c.clone(), 3).unwrap();
        let mut named: BTreeMap<String, Tensor<f32>> =
            m.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        named.insert("layers.0.attn.q.weight".into(), Tensor::zeros(&[16, 17]));
        match ModelBundle::from_named(c.clone(), named.clone()) {
            Err(Error::ShapeMismatch { name, expected, found }) => {
                assert_eq!(name, "layers.0.attn.q.weight");
                assert_eq!(expected, vec![16, 16]);
                assert_eq!(found, vec![16, 17]);
            }
            other => panic!("unexpected {other:?}"),
        }
        named.remove("lm_head.weight");
        named.insert("layers.0.attn.q.weight".into(), Tensor::zeros(&[16, 16]));
        assert_eq!(
            ModelBundle::from_named(c, named).unwrap_err(),
            Error::MissingTensor("lm_head.weight".into())
        );
    }

    #[test]
    fn digest_tracks_weights() {
        let c = ModelConfig::tiny(1, 8, 2);
        let a = ModelBundle::<f32>::random(c.clone(), 5).unwrap();
        let b = ModelBundle::<f32>::random(c, 6).unwrap();
        assert_eq!(a.weight_digest(), a.clone().weight_digest());
        assert_ne!(a.weight_digest(), b.weight_digest());
    }
}
