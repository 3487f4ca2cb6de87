//! LoRA and prefix (P-Tuning v2 style) adapters.
//!
//! A LoRA adapter adds `scale · B·A` to the query and/or value projection of
//! every layer, with `scale = alpha / rank`. A prefix adapter prepends `p`
//! trainable key and value rows to every layer's attention. Neither touches
//! the base weights; [`merge_lora`] produces a new bundle instead.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

use crate::error::{Error, Result};
use crate::model::{gaussian, ModelBundle, ModelConfig};
use crate::tensor::{axpy, dot, matmul, Scalar, Tensor};

/// Standard deviation of the Gaussian used for fresh `A` matrices.
pub const LORA_INIT_STD: f64 = 0.02;
pub const DEFAULT_RANK: usize = 8;
pub const DEFAULT_ALPHA: f64 = 16.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoraTargets {
    pub q: bool,
    pub v: bool,
}

impl LoraTargets {
    pub const Q: Self = Self { q: true, v: false };
    pub const V: Self = Self { q: false, v: true };
    pub const QV: Self = Self { q: true, v: true };

    /// Parses a comma separated subset of `q,v`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut t = Self { q: false, v: false };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "q" => t.q = true,
                "v" => t.v = true,
                "qv" => (t.q, t.v) = (true, true),
                other => return Err(Error::invalid("targets", format!("unknown projection {other}"))),
            }
        }
        if !t.q && !t.v {
            return Err(Error::invalid("targets", "at least one of q, v"));
        }
        Ok(t)
    }

    pub fn count(self) -> usize {
        self.q as usize + self.v as usize
    }

    pub fn to_text(self) -> String {
        match (self.q, self.v) {
            (true, true) => "q,v".into(),
            (true, false) => "q".into(),
            (false, true) => "v".into(),
            (false, false) => String::new(),
        }
    }
}

/// `A: rank × d_in`, `B: d_out × rank`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<T: Scalar = f32> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> LoraPair<T> {
    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }
    pub fn d_in(&self) -> usize {
        self.a.shape()[1]
    }
    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }
    /// `B·A`, unscaled.
    pub fn product(&self) -> Tensor<T> {
        matmul(&self.b, &self.a).expect("pair shapes agree")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer<T: Scalar = f32> {
    pub q: Option<LoraPair<T>>,
    pub v: Option<LoraPair<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T: Scalar = f32> {
    rank: usize,
    alpha: f64,
    targets: LoraTargets,
    layers: Vec<LoraLayer<T>>,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn new(rank: usize, alpha: f64, targets: LoraTargets, layers: Vec<LoraLayer<T>>) -> Result<Self> {
        if rank == 0 {
            return Err(Error::invalid("rank", "must be at least 1"));
        }
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::invalid("alpha", "must be positive"));
        }
        for layer in &layers {
            for (wanted, pair) in [(targets.q, &layer.q), (targets.v, &layer.v)] {
                match pair {
                    Some(p) if !wanted => {
                        return Err(Error::invalid("targets", format!("untargeted pair of rank {}", p.rank())))
                    }
                    None if wanted => return Err(Error::invalid("targets", "targeted projection without a pair")),
                    Some(p) if p.rank() != rank || p.b.shape()[1] != rank => {
                        return Err(Error::invalid("rank", "pair rank differs from adapter rank"))
                    }
                    _ => {}
                }
            }
        }
        Ok(Self {
            rank,
            alpha,
            targets,
            layers,
        })
    }

    /// Seeded Gaussian `A` and `B` (a non-trivial delta, for tests).
    pub fn random(config: &ModelConfig, rank: usize, alpha: f64, targets: LoraTargets, std: f64, seed: u64) -> Result<Self> {
        let mut rng = SplitMix64::seed_from_u64(seed);
        check_rank(config, rank)?;
        let d = config.d_model;
        let mut pair = |on: bool| {
            on.then(|| LoraPair {
                a: gaussian(&[rank, d], std, &mut rng),
                b: gaussian(&[d, rank], std, &mut rng),
            })
        };
        let layers = (0..config.n_layers)
            .map(|_| LoraLayer {
                q: pair(targets.q),
                v: pair(targets.v),
            })
            .collect();
        Self::new(rank, alpha, targets, layers)
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `alpha / rank`, always recomputed.
    pub fn scale(&self) -> T {
        T::from_f64(self.alpha / self.rank as f64)
    }

    pub fn with_alpha(mut self, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::invalid("alpha", "must be positive"));
        }
        self.alpha = alpha;
        Ok(self)
    }

    pub fn targets(&self) -> LoraTargets {
        self.targets
    }

    pub fn layers(&self) -> &[LoraLayer<T>] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [LoraLayer<T>] {
        &mut self.layers
    }

    /// `Σ_target rank · (d_in + d_out)`.
    pub fn trainable_count(&self) -> usize {
        self.pairs().map(|p| p.rank() * (p.d_in() + p.d_out())).sum()
    }

    fn pairs(&self) -> impl Iterator<Item = &LoraPair<T>> {
        self.layers.iter().flat_map(|l| l.q.iter().chain(l.v.iter()))
    }

    fn check_fits(&self, config: &ModelConfig) -> Result<()> {
        if self.layers.len() != config.n_layers {
            return Err(Error::AdapterMismatch(format!(
                "adapter has {} layers, model has {}",
                self.layers.len(),
                config.n_layers
            )));
        }
        for p in self.pairs() {
            if p.d_in() != config.d_model || p.d_out() != config.d_model {
                return Err(Error::AdapterMismatch(format!(
                    "pair is {}x{}, projections are {}x{}",
                    p.d_out(),
                    p.d_in(),
                    config.d_model,
                    config.d_model
                )));
            }
        }
        Ok(())
    }
}

fn check_rank(config: &ModelConfig, rank: usize) -> Result<()> {
    let d = config.d_model;
    if rank == 0 || rank > d {
        return Err(Error::Rank {
            rank,
            d_in: d,
            d_out: d,
        });
    }
    Ok(())
}

/// Fresh LoRA adapter: `A ~ N(0, 0.02²)` from `seed`, `B = 0`, so the
/// adapter starts as an exact no-op.
pub fn init_lora<T: Scalar>(config: &ModelConfig, rank: usize, alpha: f64, targets: LoraTargets, seed: u64) -> Result<LoraAdapter<T>> {
    check_rank(config, rank)?;
    let mut rng = SplitMix64::seed_from_u64(seed);
    let d = config.d_model;
    let mut pair = |on: bool| {
        on.then(|| LoraPair {
            a: gaussian(&[rank, d], LORA_INIT_STD, &mut rng),
            b: Tensor::zeros(&[d, rank]),
        })
    };
    let layers = (0..config.n_layers)
        .map(|_| LoraLayer {
            q: pair(targets.q),
            v: pair(targets.v),
        })
        .collect();
    LoraAdapter::new(rank, alpha, targets, layers)
}

/// `out += scale · (x·Aᵀ)·Bᵀ` for `rows` input rows. The intermediate
/// `x·Aᵀ` is written to `low_rank` when given (the backward pass needs it).
pub(crate) fn add_lora_delta<T: Scalar>(
    out: &mut [T],
    x: &[T],
    rows: usize,
    pair: &LoraPair<T>,
    scale: T,
    low_rank: Option<&mut [T]>,
) {
    let (r, d_in, d_out) = (pair.rank(), pair.d_in(), pair.d_out());
    let mut local = alloc::vec![T::zero(); if low_rank.is_some() { 0 } else { rows * r }];
    let u = match low_rank {
        Some(buf) => buf,
        None => &mut local[..],
    };
    let (a, b) = (pair.a.data(), pair.b.data());
    for i in 0..rows {
        let xi = &x[i * d_in..(i + 1) * d_in];
        for j in 0..r {
            u[i * r + j] = dot(xi, &a[j * d_in..(j + 1) * d_in]);
        }
        let ui = &u[i * r..(i + 1) * r];
        let oi = &mut out[i * d_out..(i + 1) * d_out];
        for (o, bo) in oi.iter_mut().zip(b.chunks_exact(r)) {
            *o += scale * dot(ui, bo);
        }
    }
}

/// `base_out + scale · B·(A·x)` for `x` of shape `[d_in]` or `[rows × d_in]`.
pub fn apply_lora<T: Scalar>(base_out: &Tensor<T>, x: &Tensor<T>, pair: &LoraPair<T>, scale: T) -> Result<Tensor<T>> {
    let rows = if x.shape().len() == 1 { 1 } else { x.rows() };
    if x.len() != rows * pair.d_in() || base_out.len() != rows * pair.d_out() {
        return Err(Error::Dimension {
            op: "apply_lora",
            left: x.shape().to_vec(),
            right: pair.a.shape().to_vec(),
        });
    }
    let mut out = base_out.clone();
    add_lora_delta(out.data_mut(), x.data(), rows, pair, scale, None);
    Ok(out)
}

fn fold_lora<T: Scalar>(bundle: &ModelBundle<T>, adapter: &LoraAdapter<T>, sign: T) -> Result<ModelBundle<T>> {
    adapter.check_fits(bundle.config())?;
    let mut out = bundle.clone();
    let k = sign * adapter.scale();
    for (i, layer) in adapter.layers().iter().enumerate() {
        let block = out.block_mut(i);
        for (pair, lin) in [(&layer.q, &mut block.q), (&layer.v, &mut block.v)] {
            if let Some(pair) = pair {
                let delta = pair.product();
                if delta.shape() != lin.weight.shape() {
                    return Err(Error::Dimension {
                        op: "merge_lora",
                        left: lin.weight.shape().to_vec(),
                        right: delta.shape().to_vec(),
                    });
                }
                axpy(k, delta.data(), lin.weight.data_mut());
            }
        }
    }
    Ok(out)
}

/// A new bundle with `W' = W + scale·B·A` for every targeted projection.
pub fn merge_lora<T: Scalar>(bundle: &ModelBundle<T>, adapter: &LoraAdapter<T>) -> Result<ModelBundle<T>> {
    fold_lora(bundle, adapter, T::one())
}

/// Inverse of [`merge_lora`], up to float rounding.
pub fn unmerge_lora<T: Scalar>(bundle: &ModelBundle<T>, adapter: &LoraAdapter<T>) -> Result<ModelBundle<T>> {
    fold_lora(bundle, adapter, -T::one())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefixLayer<T: Scalar = f32> {
    /// `p × d_model`
    pub keys: Tensor<T>,
    /// `p × d_model`
    pub values: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefixAdapter<T: Scalar = f32> {
    len: usize,
    n_layers: usize,
    d_model: usize,
    /// Empty when `len == 0`.
    layers: Vec<PrefixLayer<T>>,
}

impl<T: Scalar> PrefixAdapter<T> {
    pub fn new(n_layers: usize, d_model: usize, layers: Vec<PrefixLayer<T>>) -> Result<Self> {
        let len = layers.first().map_or(0, |l| l.keys.rows());
        if !layers.is_empty() && layers.len() != n_layers {
            return Err(Error::invalid("prefix", "one key/value pair per layer"));
        }
        for l in &layers {
            for t in [&l.keys, &l.values] {
                if t.shape() != [len, d_model] {
                    return Err(Error::invalid("prefix", format!("expected [{len}, {d_model}], got {:?}", t.shape())));
                }
            }
        }
        Ok(Self {
            len,
            n_layers,
            d_model,
            layers,
        })
    }

    /// Seeded Gaussian prefix rows.
    pub fn random(config: &ModelConfig, len: usize, std: f64, seed: u64) -> Self {
        let mut rng = SplitMix64::seed_from_u64(seed);
        let d = config.d_model;
        let layers = if len == 0 {
            Vec::new()
        } else {
            (0..config.n_layers)
                .map(|_| PrefixLayer {
                    keys: gaussian(&[len, d], std, &mut rng),
                    values: gaussian(&[len, d], std, &mut rng),
                })
                .collect()
        };
        Self {
            len,
            n_layers: config.n_layers,
            d_model: d,
            layers,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn layers(&self) -> &[PrefixLayer<T>] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [PrefixLayer<T>] {
        &mut self.layers
    }

    /// `n_layers · 2 · p · d_model`.
    pub fn trainable_count(&self) -> usize {
        self.n_layers * 2 * self.len * self.d_model
    }

    fn check_fits(&self, config: &ModelConfig) -> Result<()> {
        if self.n_layers != config.n_layers || self.d_model != config.d_model {
            return Err(Error::AdapterMismatch(format!(
                "prefix built for {} layers of width {}",
                self.n_layers, self.d_model
            )));
        }
        Ok(())
    }
}

/// Seeded prefix initialization used for training.
pub fn init_prefix<T: Scalar>(config: &ModelConfig, len: usize, seed: u64) -> PrefixAdapter<T> {
    PrefixAdapter::random(config, len, LORA_INIT_STD, seed)
}

/// Prepends the layer's prefix rows to `keys`/`values` (each `t × d_model`).
pub fn apply_prefix<T: Scalar>(
    config: &ModelConfig,
    keys: &Tensor<T>,
    values: &Tensor<T>,
    adapter: &PrefixAdapter<T>,
    layer: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    adapter.check_fits(config)?;
    let t = keys.rows();
    if adapter.len + t > config.max_seq_len {
        return Err(Error::Length {
            len: adapter.len + t,
            max: config.max_seq_len,
        });
    }
    if keys.shape() != values.shape() || keys.cols() != config.d_model {
        return Err(Error::Dimension {
            op: "apply_prefix",
            left: keys.shape().to_vec(),
            right: values.shape().to_vec(),
        });
    }
    if adapter.len == 0 {
        return Ok((keys.clone(), values.clone()));
    }
    let row = adapter.layers.get(layer).ok_or_else(|| Error::invalid("layer", "out of range"))?;
    let join = |pre: &Tensor<T>, rest: &Tensor<T>| {
        let mut data = pre.data().to_vec();
        data.extend_from_slice(rest.data());
        Tensor::matrix(adapter.len + t, config.d_model, data)
    };
    Ok((join(&row.keys, keys)?, join(&row.values, values)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterKind {
    Lora,
    Prefix,
}

impl AdapterKind {
    pub fn tag(self) -> u8 {
        match self {
            AdapterKind::Lora => 0,
            AdapterKind::Prefix => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(AdapterKind::Lora),
            1 => Some(AdapterKind::Prefix),
            _ => None,
        }
    }
}

/// At most one adapter is active at a time; there is no stacking.
#[derive(Debug, Clone, PartialEq)]
pub enum Adapter<T: Scalar = f32> {
    Lora(LoraAdapter<T>),
    Prefix(PrefixAdapter<T>),
}

impl<T: Scalar> Adapter<T> {
    pub fn kind(&self) -> AdapterKind {
        match self {
            Adapter::Lora(_) => AdapterKind::Lora,
            Adapter::Prefix(_) => AdapterKind::Prefix,
        }
    }

    pub fn as_lora(&self) -> Option<&LoraAdapter<T>> {
        match self {
            Adapter::Lora(l) => Some(l),
            Adapter::Prefix(_) => None,
        }
    }

    pub fn as_prefix(&self) -> Option<&PrefixAdapter<T>> {
        match self {
            Adapter::Prefix(p) => Some(p),
            Adapter::Lora(_) => None,
        }
    }

    pub fn trainable_count(&self) -> usize {
        match self {
            Adapter::Lora(l) => l.trainable_count(),
            Adapter::Prefix(p) => p.trainable_count(),
        }
    }

    pub fn check_fits(&self, config: &ModelConfig) -> Result<()> {
        match self {
            Adapter::Lora(l) => l.check_fits(config),
            Adapter::Prefix(p) => p.check_fits(config),
        }
    }

    /// Trainable tensors in a fixed order (the order of [`Self::named_tensors`]).
    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Adapter::Lora(l) => l
                .layers_mut()
                .iter_mut()
                .flat_map(|layer| layer.q.iter_mut().chain(layer.v.iter_mut()))
                .flat_map(|p| [&mut p.a, &mut p.b])
                .collect(),
            Adapter::Prefix(p) => p
                .layers_mut()
                .iter_mut()
                .flat_map(|l| [&mut l.keys, &mut l.values])
                .collect(),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        match self {
            Adapter::Lora(l) => {
                for (i, layer) in l.layers().iter().enumerate() {
                    for (name, pair) in [("q", &layer.q), ("v", &layer.v)] {
                        if let Some(p) = pair {
                            out.push((format!("layers.{i}.attn.{name}.lora_a"), &p.a));
                            out.push((format!("layers.{i}.attn.{name}.lora_b"), &p.b));
                        }
                    }
                }
            }
            Adapter::Prefix(p) => {
                for (i, layer) in p.layers().iter().enumerate() {
                    out.push((format!("layers.{i}.prefix.keys"), &layer.keys));
                    out.push((format!("layers.{i}.prefix.values"), &layer.values));
                }
            }
        }
        out
    }

    /// Same structure with every element zero; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        z
    }

    pub fn cast<U: Scalar>(&self) -> Adapter<U> {
        match self {
            Adapter::Lora(l) => Adapter::Lora(LoraAdapter {
                rank: l.rank,
                alpha: l.alpha,
                targets: l.targets,
                layers: l
                    .layers
                    .iter()
                    .map(|layer| {
                        let c = |p: &Option<LoraPair<T>>| {
                            p.as_ref().map(|p| LoraPair {
                                a: p.a.cast(),
                                b: p.b.cast(),
                            })
                        };
                        LoraLayer {
                            q: c(&layer.q),
                            v: c(&layer.v),
                        }
                    })
                    .collect(),
            }),
            Adapter::Prefix(p) => Adapter::Prefix(PrefixAdapter {
                len: p.len,
                n_layers: p.n_layers,
                d_model: p.d_model,
                layers: p
                    .layers
                    .iter()
                    .map(|l| PrefixLayer {
                        keys: l.keys.cast(),
                        values: l.values.cast(),
                    })
                    .collect(),
            }),
        }
    }

    /// Hyperparameters as `key=value` lines.
    pub fn header_text(&self) -> String {
        match self {
            Adapter::Lora(l) => format!(
                "rank={}\nalpha={:e}\ntargets={}\nn_layers={}\n",
                l.rank,
                l.alpha,
                l.targets.to_text(),
                l.layers.len()
            ),
            Adapter::Prefix(p) => format!("prefix_len={}\nn_layers={}\nd_model={}\n", p.len, p.n_layers, p.d_model),
        }
    }

    /// Rebuilds an adapter from its header and named tensors.
    pub fn from_parts(kind: AdapterKind, header: &str, mut named: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let fields: BTreeMap<&str, &str> = header
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim(), v.trim()))
            .collect();
        let get = |key: &'static str| fields.get(key).copied().ok_or_else(|| Error::invalid(key, "missing from adapter header"));
        let num = |key: &'static str| -> Result<usize> { get(key)?.parse().map_err(|_| Error::invalid(key, "not a number")) };
        let mut take = |name: String| named.remove(&name).ok_or(Error::MissingTensor(name));
        let adapter = match kind {
            AdapterKind::Lora => {
                let rank = num("rank")?;
                let alpha: f64 = get("alpha")?.parse().map_err(|_| Error::invalid("alpha", "not a number"))?;
                let targets = LoraTargets::parse(get("targets")?)?;
                let mut layers = Vec::new();
                for i in 0..num("n_layers")? {
                    let mut pair = |on: bool, name: &str| -> Result<Option<LoraPair<T>>> {
                        if !on {
                            return Ok(None);
                        }
                        Ok(Some(LoraPair {
                            a: take(format!("layers.{i}.attn.{name}.lora_a"))?,
                            b: take(format!("layers.{i}.attn.{name}.lora_b"))?,
                        }))
                    };
                    let q = pair(targets.q, "q")?;
                    let v = pair(targets.v, "v")?;
                    layers.push(LoraLayer { q, v });
                }
                Adapter::Lora(LoraAdapter::new(rank, alpha, targets, layers)?)
            }
            AdapterKind::Prefix => {
                let (len, n_layers, d_model) = (num("prefix_len")?, num("n_layers")?, num("d_model")?);
                let mut layers = Vec::new();
                if len > 0 {
                    for i in 0..n_layers {
                        layers.push(PrefixLayer {
                            keys: take(format!("layers.{i}.prefix.keys"))?,
                            values: take(format!("layers.{i}.prefix.values"))?,
                        });
                    }
                }
                let p = PrefixAdapter::new(n_layers, d_model, layers)?;
                if p.len != len {
                    return Err(Error::invalid("prefix_len", "header disagrees with tensors"));
                }
                Adapter::Prefix(p)
            }
        };
        if let Some(extra) = named.keys().next() {
            return Err(Error::invalid("tensors", format!("unexpected tensor {extra}")));
        }
        Ok(adapter)
    }
}

/// Share of trainable parameters in the adapted model,
/// `adapter / (base + adapter)`.
pub fn trainable_fraction(adapter_params: usize, base_params: usize) -> f64 {
    adapter_params as f64 / (base_params + adapter_params) as f64
}

impl<T: Scalar> From<LoraAdapter<T>> for Adapter<T> {
    fn from(l: LoraAdapter<T>) -> Self {
        Adapter::Lora(l)
    }
}

impl<T: Scalar> From<PrefixAdapter<T>> for Adapter<T> {
    fn from(p: PrefixAdapter<T>) -> Self {
        Adapter::Prefix(p)
    }
}

impl AdapterKind {
    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::Lora => "lora",
            AdapterKind::Prefix => "prefix",
        }
    }
}

impl core::fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

impl core::str::FromStr for AdapterKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora" => Ok(AdapterKind::Lora),
            "prefix" => Ok(AdapterKind::Prefix),
            other => Err(Error::invalid("method", other.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_spellings() {
        for s in ["qv", "q,v", "v, q"] {
            assert_eq!(LoraTargets::parse(s).unwrap(), LoraTargets::QV);
        }
        assert_eq!(LoraTargets::parse("q").unwrap().count(), 1);
        assert!(LoraTargets::parse("k").is_err());
        assert!(LoraTargets::parse("").is_err());
    }

    fn desk() -> ModelConfig {
        ModelConfig::desk()
    }

    #[test]
    fn recipe_hyperparameters_give_scale_two() {
        let a = init_lora::<f32>(&desk(), 8, 16.0, LoraTargets::QV, 0).unwrap();
        assert_eq!(a.scale(), 2.0);
    }

    #[test]
    fn closed_form_counts() {
        let lora = init_lora::<f32>(&desk(), 8, 16.0, LoraTargets::QV, 0).unwrap();
        assert_eq!(lora.trainable_count(), 4 * 2 * 8 * (64 + 64));
        assert_eq!(lora.trainable_count(), 8192);
        let prefix = PrefixAdapter::<f32>::random(&desk(), 4, 0.02, 0);
        assert_eq!(prefix.trainable_count(), 2048);
        let counted: usize = Adapter::from(prefix).params().iter().map(|t| t.len()).sum();
        assert_eq!(counted, 2048);
    }

    #[test]
    fn trainable_fraction_lies_in_band() {
        let base = desk().parameter_count();
        let lora = trainable_fraction(8192, base);
        assert!((0.001..=0.03).contains(&lora), "lora fraction {lora}");
        let prefix = trainable_fraction(2048, base);
        assert!((0.001..=0.03).contains(&prefix), "prefix fraction {prefix}");
    }

    #[test]
    fn rank_larger_than_projection_is_rejected() {
        let cfg = ModelConfig::tiny(1, 8, 2);
        assert_eq!(
            init_lora::<f32>(&cfg, 9, 16.0, LoraTargets::QV, 0).unwrap_err(),
            Error::Rank {
                rank: 9,
                d_in: 8,
                d_out: 8
            }
        );
    }

    #[test]
    fn apply_lora_hand_example() {
        let pair = LoraPair {
            a: Tensor::matrix(1, 1, alloc::vec![3.0f64]).unwrap(),
            b: Tensor::matrix(1, 1, alloc::vec![2.0]).unwrap(),
        };
        let base = Tensor::vector(alloc::vec![1.0]).unwrap();
        let x = Tensor::vector(alloc::vec![1.0]).unwrap();
        assert_eq!(apply_lora(&base, &x, &pair, 2.0).unwrap().data(), &[13.0]);

        let zero_b = LoraPair {
            a: pair.a.clone(),
            b: Tensor::zeros(&[1, 1]),
        };
        assert_eq!(apply_lora(&base, &x, &zero_b, 2.0).unwrap(), base);
    }

    #[test]
    fn delta_is_linear_in_alpha() {
        let cfg = ModelConfig::tiny(1, 8, 2);
        let l = LoraAdapter::<f64>::random(&cfg, 2, 4.0, LoraTargets::Q, 0.3, 5).unwrap();
        let pair = l.layers()[0].q.as_ref().unwrap();
        let base = Tensor::from_fn(&[3, 8], |i| i as f64 * 0.1);
        let x = Tensor::from_fn(&[3, 8], |i| (i as f64).sin());
        let d1 = apply_lora(&base, &x, pair, l.scale()).unwrap().sub(&base).unwrap();
        let l2 = l.clone().with_alpha(8.0).unwrap();
        let d2 = apply_lora(&base, &x, pair, l2.scale()).unwrap().sub(&base).unwrap();
        assert!(d2.max_abs_diff(&d1.scale(2.0)).unwrap() < 1e-12);
    }

    #[test]
    fn merge_with_zero_b_is_exact_and_unmerge_restores() {
        let cfg = ModelConfig::tiny(2, 16, 2);
        let m = ModelBundle::<f32>::random(cfg.clone(), 4).unwrap();
        let fresh = init_lora::<f32>(&cfg, 4, 16.0, LoraTargets::QV, 1).unwrap();
        assert_eq!(merge_lora(&m, &fresh).unwrap(), m);

        let l = LoraAdapter::<f32>::random(&cfg, 4, 16.0, LoraTargets::QV, 0.1, 2).unwrap();
        let merged = merge_lora(&m, &l).unwrap();
        assert_ne!(merged, m);
        let back = unmerge_lora(&merged, &l).unwrap();
        for ((_, a), (_, b)) in back.named_tensors().iter().zip(m.named_tensors().iter()) {
            assert!(a.max_abs_diff(b).unwrap() <= 1e-5);
        }
    }

    #[test]
    fn merge_matches_runtime_adapter() {
        let cfg = ModelConfig::tiny(2, 16, 4);
        let m = ModelBundle::<f32>::random(cfg.clone(), 40).unwrap();
        let l = LoraAdapter::<f32>::random(&cfg, 4, 16.0, LoraTargets::QV, 0.1, 41).unwrap();
        let tokens = [1u32, 90, 91, 150, 3];
        let runtime = m.forward(Some(&Adapter::Lora(l.clone())), &tokens, None).unwrap();
        let merged = merge_lora(&m, &l).unwrap().forward(None, &tokens, None).unwrap();
        assert!(runtime.max_abs_diff(&merged).unwrap() <= 1e-4);
    }

    #[test]
    fn prefix_of_length_zero_changes_nothing() {
        let cfg = ModelConfig::tiny(2, 16, 2);
        let m = ModelBundle::<f32>::random(cfg.clone(), 3).unwrap();
        let p = Adapter::Prefix(PrefixAdapter::random(&cfg, 0, 0.1, 0));
        let t = [1u32, 8, 9];
        assert_eq!(m.forward(None, &t, None).unwrap(), m.forward(Some(&p), &t, None).unwrap());
    }

    #[test]
    fn apply_prefix_prepends_rows() {
        let cfg = ModelConfig::tiny(2, 8, 2);
        let p = PrefixAdapter::<f64>::random(&cfg, 3, 1.0, 7);
        let k = Tensor::from_fn(&[2, 8], |i| i as f64);
        let (kk, vv) = apply_prefix(&cfg, &k, &k, &p, 1).unwrap();
        assert_eq!(kk.shape(), [5, 8]);
        assert_eq!(kk.row(0), p.layers()[1].keys.row(0));
        assert_eq!(vv.row(3), k.row(0));
        let long = Tensor::zeros(&[62, 8]);
        assert!(matches!(apply_prefix(&cfg, &long, &long, &p, 0), Err(Error::Length { len: 65, max: 64 })));
    }

    #[test]
    fn header_round_trip() {
        let cfg = ModelConfig::tiny(2, 8, 2);
        for adapter in [
            Adapter::Lora(LoraAdapter::<f32>::random(&cfg, 2, 16.0, LoraTargets::V, 0.1, 1).unwrap()),
            Adapter::Prefix(PrefixAdapter::random(&cfg, 2, 0.1, 1)),
        ] {
            let named = adapter.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
            let back = Adapter::from_parts(adapter.kind(), &adapter.header_text(), named).unwrap();
            assert_eq!(back, adapter);
        }
    }
}
