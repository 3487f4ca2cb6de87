//! Symmetric group-wise INT4 weight quantization.
//!
//! Each row of a `[d_out × d_in]` weight is split into groups of
//! `group_size` consecutive input columns. A group stores its absolute
//! maximum `m` as an IEEE half and every element as a code in `[−7, 7]`:
//!
//! ```text
//! scale = m / 7            (m = 7, scale = 1, for an all-zero group)
//! code  = clamp(round(w / scale), −7, 7)   rounding half away from zero
//! w'    = code · scale
//! ```
//!
//! Storing `m` rather than `m / 7` keeps any representable maximum exact
//! (`7 · (1/7)` is exactly `1`). Codes are packed two per byte over the
//! row-major element order, the even index in the low nibble, two's
//! complement.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use half::f16;
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::adapters::{merge_lora, Adapter};
use crate::error::{Error, Result};
use crate::model::{Linear, ModelBundle, Project, Transformer};
use crate::tensor::{Tensor, axpy};

pub const DEFAULT_GROUP_SIZE: usize = 32;
pub const MAX_CODE: i8 = 7;

/// Quantizes one group. Returns the stored absolute maximum and the codes.
pub fn quantize_group(w: &[f32]) -> (f16, Vec<i8>) {
    let max = w.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return (f16::from_f32(7.0), vec![0; w.len()]);
    }
    let mut m = f16::from_f32(max);
    if m.to_f32() == 0.0 {
        m = f16::from_bits(1);
    }
    let scale = m.to_f64() / 7.0;
    let codes = w
        .iter()
        // `f64::round` rounds half away from zero.
        .map(|&v| Float::round(v as f64 / scale).clamp(-7.0, 7.0) as i8)
        .collect();
    (m, codes)
}

/// Scale of a group whose stored maximum is `m`.
pub fn group_scale(m: f16) -> f32 {
    m.to_f32() / 7.0
}

fn dequant(code: i8, m: f32) -> f32 {
    code as f32 * m / 7.0
}

/// `code · scale` in f64, which is exact to well below any f32 step.
pub fn reconstruct(code: i8, m: f16) -> f64 {
    code as f64 * m.to_f64() / 7.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    rows: usize,
    cols: usize,
    group_size: usize,
    /// Per row-group absolute maximum, `rows × groups_per_row`.
    maxima: Vec<f16>,
    packed: Vec<u8>,
}

impl QuantizedMatrix {
    pub fn quantize(w: &Tensor<f32>, group_size: usize) -> Result<Self> {
        if group_size == 0 {
            return Err(Error::invalid("group_size", "must be at least 1"));
        }
        let (rows, cols) = (w.rows(), w.cols());
        let groups = cols.div_ceil(group_size);
        let mut maxima = Vec::with_capacity(rows * groups);
        let mut codes = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for chunk in w.row(r).chunks(group_size) {
                let (m, c) = quantize_group(chunk);
                maxima.push(m);
                codes.extend(c);
            }
        }
        Ok(Self {
            rows,
            cols,
            group_size,
            maxima,
            packed: pack_codes(&codes),
        })
    }

    /// Rebuilds a matrix from its stored parts, checking their lengths.
    pub fn from_parts(rows: usize, cols: usize, group_size: usize, maxima: Vec<f16>, packed: Vec<u8>) -> Result<Self> {
        if rows == 0 || cols == 0 || group_size == 0 {
            return Err(Error::invalid("quantized matrix", "zero dimension"));
        }
        let groups = rows * cols.div_ceil(group_size);
        if maxima.len() != groups || packed.len() != (rows * cols).div_ceil(2) {
            return Err(Error::invalid(
                "quantized matrix",
                format!("{rows}x{cols} g{group_size} needs {groups} scales and {} code bytes", (rows * cols).div_ceil(2)),
            ));
        }
        if let Some(bad) = unpack_codes(&packed, rows * cols).into_iter().find(|c| *c < -MAX_CODE) {
            return Err(Error::invalid("quantized matrix", format!("code {bad} outside [-7, 7]")));
        }
        Ok(Self {
            rows,
            cols,
            group_size,
            maxima,
            packed,
        })
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn groups_per_row(&self) -> usize {
        self.cols.div_ceil(self.group_size)
    }

    pub fn maxima(&self) -> &[f16] {
        &self.maxima
    }

    pub fn scales(&self) -> Vec<f32> {
        self.maxima.iter().map(|&m| group_scale(m)).collect()
    }

    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    pub fn codes(&self) -> Vec<i8> {
        unpack_codes(&self.packed, self.rows * self.cols)
    }

    /// Bytes of codes plus scales.
    pub fn byte_size(&self) -> usize {
        self.packed.len() + 2 * self.maxima.len()
    }

    pub fn dequantize(&self) -> Tensor<f32> {
        let codes = self.codes();
        let g = self.groups_per_row();
        let data = codes
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let (r, col) = (i / self.cols, i % self.cols);
                dequant(c, self.maxima[r * g + col / self.group_size].to_f32())
            })
            .collect();
        Tensor::new(vec![self.rows, self.cols], data).expect("shape matches codes")
    }

    /// `out[t] = W'·x[t]` for `rows` input rows, accumulating each group's
    /// integer-weighted sum before scaling.
    fn apply(&self, x: &[f32], n: usize, out: &mut [f32]) {
        let codes = self.codes();
        let g = self.groups_per_row();
        for t in 0..n {
            let xt = &x[t * self.cols..(t + 1) * self.cols];
            for o in 0..self.rows {
                let row = &codes[o * self.cols..(o + 1) * self.cols];
                let mut acc = 0.0f32;
                for (k, (cg, xg)) in row.chunks(self.group_size).zip(xt.chunks(self.group_size)).enumerate() {
                    let s: f32 = cg.iter().zip(xg).map(|(&c, &v)| c as f32 * v).sum();
                    acc += s * self.maxima[o * g + k].to_f32() / 7.0;
                }
                out[t * self.rows + o] = acc;
            }
        }
    }
}

pub fn pack_codes(codes: &[i8]) -> Vec<u8> {
    codes
        .chunks(2)
        .map(|pair| {
            let lo = pair[0] as u8 & 0x0f;
            let hi = pair.get(1).map_or(0, |&c| c as u8 & 0x0f);
            lo | (hi << 4)
        })
        .collect()
}

pub fn unpack_codes(packed: &[u8], n: usize) -> Vec<i8> {
    let nibble = |b: u8| ((b << 4) as i8) >> 4;
    packed
        .iter()
        .flat_map(|&b| [nibble(b & 0x0f), nibble(b >> 4)])
        .take(n)
        .collect()
}

/// Dequantizing product `qw · x` for `x` of shape `[in × n]`.
pub fn qmatmul(qw: &QuantizedMatrix, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (k, n) = (x.rows(), x.cols());
    if k != qw.cols {
        return Err(Error::Dimension {
            op: "qmatmul",
            left: qw.shape().to_vec(),
            right: x.shape().to_vec(),
        });
    }
    let xt = x.transpose()?;
    let mut out = vec![0.0; qw.rows * n];
    qw.apply(xt.data(), n, &mut out);
    Tensor::new(vec![n, qw.rows], out)?.transpose()
}

/// INT4 projection with a float bias.
#[derive(Debug, Clone, PartialEq)]
pub struct QLinear {
    pub weight: QuantizedMatrix,
    pub bias: Tensor<f32>,
}

impl Project<f32> for QLinear {
    fn d_in(&self) -> usize {
        self.weight.cols
    }

    fn d_out(&self) -> usize {
        self.weight.rows
    }

    fn project(&self, x: &[f32], rows: usize, out: &mut [f32]) {
        self.weight.apply(x, rows, out);
        for r in out.chunks_mut(self.weight.rows) {
            axpy(1.0, self.bias.data(), r);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantPolicy {
    /// Fold the LoRA delta into the weights, then quantize.
    MergeThenQuantize,
    /// Quantize the base weights and apply the adapter in float at run time.
    QuantBaseKeepAdapterFloat,
}

impl QuantPolicy {
    pub fn tag(self) -> u8 {
        match self {
            QuantPolicy::MergeThenQuantize => 1,
            QuantPolicy::QuantBaseKeepAdapterFloat => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(QuantPolicy::MergeThenQuantize),
            2 => Some(QuantPolicy::QuantBaseKeepAdapterFloat),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            QuantPolicy::MergeThenQuantize => "merge-then-quantize",
            QuantPolicy::QuantBaseKeepAdapterFloat => "quant-base-keep-adapter-float",
        }
    }
}

impl core::str::FromStr for QuantPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "merge" | "merge-then-quantize" => Ok(QuantPolicy::MergeThenQuantize),
            "float-adapter" | "quant-base-keep-adapter-float" => Ok(QuantPolicy::QuantBaseKeepAdapterFloat),
            other => Err(Error::invalid("policy", format!("unknown policy {other}"))),
        }
    }
}

pub type QuantizedModel = Transformer<f32, QLinear>;

/// Quantized decoder plus the float adapter it runs with, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBundle {
    pub model: QuantizedModel,
    pub policy: QuantPolicy,
    pub group_size: usize,
    /// Only ever set under [`QuantPolicy::QuantBaseKeepAdapterFloat`].
    pub adapter: Option<Adapter<f32>>,
}

/// Byte accounting for the six projection weights of every layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    pub float_weight_bytes: usize,
    pub quantized_weight_bytes: usize,
    /// Embeddings, norms, head and projection biases, kept in f32.
    pub float_other_bytes: usize,
}

impl Footprint {
    pub fn reduction(&self) -> f64 {
        self.float_weight_bytes as f64 / self.quantized_weight_bytes as f64
    }
}

impl QuantizedBundle {
    pub fn footprint(&self) -> Footprint {
        let mut fp = Footprint {
            float_weight_bytes: 0,
            quantized_weight_bytes: 0,
            float_other_bytes: self.model.unquantized_tensors().iter().map(|(_, t)| 4 * t.len()).sum(),
        };
        for block in self.model.blocks() {
            for (_, p) in block.projections() {
                let [r, c] = p.weight.shape();
                fp.float_weight_bytes += 4 * r * c;
                fp.quantized_weight_bytes += p.weight.byte_size();
                fp.float_other_bytes += 4 * p.bias.len();
            }
        }
        fp
    }

    /// Quantized projections by canonical weight name.
    pub fn quantized_tensors(&self) -> Vec<(String, &QuantizedMatrix)> {
        let mut out = Vec::new();
        for (i, block) in self.model.blocks().iter().enumerate() {
            for (name, p) in block.projections() {
                out.push((format!("layers.{i}.{name}.weight"), &p.weight));
            }
        }
        out
    }

    /// Float tensors including projection biases, by canonical name.
    pub fn float_tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = self.model.unquantized_tensors();
        for (i, block) in self.model.blocks().iter().enumerate() {
            for (name, p) in block.projections() {
                out.push((format!("layers.{i}.{name}.bias"), &p.bias));
            }
        }
        out
    }

    /// Reassembles a bundle from a float model skeleton whose projection
    /// weights are replaced by `quantized`, keyed by canonical weight name.
    pub fn from_parts(
        skeleton: ModelBundle<f32>,
        mut quantized: alloc::collections::BTreeMap<String, QuantizedMatrix>,
        policy: QuantPolicy,
        group_size: usize,
        adapter: Option<Adapter<f32>>,
    ) -> Result<Self> {
        if adapter.is_some() && policy == QuantPolicy::MergeThenQuantize {
            return Err(Error::invalid("policy", "merged bundles carry no separate adapter"));
        }
        if let Some(a) = &adapter {
            a.check_fits(skeleton.config())?;
        }
        let model = skeleton.map_blocks(|i, block| {
            block.map_projections(|name, lin: Linear<f32>| {
                let key = format!("layers.{i}.{name}.weight");
                let weight = quantized.remove(&key).ok_or_else(|| Error::MissingTensor(key.clone()))?;
                if weight.shape() != [lin.d_out(), lin.d_in()] {
                    return Err(Error::ShapeMismatch {
                        name: key,
                        expected: vec![lin.d_out(), lin.d_in()],
                        found: weight.shape().to_vec(),
                    });
                }
                Ok(QLinear { weight, bias: lin.bias })
            })
        })?;
        if let Some(extra) = quantized.keys().next() {
            return Err(Error::invalid("quantized tensors", format!("unexpected tensor {extra}")));
        }
        Ok(Self {
            model,
            policy,
            group_size,
            adapter,
        })
    }

    pub fn forward_all(&self, tokens: &[u32], cache: Option<&mut crate::KvCache<f32>>) -> Result<Tensor<f32>> {
        self.model.forward_all(self.adapter.as_ref(), tokens, cache)
    }
}

/// Quantizes every projection weight of `bundle` under `policy`.
///
/// `MergeThenQuantize` needs a LoRA adapter to fold in; prefix adapters
/// cannot be merged. Without an adapter use `QuantBaseKeepAdapterFloat`.
pub fn quantize_model(
    bundle: &ModelBundle<f32>,
    adapter: Option<&Adapter<f32>>,
    policy: QuantPolicy,
    group_size: usize,
) -> Result<QuantizedBundle> {
    let (base, kept) = match (policy, adapter) {
        (QuantPolicy::MergeThenQuantize, Some(Adapter::Lora(l))) => (merge_lora(bundle, l)?, None),
        (QuantPolicy::MergeThenQuantize, Some(Adapter::Prefix(_))) => {
            return Err(Error::invalid("policy", "a prefix adapter cannot be merged into weights"))
        }
        (QuantPolicy::MergeThenQuantize, None) => {
            return Err(Error::invalid("policy", "merge-then-quantize needs a LoRA adapter"))
        }
        (QuantPolicy::QuantBaseKeepAdapterFloat, a) => {
            if let Some(a) = a {
                a.check_fits(bundle.config())?;
            }
            (bundle.clone(), a.cloned())
        }
    };
    let model = base.map_blocks(|_, block| {
        block.map_projections(|_, lin: Linear<f32>| {
            Ok(QLinear {
                weight: QuantizedMatrix::quantize(&lin.weight, group_size)?,
                bias: lin.bias,
            })
        })
    })?;
    Ok(QuantizedBundle {
        model,
        policy,
        group_size,
        adapter: kept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{init_lora, LoraTargets};
    use crate::model::ModelConfig;
    use crate::tensor::matmul;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::SplitMix64;

    #[test]
    fn zero_group() {
        let (m, codes) = quantize_group(&[0.0; 5]);
        assert_eq!(group_scale(m), 1.0);
        assert_eq!(codes, [0; 5]);
    }

    #[test]
    fn hand_example() {
        let (m, codes) = quantize_group(&[-1.0, 0.5, 1.0]);
        assert_eq!(group_scale(m), 1.0 / 7.0);
        assert_eq!(codes, [-7, 4, 7]);
        let deq: Vec<f32> = codes.iter().map(|&c| dequant(c, m.to_f32())).collect();
        assert_eq!(deq[0], -1.0);
        assert_eq!(deq[2], 1.0);
        assert!((deq[1] - 4.0 / 7.0).abs() < 1e-7);
        assert!((0.5 - reconstruct(codes[1], m)).abs() <= 1.0 / 14.0 + 1e-9);
    }

    #[test]
    fn nibbles_round_trip() {
        let codes: Vec<i8> = (-7..=7).collect();
        let packed = pack_codes(&codes);
        assert_eq!(packed.len(), 8);
        assert_eq!(packed[0] & 0x0f, (-7i8 as u8) & 0x0f);
        assert_eq!(unpack_codes(&packed, codes.len()), codes);
    }

    #[test]
    fn identity_is_exact() {
        let eye = Tensor::<f32>::identity(40);
        let q = QuantizedMatrix::quantize(&eye, 32).unwrap();
        assert_eq!(q.dequantize(), eye);
        let x = Tensor::from_fn(&[40, 3], |i| i as f32 * 0.25 - 7.0);
        assert_eq!(qmatmul(&q, &x).unwrap(), x);
    }

    #[test]
    fn zero_matrix_gives_zero_output() {
        let q = QuantizedMatrix::quantize(&Tensor::zeros(&[8, 8]), 32).unwrap();
        let x = Tensor::filled(&[8, 2], 3.0);
        assert_eq!(qmatmul(&q, &x).unwrap(), Tensor::zeros(&[8, 2]));
    }

    #[test]
    fn qmatmul_matches_reference() {
        let mut rng = SplitMix64::seed_from_u64(5);
        let w = Tensor::from_fn(&[64, 64], |_| rng.random_range(-1.0f32..1.0));
        let x = Tensor::from_fn(&[64, 64], |_| rng.random_range(-1.0f32..1.0));
        let q = QuantizedMatrix::quantize(&w, 32).unwrap();
        let reference = matmul(&q.dequantize(), &x).unwrap();
        assert!(qmatmul(&q, &x).unwrap().max_abs_diff(&reference).unwrap() <= 1e-5);
    }

    #[test]
    fn requantizing_is_idempotent() {
        let mut rng = SplitMix64::seed_from_u64(6);
        let w = Tensor::from_fn(&[4, 70], |_| rng.random_range(-3.0f32..3.0));
        let q = QuantizedMatrix::quantize(&w, 32).unwrap();
        let again = QuantizedMatrix::quantize(&q.dequantize(), 32).unwrap();
        assert_eq!(again, q);
    }

    #[test]
    fn footprint_is_about_seven_times_smaller() {
        let cfg = ModelConfig::desk();
        let m = ModelBundle::<f32>::random(cfg, 0).unwrap();
        let q = quantize_model(&m, None, QuantPolicy::QuantBaseKeepAdapterFloat, 32).unwrap();
        let fp = q.footprint();
        // 4 bits per weight plus a 16-bit maximum per 32 weights.
        assert_eq!(fp.float_weight_bytes * 9, fp.quantized_weight_bytes * 64);
        assert!((fp.reduction() - 64.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn policies_agree_for_a_zero_delta() {
        let cfg = ModelConfig::tiny(2, 32, 2);
        let m = ModelBundle::<f32>::random(cfg.clone(), 1).unwrap();
        let a = Adapter::Lora(init_lora(&cfg, 4, 16.0, LoraTargets::QV, 2).unwrap());
        let merged = quantize_model(&m, Some(&a), QuantPolicy::MergeThenQuantize, 32).unwrap();
        let kept = quantize_model(&m, Some(&a), QuantPolicy::QuantBaseKeepAdapterFloat, 32).unwrap();
        let toks = [1, 50, 60, 70];
        assert_eq!(merged.forward_all(&toks, None).unwrap(), kept.forward_all(&toks, None).unwrap());
    }

    #[test]
    fn merge_policy_needs_a_lora_adapter() {
        let cfg = ModelConfig::tiny(1, 16, 2);
        let m = ModelBundle::<f32>::random(cfg.clone(), 1).unwrap();
        assert!(quantize_model(&m, None, QuantPolicy::MergeThenQuantize, 32).is_err());
        let p = Adapter::Prefix(crate::adapters::init_prefix(&cfg, 2, 0));
        assert!(quantize_model(&m, Some(&p), QuantPolicy::MergeThenQuantize, 32).is_err());
    }

    proptest! {
        #[test]
        fn reconstruction_error_is_at_most_half_a_step(w in proptest::collection::vec(-100.0f32..100.0, 1..=32)) {
            let (m, codes) = quantize_group(&w);
            let scale = m.to_f64() / 7.0;
            for (&v, &c) in w.iter().zip(&codes) {
                prop_assert!((-7..=7).contains(&c));
                let back = reconstruct(c, m);
                prop_assert!((back - v as f64).abs() <= scale / 2.0 + 1e-9);
            }
        }
    }
}
