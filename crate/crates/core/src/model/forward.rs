use alloc::vec;
use alloc::vec::Vec;

use super::{KvCache, Project, Transformer};
use crate::adapters::{add_lora_delta, Adapter};
use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, layer_norm_rows, softmax_into, Scalar, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(GELU_K);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(GELU_K);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let th = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * k * x * x)
}

/// Multi-head attention of `n_q` query rows over `keys`/`values`.
///
/// Query `i` sees key rows `0..first_visible + i`, which covers prefix rows,
/// cached rows and the causal part of the new rows. When `probs` is given it
/// receives the `[head][query][key]` attention weights (masked entries 0).
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend<T: Scalar>(
    q: &[T],
    n_q: usize,
    keys: &[T],
    values: &[T],
    n_heads: usize,
    d: usize,
    first_visible: usize,
    out: &mut [T],
    mut probs: Option<&mut [T]>,
) {
    let n_kv = keys.len() / d;
    let hd = d / n_heads;
    let scale = T::one() / T::from_f64(hd as f64).sqrt();
    let mut scores = vec![T::zero(); n_kv];
    let mut weights = vec![T::zero(); n_kv];
    out.iter_mut().for_each(|v| *v = T::zero());
    for h in 0..n_heads {
        let off = h * hd;
        for i in 0..n_q {
            let vis = (first_visible + i).min(n_kv);
            let qi = &q[i * d + off..i * d + off + hd];
            for j in 0..vis {
                scores[j] = dot(qi, &keys[j * d + off..j * d + off + hd]) * scale;
            }
            softmax_into(&scores[..vis], &mut weights[..vis]).expect("at least one visible key");
            let oi = &mut out[i * d + off..i * d + off + hd];
            for j in 0..vis {
                axpy(weights[j], &values[j * d + off..j * d + off + hd], oi);
            }
            if let Some(p) = probs.as_deref_mut() {
                let base = (h * n_q + i) * n_kv;
                p[base..base + vis].copy_from_slice(&weights[..vis]);
            }
        }
    }
}

impl<T: Scalar, P: Project<T>> Transformer<T, P> {
    /// Logits for the position after the last token.
    ///
    /// Without a cache the whole sequence is processed from position 0.
    /// With a cache only `tokens` (the new ones) are processed and appended.
    pub fn forward(&self, adapter: Option<&Adapter<T>>, tokens: &[u32], cache: Option<&mut KvCache<T>>) -> Result<Tensor<T>> {
        let all = self.forward_all(adapter, tokens, cache)?;
        let last = all.row(all.rows() - 1).to_vec();
        Tensor::vector(last)
    }

    /// Logits for every new position, `[tokens.len() × vocab_size]`.
    pub fn forward_all(&self, adapter: Option<&Adapter<T>>, tokens: &[u32], cache: Option<&mut KvCache<T>>) -> Result<Tensor<T>> {
        let cfg = &self.config;
        if tokens.is_empty() {
            return Err(Error::invalid("tokens", "empty input"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size()) {
            return Err(Error::invalid("tokens", alloc::format!("id {bad} outside vocabulary")));
        }
        if let Some(a) = adapter {
            a.check_fits(cfg)?;
        }
        let mut local;
        let cache = match cache {
            Some(c) => c,
            None => {
                local = KvCache::new(cfg);
                &mut local
            }
        };
        let lora = adapter.and_then(Adapter::as_lora);
        cache.ensure_prefix(adapter.and_then(Adapter::as_prefix))?;
        let (n, d, past) = (tokens.len(), cfg.d_model, cache.len());
        let needed = cache.prefix_len() + past + n;
        if needed > cfg.max_seq_len {
            return Err(Error::Length {
                len: needed,
                max: cfg.max_seq_len,
            });
        }

        let eps = T::from_f64(cfg.norm_eps);
        let mut x = vec![T::zero(); n * d];
        for (i, &tok) in tokens.iter().enumerate() {
            let row = &mut x[i * d..(i + 1) * d];
            row.copy_from_slice(self.embed.row(tok as usize));
            axpy(T::one(), self.pos_embed.row(past + i), row);
        }
        let mut h = vec![T::zero(); n * d];
        let mut q = vec![T::zero(); n * d];
        let mut k = vec![T::zero(); n * d];
        let mut v = vec![T::zero(); n * d];
        let mut ctx = vec![T::zero(); n * d];
        let mut a = vec![T::zero(); n * d];
        let mut f = vec![T::zero(); n * cfg.d_ff];

        for (l, block) in self.blocks.iter().enumerate() {
            layer_norm_rows(&x, d, block.attn_norm.gain.data(), block.attn_norm.bias.data(), eps, &mut h, None);
            block.q.project(&h, n, &mut q);
            block.k.project(&h, n, &mut k);
            block.v.project(&h, n, &mut v);
            if let Some(lora) = lora {
                let layer = &lora.layers()[l];
                if let Some(pair) = &layer.q {
                    add_lora_delta(&mut q, &h, n, pair, lora.scale(), None);
                }
                if let Some(pair) = &layer.v {
                    add_lora_delta(&mut v, &h, n, pair, lora.scale(), None);
                }
            }
            cache.append(l, &k, &v);
            let (keys, values) = cache.layer(l);
            attend(&q, n, keys, values, cfg.n_heads, d, cache.prefix_len() + past + 1, &mut ctx, None);
            block.o.project(&ctx, n, &mut a);
            axpy(T::one(), &a, &mut x);

            layer_norm_rows(&x, d, block.ffn_norm.gain.data(), block.ffn_norm.bias.data(), eps, &mut h, None);
            block.ff_in.project(&h, n, &mut f);
            f.iter_mut().for_each(|z| *z = gelu(*z));
            block.ff_out.project(&f, n, &mut a);
            axpy(T::one(), &a, &mut x);
        }
        cache.advance(n);

        layer_norm_rows(&x, d, self.final_norm.gain.data(), self.final_norm.bias.data(), eps, &mut h, None);
        let vocab = cfg.vocab_size();
        let mut logits = Vec::with_capacity(n * vocab);
        for i in 0..n {
            let hi = &h[i * d..(i + 1) * d];
            logits.extend((0..vocab).map(|t| dot(hi, self.lm_head.row(t))));
        }
        Tensor::new(vec![n, vocab], logits)
    }
}
