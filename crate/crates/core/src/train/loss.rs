//! Masked cross-entropy over answer positions and its reverse pass.
//!
//! Training sequences are `[BOS] question [SEP] answer [EOS]`. The logits
//! at `SEP` and at every answer token are scored against the next token, so
//! the targets are the answer followed by `EOS`; question positions carry no
//! loss. Only adapter tensors receive gradients; base weights are read-only
//! and activation gradients flow through them.

use alloc::vec;
use alloc::vec::Vec;

use crate::adapters::{add_lora_delta, Adapter, LoraPair};
use crate::error::{Error, Result};
use crate::model::{attend, gelu, gelu_grad, Linear, ModelBundle, Project};
use crate::tensor::{axpy, dot, layer_norm_rows, NormStats, Scalar};
use crate::tokenizer::{BOS, EOS, SEP};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub tokens: Vec<u32>,
    /// Index of the `SEP` token; positions `sep..tokens.len() - 1` are scored.
    pub sep: usize,
    /// Set when the question or answer had to be cut to fit.
    pub truncated: bool,
}

impl EncodedExample {
    pub fn n_targets(&self) -> usize {
        self.tokens.len() - 1 - self.sep
    }
}

/// Lays out one QA pair, cutting the answer to `max_target_len` tokens and
/// then dropping the oldest question tokens until the sequence fits.
pub fn encode_example(question: &[u32], answer: &[u32], max_seq_len: usize, max_target_len: usize) -> Result<EncodedExample> {
    if answer.is_empty() {
        return Err(Error::DegenerateExample("answer is empty"));
    }
    if max_seq_len < 4 {
        return Err(Error::invalid("max_seq_len", "needs room for BOS, SEP, one answer token and EOS"));
    }
    let mut truncated = false;
    let answer_cap = max_target_len.min(max_seq_len - 3).max(1);
    let answer = if answer.len() > answer_cap {
        truncated = true;
        &answer[..answer_cap]
    } else {
        answer
    };
    let question_cap = max_seq_len - 3 - answer.len();
    let question = if question.len() > question_cap {
        truncated = true;
        &question[question.len() - question_cap..]
    } else {
        question
    };
    if truncated {
        log::warn!(
            "training example truncated to {} question and {} answer tokens",
            question.len(),
            answer.len()
        );
    }
    let mut tokens = Vec::with_capacity(question.len() + answer.len() + 3);
    tokens.push(BOS);
    tokens.extend_from_slice(question);
    tokens.push(SEP);
    tokens.extend_from_slice(answer);
    tokens.push(EOS);
    Ok(EncodedExample {
        sep: question.len() + 1,
        tokens,
        truncated,
    })
}

#[derive(Debug, Clone)]
pub struct LossOutput<T: Scalar> {
    pub loss: T,
    /// Same structure as the adapter.
    pub grads: Adapter<T>,
}

/// Mean cross-entropy of `targets` under row-wise softmax of `logits`
/// (`targets.len()` rows of width `vocab`). Also returns `dloss/dlogits`.
pub fn masked_cross_entropy<T: Scalar>(logits: &[T], vocab: usize, targets: &[u32]) -> (T, Vec<T>) {
    let n = T::from_f64(targets.len() as f64);
    let mut grad = vec![T::zero(); logits.len()];
    let mut total = T::zero();
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits[r * vocab..(r + 1) * vocab];
        let g = &mut grad[r * vocab..(r + 1) * vocab];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for (gi, &z) in g.iter_mut().zip(row) {
            *gi = (z - max).exp();
            sum += *gi;
        }
        total += sum.ln() + max - row[t as usize];
        for gi in g.iter_mut() {
            *gi = *gi / sum / n;
        }
        g[t as usize] -= T::one() / n;
    }
    (total / n, grad)
}

struct LayerActs<T> {
    ln1: NormStats<T>,
    h1: Vec<T>,
    q: Vec<T>,
    k_full: Vec<T>,
    v_full: Vec<T>,
    uq: Vec<T>,
    uv: Vec<T>,
    probs: Vec<T>,
    ln2: NormStats<T>,
    f_pre: Vec<T>,
}

fn norm_stats<T: Scalar>(rows: usize, d: usize) -> NormStats<T> {
    NormStats {
        normalized: vec![T::zero(); rows * d],
        inv_std: vec![T::zero(); rows],
    }
}

/// Accumulates the input gradient of a layer norm into `dx`.
fn layer_norm_backward<T: Scalar>(dy: &[T], stats: &NormStats<T>, gain: &[T], d: usize, dx: &mut [T]) {
    let n = T::from_f64(d as f64);
    let mut dxhat = vec![T::zero(); d];
    for (r, inv_std) in stats.inv_std.iter().enumerate() {
        let xhat = &stats.normalized[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        for j in 0..d {
            dxhat[j] = dyr[j] * gain[j];
        }
        let mean = dxhat.iter().copied().sum::<T>() / n;
        let mean_x = dot(&dxhat, xhat) / n;
        for (j, out) in dx[r * d..(r + 1) * d].iter_mut().enumerate() {
            *out += *inv_std * (dxhat[j] - mean - xhat[j] * mean_x);
        }
    }
}

/// `dx += dy · W` for a `[d_out × d_in]` weight.
fn linear_backward<T: Scalar>(dy: &[T], rows: usize, lin: &Linear<T>, dx: &mut [T]) {
    let (d_in, d_out) = (lin.d_in(), lin.d_out());
    let w = lin.weight.data();
    for t in 0..rows {
        let dxt = &mut dx[t * d_in..(t + 1) * d_in];
        for (o, &g) in dy[t * d_out..(t + 1) * d_out].iter().enumerate() {
            if g != T::zero() {
                axpy(g, &w[o * d_in..(o + 1) * d_in], dxt);
            }
        }
    }
}

/// Gradients of `out = base + s·(x·Aᵀ)·Bᵀ` given `dout`, with `u = x·Aᵀ`.
#[allow(clippy::too_many_arguments)]
fn lora_backward<T: Scalar>(
    dout: &[T],
    x: &[T],
    u: &[T],
    rows: usize,
    pair: &LoraPair<T>,
    scale: T,
    grad: &mut LoraPair<T>,
    dx: &mut [T],
) {
    let (r, d_in, d_out) = (pair.rank(), pair.d_in(), pair.d_out());
    let mut du = vec![T::zero(); r];
    for t in 0..rows {
        let dt = &dout[t * d_out..(t + 1) * d_out];
        let ut = &u[t * r..(t + 1) * r];
        let db = grad.b.data_mut();
        for (o, &g) in dt.iter().enumerate() {
            axpy(scale * g, ut, &mut db[o * r..(o + 1) * r]);
        }
        du.iter_mut().for_each(|v| *v = T::zero());
        for (o, &g) in dt.iter().enumerate() {
            axpy(scale * g, &pair.b.data()[o * r..(o + 1) * r], &mut du);
        }
        let xt = &x[t * d_in..(t + 1) * d_in];
        let da = grad.a.data_mut();
        let dxt = &mut dx[t * d_in..(t + 1) * d_in];
        for (j, &g) in du.iter().enumerate() {
            axpy(g, xt, &mut da[j * d_in..(j + 1) * d_in]);
            axpy(g, &pair.a.data()[j * d_in..(j + 1) * d_in], dxt);
        }
    }
}

/// Loss and adapter gradients for one encoded example.
pub fn example_loss<T: Scalar>(bundle: &ModelBundle<T>, adapter: &Adapter<T>, example: &EncodedExample) -> Result<LossOutput<T>> {
    let cfg = bundle.config();
    adapter.check_fits(cfg)?;
    let tokens = &example.tokens;
    let (n, d, heads) = (tokens.len(), cfg.d_model, cfg.n_heads);
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size()) {
        return Err(Error::invalid("tokens", alloc::format!("id {bad} outside vocabulary")));
    }
    let lora = adapter.as_lora();
    let prefix = adapter.as_prefix();
    let p = prefix.map_or(0, |a| a.len());
    if p + n > cfg.max_seq_len {
        return Err(Error::Length {
            len: p + n,
            max: cfg.max_seq_len,
        });
    }
    let eps = T::from_f64(cfg.norm_eps);
    let rank = lora.map_or(0, |l| l.rank());
    let scale = lora.map_or(T::zero(), |l| l.scale());

    // Forward, keeping what the reverse pass needs.
    let mut x = vec![T::zero(); n * d];
    for (i, &tok) in tokens.iter().enumerate() {
        let row = &mut x[i * d..(i + 1) * d];
        row.copy_from_slice(bundle.embed.row(tok as usize));
        axpy(T::one(), bundle.pos_embed.row(i), row);
    }
    let mut acts: Vec<LayerActs<T>> = Vec::with_capacity(cfg.n_layers);
    let mut tmp = vec![T::zero(); n * d];
    let mut ctx = vec![T::zero(); n * d];
    for (l, block) in bundle.blocks().iter().enumerate() {
        let mut a = LayerActs {
            ln1: norm_stats(n, d),
            h1: vec![T::zero(); n * d],
            q: vec![T::zero(); n * d],
            k_full: vec![T::zero(); (p + n) * d],
            v_full: vec![T::zero(); (p + n) * d],
            uq: vec![T::zero(); n * rank],
            uv: vec![T::zero(); n * rank],
            probs: vec![T::zero(); heads * n * (p + n)],
            ln2: norm_stats(n, d),
            f_pre: vec![T::zero(); n * cfg.d_ff],
        };
        let (g1, b1) = (block.attn_norm.gain.data(), block.attn_norm.bias.data());
        layer_norm_rows(&x, d, g1, b1, eps, &mut a.h1, Some(&mut a.ln1));
        block.q.project(&a.h1, n, &mut a.q);
        block.k.project(&a.h1, n, &mut a.k_full[p * d..]);
        block.v.project(&a.h1, n, &mut a.v_full[p * d..]);
        if let Some(lora) = lora {
            let layer = &lora.layers()[l];
            if let Some(pair) = &layer.q {
                add_lora_delta(&mut a.q, &a.h1, n, pair, scale, Some(&mut a.uq));
            }
            if let Some(pair) = &layer.v {
                add_lora_delta(&mut a.v_full[p * d..], &a.h1, n, pair, scale, Some(&mut a.uv));
            }
        }
        if let Some(prefix) = prefix.filter(|_| p > 0) {
            let rows = &prefix.layers()[l];
            a.k_full[..p * d].copy_from_slice(rows.keys.data());
            a.v_full[..p * d].copy_from_slice(rows.values.data());
        }
        attend(&a.q, n, &a.k_full, &a.v_full, heads, d, p + 1, &mut ctx, Some(&mut a.probs));
        block.o.project(&ctx, n, &mut tmp);
        axpy(T::one(), &tmp, &mut x);

        let (g2, b2) = (block.ffn_norm.gain.data(), block.ffn_norm.bias.data());
        let mut h2 = vec![T::zero(); n * d];
        layer_norm_rows(&x, d, g2, b2, eps, &mut h2, Some(&mut a.ln2));
        block.ff_in.project(&h2, n, &mut a.f_pre);
        let g: Vec<T> = a.f_pre.iter().map(|&z| gelu(z)).collect();
        block.ff_out.project(&g, n, &mut tmp);
        axpy(T::one(), &tmp, &mut x);
        acts.push(a);
    }
    let mut ln_f = norm_stats(n, d);
    let mut hf = vec![T::zero(); n * d];
    layer_norm_rows(&x, d, bundle.final_norm.gain.data(), bundle.final_norm.bias.data(), eps, &mut hf, Some(&mut ln_f));

    let vocab = cfg.vocab_size();
    let scored = example.sep..n - 1;
    let targets = &tokens[example.sep + 1..];
    let mut logits = Vec::with_capacity(targets.len() * vocab);
    for i in scored.clone() {
        let hi = &hf[i * d..(i + 1) * d];
        logits.extend((0..vocab).map(|t| dot(hi, bundle.lm_head.row(t))));
    }
    let (loss, dlogits) = masked_cross_entropy(&logits, vocab, targets);

    // Reverse pass.
    let mut dh = vec![T::zero(); n * d];
    for (r, i) in scored.enumerate() {
        let dhi = &mut dh[i * d..(i + 1) * d];
        for (t, &g) in dlogits[r * vocab..(r + 1) * vocab].iter().enumerate() {
            axpy(g, bundle.lm_head.row(t), dhi);
        }
    }
    let mut dx = vec![T::zero(); n * d];
    layer_norm_backward(&dh, &ln_f, bundle.final_norm.gain.data(), d, &mut dx);

    let mut grads = adapter.zeros_like();
    let hd = d / heads;
    let att_scale = T::one() / T::from_f64(hd as f64).sqrt();
    for (l, block) in bundle.blocks().iter().enumerate().rev() {
        let a = &acts[l];
        // Feed-forward branch.
        let mut dg = vec![T::zero(); n * cfg.d_ff];
        linear_backward(&dx, n, &block.ff_out, &mut dg);
        for (g, &z) in dg.iter_mut().zip(&a.f_pre) {
            *g *= gelu_grad(z);
        }
        let mut dh2 = vec![T::zero(); n * d];
        linear_backward(&dg, n, &block.ff_in, &mut dh2);
        layer_norm_backward(&dh2, &a.ln2, block.ffn_norm.gain.data(), d, &mut dx);

        // Attention branch.
        let mut dctx = vec![T::zero(); n * d];
        linear_backward(&dx, n, &block.o, &mut dctx);
        let mut dq = vec![T::zero(); n * d];
        let mut dk_full = vec![T::zero(); (p + n) * d];
        let mut dv_full = vec![T::zero(); (p + n) * d];
        let n_kv = p + n;
        let mut ds = vec![T::zero(); n_kv];
        for h in 0..heads {
            let off = h * hd;
            for i in 0..n {
                let vis = p + i + 1;
                let probs = &a.probs[(h * n + i) * n_kv..(h * n + i) * n_kv + vis];
                let dci = &dctx[i * d + off..i * d + off + hd];
                let mut weighted = T::zero();
                for j in 0..vis {
                    let dp = dot(dci, &a.v_full[j * d + off..j * d + off + hd]);
                    ds[j] = dp;
                    weighted += probs[j] * dp;
                    axpy(probs[j], dci, &mut dv_full[j * d + off..j * d + off + hd]);
                }
                let qi = &a.q[i * d + off..i * d + off + hd];
                for j in 0..vis {
                    let s = probs[j] * (ds[j] - weighted) * att_scale;
                    if s != T::zero() {
                        axpy(s, &a.k_full[j * d + off..j * d + off + hd], &mut dq[i * d + off..i * d + off + hd]);
                        axpy(s, qi, &mut dk_full[j * d + off..j * d + off + hd]);
                    }
                }
            }
        }
        let mut dh1 = vec![T::zero(); n * d];
        match &mut grads {
            Adapter::Lora(g) => {
                let layer = &lora.expect("grads mirror adapter").layers()[l];
                let glayer = &mut g.layers_mut()[l];
                if let (Some(pair), Some(gp)) = (&layer.q, glayer.q.as_mut()) {
                    lora_backward(&dq, &a.h1, &a.uq, n, pair, scale, gp, &mut dh1);
                }
                if let (Some(pair), Some(gp)) = (&layer.v, glayer.v.as_mut()) {
                    lora_backward(&dv_full[p * d..], &a.h1, &a.uv, n, pair, scale, gp, &mut dh1);
                }
            }
            Adapter::Prefix(g) if p > 0 => {
                let gl = &mut g.layers_mut()[l];
                gl.keys.data_mut().copy_from_slice(&dk_full[..p * d]);
                gl.values.data_mut().copy_from_slice(&dv_full[..p * d]);
            }
            Adapter::Prefix(_) => {}
        }
        linear_backward(&dq, n, &block.q, &mut dh1);
        linear_backward(&dk_full[p * d..], n, &block.k, &mut dh1);
        linear_backward(&dv_full[p * d..], n, &block.v, &mut dh1);
        layer_norm_backward(&dh1, &a.ln1, block.attn_norm.gain.data(), d, &mut dx);
    }

    Ok(LossOutput { loss, grads })
}

/// Loss and adapter gradients for one QA pair given as content tokens.
pub fn qa_loss<T: Scalar>(
    bundle: &ModelBundle<T>,
    adapter: &Adapter<T>,
    question: &[u32],
    answer: &[u32],
    max_target_len: usize,
) -> Result<LossOutput<T>> {
    let example = encode_example(question, answer, bundle.config().max_seq_len, max_target_len)?;
    example_loss(bundle, adapter, &example)
}

/// Mean of the per-example losses and gradients.
pub fn batch_loss<T: Scalar>(bundle: &ModelBundle<T>, adapter: &Adapter<T>, batch: &[&EncodedExample]) -> Result<LossOutput<T>> {
    let mut parts = Vec::with_capacity(batch.len());
    for ex in batch {
        parts.push(example_loss(bundle, adapter, ex)?);
    }
    Ok(mean_of(adapter, parts))
}

pub(crate) fn mean_of<T: Scalar>(adapter: &Adapter<T>, parts: Vec<LossOutput<T>>) -> LossOutput<T> {
    let k = T::one() / T::from_f64(parts.len() as f64);
    let mut grads = adapter.zeros_like();
    let mut loss = T::zero();
    for part in &parts {
        loss += part.loss;
        for (acc, g) in grads.params_mut().into_iter().zip(part.grads.params()) {
            axpy(T::one(), g.data(), acc.data_mut());
        }
    }
    for t in grads.params_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= k);
    }
    LossOutput { loss: loss * k, grads }
}
