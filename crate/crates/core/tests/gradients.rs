//! Analytic adapter gradients against central differences in f64.

use nglm_core::adapters::{LoraAdapter, LoraTargets, PrefixAdapter};
use nglm_core::train::{encode_example, example_loss, masked_cross_entropy, EncodedExample};
use nglm_core::{Adapter, ModelBundle, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

const H: f64 = 1e-5;

/// Loss through the inference forward, independent of the training pass.
fn reference_loss(bundle: &ModelBundle<f64>, adapter: &Adapter<f64>, ex: &EncodedExample) -> f64 {
    let logits = bundle.forward_all(Some(adapter), &ex.tokens, None).unwrap();
    let rows: Vec<f64> = (ex.sep..ex.tokens.len() - 1).flat_map(|i| logits.row(i).to_vec()).collect();
    masked_cross_entropy(&rows, bundle.config().vocab_size(), &ex.tokens[ex.sep + 1..]).0
}

fn max_relative_error(bundle: &ModelBundle<f64>, adapter: &Adapter<f64>, ex: &EncodedExample) -> f64 {
    let analytic = example_loss(bundle, adapter, ex).unwrap().grads;
    let mut worst = 0.0f64;
    let mut probe = adapter.clone();
    let n_tensors = adapter.params().len();
    for t in 0..n_tensors {
        let len = adapter.params()[t].len();
        for i in 0..len {
            let orig = probe.params()[t].data()[i];
            probe.params_mut()[t].data_mut()[i] = orig + H;
            let up = reference_loss(bundle, &probe, ex);
            probe.params_mut()[t].data_mut()[i] = orig - H;
            let down = reference_loss(bundle, &probe, ex);
            probe.params_mut()[t].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * H);
            let a = analytic.params()[t].data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

fn random_pair(rng: &mut SplitMix64) -> (Vec<u32>, Vec<u32>) {
    let q = (0..rng.random_range(2..8)).map(|_| rng.random_range(4..260)).collect();
    let a = (0..rng.random_range(1..6)).map(|_| rng.random_range(4..260)).collect();
    (q, a)
}

fn check(kind: &str, make: impl Fn(&ModelConfig, u64) -> Adapter<f64>) {
    let cfg = ModelConfig::tiny(2, 16, 2);
    let mut rng = SplitMix64::seed_from_u64(11);
    let mut worst = 0.0f64;
    for k in 0..20u64 {
        let bundle = ModelBundle::<f64>::random(cfg.clone(), 100 + k).unwrap();
        let adapter = make(&cfg, 200 + k);
        let (q, a) = random_pair(&mut rng);
        let ex = encode_example(&q, &a, cfg.max_seq_len - 8, 100).unwrap();
        worst = worst.max(max_relative_error(&bundle, &adapter, &ex));
    }
    println!("{kind}: max relative error {worst:.3e}");
    assert!(worst <= 1e-4, "{kind}: {worst}");
}

#[test]
fn lora_gradients_match_central_differences() {
    check("lora", |cfg, seed| Adapter::Lora(LoraAdapter::random(cfg, 4, 8.0, LoraTargets::QV, 0.3, seed).unwrap()));
}

#[test]
fn prefix_gradients_match_central_differences() {
    check("prefix", |cfg, seed| Adapter::Prefix(PrefixAdapter::random(cfg, 4, 0.5, seed)));
}
