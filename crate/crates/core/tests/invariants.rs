use nglm_core::adapters::{merge_lora, LoraTargets};
use nglm_core::generate::{generate, FloatDecoder};
use nglm_core::prompt::{design_prompt, DiseaseDoc, KnowledgeLibrary, PromptTemplate};
use nglm_core::quant::{quantize_model, QuantPolicy};
use nglm_core::sampler::{SamplerConfig, SeedableRng, SplitMix64};
use nglm_core::train::{TrainConfig, Trainer};
use nglm_core::{Adapter, KvCache, LoraAdapter, ModelBundle, ModelConfig, PrefixAdapter};
use proptest::prelude::*;

fn tokens() -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(4u32..260, 1..20)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn doc(id: &str, name: &str, aliases: &[&str]) -> DiseaseDoc {
    DiseaseDoc {
        id: id.into(),
        name: name.into(),
        aliases: aliases.iter().map(|s| s.to_string()).collect(),
        symptoms: format!("{name} symptoms"),
        diagnosis: "exam".into(),
        treatment: "rest".into(),
        prevention: "hygiene".into(),
        source: "synthetic".into(),
    }
}

fn library() -> KnowledgeLibrary {
    KnowledgeLibrary::new(vec![
        doc("flu", "influenza", &["流感"]),
        doc("cold", "common cold", &["感冒"]),
        doc("asthma", "asthma", &["哮喘"]),
    ])
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn merged_weights_match_runtime_lora(seed in 0u64..1000, rank in 1usize..5, toks in tokens()) {
        let cfg = ModelConfig::tiny(2, 16, 2);
        let bundle = ModelBundle::<f64>::random(cfg.clone(), seed).unwrap();
        let lora = LoraAdapter::random(&cfg, rank, 8.0, LoraTargets::QV, 0.3, seed + 1).unwrap();
        let merged = merge_lora(&bundle, &lora).unwrap();
        let a = bundle.forward_all(Some(&Adapter::Lora(lora)), &toks, None).unwrap();
        let b = merged.forward_all(None, &toks, None).unwrap();
        prop_assert!(max_diff(a.data(), b.data()) < 1e-9);
    }

    #[test]
    fn cached_decoding_matches_full_forward(seed in 0u64..1000, toks in tokens(), split in 1usize..20, prefix in any::<bool>()) {
        let cfg = ModelConfig::tiny(2, 16, 2);
        let bundle = ModelBundle::<f64>::random(cfg.clone(), seed).unwrap();
        let adapter = prefix.then(|| Adapter::Prefix(PrefixAdapter::random(&cfg, 3, 0.4, seed)));
        let split = split.min(toks.len());
        let full = bundle.forward_all(adapter.as_ref(), &toks, None).unwrap();
        let mut cache = KvCache::new(&cfg);
        let head = bundle.forward_all(adapter.as_ref(), &toks[..split], Some(&mut cache)).unwrap();
        let mut rows: Vec<f64> = head.data().to_vec();
        for &t in &toks[split..] {
            rows.extend_from_slice(bundle.forward_all(adapter.as_ref(), &[t], Some(&mut cache)).unwrap().data());
        }
        prop_assert!(max_diff(full.data(), &rows) < 1e-9);
    }

    #[test]
    fn designed_prompts_are_idempotent(text in "[a-z 流感哮喘,.?]{0,40}", inject in prop::option::of(0usize..3)) {
        let lib = library();
        let template = PromptTemplate::default();
        let terms = ["influenza", "感冒", "asthma"];
        let text = match inject {
            Some(i) => format!("{text} {}", terms[i]),
            None => text,
        };
        let once = design_prompt(&text, &lib, &template);
        prop_assert_eq!(&design_prompt(&once.prompt, &lib, &template).prompt, &once.prompt);
        if once.matched_ids.is_empty() {
            prop_assert_eq!(&once.prompt, &text);
        } else {
            prop_assert!(once.prompt.contains(&text));
        }
    }

    #[test]
    fn quantized_decoding_stays_close_to_float(seed in 0u64..100, toks in tokens()) {
        let cfg = ModelConfig::tiny(2, 32, 2);
        let bundle = ModelBundle::<f32>::random(cfg, seed).unwrap();
        let q = quantize_model(&bundle, None, QuantPolicy::QuantBaseKeepAdapterFloat, 32).unwrap();
        let a = bundle.forward_all(None, &toks, None).unwrap();
        let b = nglm_core::generate::Decoder::forward_all(&q, &toks, None).unwrap();
        let spread = a.data().iter().map(|x| x.abs()).fold(0.0f32, f32::max);
        let worst = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        prop_assert!(worst <= 0.5 * spread.max(1.0), "{worst} vs {spread}");
    }
}

#[test]
fn training_never_touches_base_weights() {
    let cfg = ModelConfig::tiny(1, 16, 2);
    let bundle = ModelBundle::<f32>::random(cfg.clone(), 3).unwrap();
    let digest = bundle.weight_digest();
    let pairs = vec![(vec![10, 11, 12], vec![20, 21]), (vec![13, 14], vec![22])];
    for adapter in [
        Adapter::Lora(LoraAdapter::random(&cfg, 2, 4.0, LoraTargets::QV, 0.1, 1).unwrap()),
        Adapter::Prefix(PrefixAdapter::random(&cfg, 2, 0.1, 1)),
    ] {
        let tc = TrainConfig {
            max_steps: Some(5),
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let before = adapter.clone();
        let mut t = Trainer::new(tc, &cfg, adapter, &pairs).unwrap();
        while !t.is_done() {
            t.step(&bundle).unwrap();
        }
        assert_eq!(bundle.weight_digest(), digest);
        assert_ne!(t.adapter().params()[0].data(), before.params()[0].data());
    }
}

#[test]
fn generation_is_reproducible_from_the_seed() {
    let cfg = ModelConfig::tiny(2, 16, 2);
    let bundle = ModelBundle::<f32>::random(cfg, 9).unwrap();
    let dec = FloatDecoder::new(&bundle, None);
    let sc = SamplerConfig {
        max_new_tokens: 16,
        ..SamplerConfig::default()
    };
    let run = || {
        let mut rng = SplitMix64::seed_from_u64(sc.seed);
        let mut pieces = String::new();
        let g = generate(&dec, &[1, 50, 60, 3], &sc, &mut rng, |d| pieces.push_str(d)).unwrap();
        assert_eq!(pieces, g.text);
        g.tokens
    };
    assert_eq!(run(), run());
}
