//! Fixed probe prompts answered at checkpoints to watch for collapse.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::degenerate::{detect_degenerate, repetition_ratio, DegenerateThresholds};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbePrompt {
    pub name: String,
    pub text: String,
    pub in_domain: bool,
}

/// One medical question and one general-knowledge question.
pub fn default_probe_prompts() -> Vec<ProbePrompt> {
    alloc::vec![
        ProbePrompt {
            name: "in-domain".into(),
            text: "What can I do about a sore throat and fever?".into(),
            in_domain: true,
        },
        ProbePrompt {
            name: "general".into(),
            text: "中国的首都是哪座城市".into(),
            in_domain: false,
        },
    ]
}

/// Steps at which probes run: every multiple of `interval` up to `total_steps`.
pub fn probe_schedule(total_steps: usize, interval: usize) -> Vec<usize> {
    if interval == 0 {
        return Vec::new();
    }
    (1..=total_steps / interval).map(|k| k * interval).collect()
}

/// Anything that can answer a probe prompt, typically greedy decoding with
/// the current adapter.
pub trait ProbeGenerator {
    fn generate(&mut self, prompt: &str) -> Result<String>;
}

impl<F: FnMut(&str) -> Result<String>> ProbeGenerator for F {
    fn generate(&mut self, prompt: &str) -> Result<String> {
        self(prompt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutput {
    pub prompt: String,
    pub output: String,
    pub length: usize,
    pub repetition_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub step: usize,
    pub outputs: Vec<ProbeOutput>,
    pub degenerate: bool,
    pub repetition_ratio: f64,
    pub mean_length: f64,
}

pub fn run_probes(
    step: usize,
    generator: &mut dyn ProbeGenerator,
    prompts: &[ProbePrompt],
    thresholds: DegenerateThresholds,
) -> Result<ProbeReport> {
    let mut outputs = Vec::with_capacity(prompts.len());
    for p in prompts {
        let output = generator.generate(&p.text)?;
        outputs.push(ProbeOutput {
            prompt: p.text.clone(),
            length: output.chars().count(),
            repetition_ratio: repetition_ratio(&output),
            output,
        });
    }
    let texts: Vec<&str> = outputs.iter().map(|o| o.output.as_str()).collect();
    let summary = detect_degenerate(&texts, thresholds);
    Ok(ProbeReport {
        step,
        outputs,
        degenerate: summary.degenerate,
        repetition_ratio: summary.repetition_ratio,
        mean_length: summary.mean_length,
    })
}
