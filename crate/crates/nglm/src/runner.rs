//! Training runs on disk: step-numbered adapter checkpoints and a probe log.
//!
//! A run directory holds `step-000500.ngla`, `step-001000.ngla`, … written
//! every `probe_interval` steps, and `probes.jsonl` with one
//! [`ProbeLogLine`] per probe prompt per checkpoint.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nglm_core::generate::{FloatDecoder, GreedyProbe};
use nglm_core::train::{run_probes, DegenerateThresholds, ProbePrompt, ProbeReport, StepReport, Trainer};
use nglm_core::{Adapter, ModelBundle};
use serde::{Deserialize, Serialize};

use crate::formats::{self, FormatError};

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub checkpoint_dir: PathBuf,
    pub prompts: Vec<ProbePrompt>,
    pub thresholds: DegenerateThresholds,
    pub probe_max_new_tokens: usize,
}

impl RunOptions {
    pub fn new(checkpoint_dir: impl Into<PathBuf>) -> Self {
        Self {
            checkpoint_dir: checkpoint_dir.into(),
            prompts: nglm_core::train::default_probe_prompts(),
            thresholds: DegenerateThresholds::default(),
            probe_max_new_tokens: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeLogLine {
    pub step: usize,
    pub prompt: String,
    pub output: String,
    pub length: usize,
    pub repetition_ratio: f64,
    /// Checkpoint-level verdict over all prompts.
    pub degenerate: bool,
    pub mean_length: f64,
}

impl ProbeLogLine {
    pub fn from_report(report: &ProbeReport) -> Vec<Self> {
        report
            .outputs
            .iter()
            .map(|o| Self {
                step: report.step,
                prompt: o.prompt.clone(),
                output: o.output.clone(),
                length: o.length,
                repetition_ratio: o.repetition_ratio,
                degenerate: report.degenerate,
                mean_length: report.mean_length,
            })
            .collect()
    }
}

#[derive(Debug)]
pub struct RunSummary {
    pub adapter: Adapter<f32>,
    pub steps: Vec<StepReport>,
    pub probes: Vec<ProbeReport>,
    pub checkpoints: Vec<PathBuf>,
    pub base_digest: [u8; 32],
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("training aborted at step {step}: non-finite loss; last good checkpoint: {last_checkpoint:?}")]
    NonFinite { step: usize, last_checkpoint: Option<PathBuf> },
    #[error("base weights changed during training")]
    BaseMutated,
    #[error(transparent)]
    Core(#[from] nglm_core::Error),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step-{step:06}.ngla"))
}

pub fn probe_log_path(dir: &Path) -> PathBuf {
    dir.join("probes.jsonl")
}

/// Runs `trainer` to completion with probes and checkpoints.
pub fn run_training(
    bundle: &ModelBundle<f32>,
    mut trainer: Trainer<f32>,
    options: &RunOptions,
    mut on_step: impl FnMut(&StepReport),
) -> Result<RunSummary, RunError> {
    let digest = bundle.weight_digest();
    fs::create_dir_all(&options.checkpoint_dir)?;
    let mut probe_log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(probe_log_path(&options.checkpoint_dir))?;
    let interval = trainer.config().probe_interval;
    let mut summary = RunSummary {
        adapter: trainer.adapter().clone(),
        steps: Vec::new(),
        probes: Vec::new(),
        checkpoints: Vec::new(),
        base_digest: digest,
    };
    while !trainer.is_done() {
        let report = match trainer.step(bundle) {
            Ok(r) => r,
            Err(nglm_core::Error::NonFiniteLoss { step }) => {
                log::error!("non-finite loss at step {step}");
                return Err(RunError::NonFinite {
                    step,
                    last_checkpoint: summary.checkpoints.last().cloned(),
                });
            }
            Err(e) => return Err(e.into()),
        };
        on_step(&report);
        let step = report.step;
        summary.steps.push(report);
        if interval > 0 && step % interval == 0 {
            let path = checkpoint_path(&options.checkpoint_dir, step);
            formats::save_adapter(trainer.adapter(), &path)?;
            let mut probe = GreedyProbe {
                decoder: FloatDecoder::new(bundle, Some(trainer.adapter())),
                max_new_tokens: options.probe_max_new_tokens,
            };
            let probes = run_probes(step, &mut probe, &options.prompts, options.thresholds)?;
            for line in ProbeLogLine::from_report(&probes) {
                serde_json::to_writer(&mut probe_log, &line).map_err(std::io::Error::from)?;
                probe_log.write_all(b"\n")?;
            }
            probe_log.flush()?;
            if probes.degenerate {
                log::warn!("step {step}: probes look degenerate (repetition {:.3})", probes.repetition_ratio);
            }
            summary.checkpoints.push(path);
            summary.probes.push(probes);
        }
    }
    if bundle.weight_digest() != digest {
        return Err(RunError::BaseMutated);
    }
    summary.adapter = trainer.into_adapter();
    Ok(summary)
}
