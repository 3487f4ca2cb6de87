//! The `nglm` command line.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nglm_core::adapters::{init_lora, init_prefix, LoraTargets, DEFAULT_ALPHA, DEFAULT_RANK};
use nglm_core::generate::{perplexity, FloatDecoder, GreedyProbe};
use nglm_core::prompt::PromptTemplate;
use nglm_core::quant::{quantize_model, QuantPolicy, DEFAULT_GROUP_SIZE};
use nglm_core::train::{encode_example, run_probes, EncodedExample, LrSchedule, TrainConfig, Trainer};
use nglm_core::{Adapter, ModelBundle, ModelConfig};

use crate::config::Config;
use crate::corpus::{self, LoadMode, QaRecord};
use crate::formats;
use crate::library;
use crate::runner::{run_training, RunOptions};
use crate::service::{http, ChatService, SamplerOverrides, ServedModel, ServiceOptions};
use crate::translate::{self, HttpConfig, HttpTransport, RetryPolicy, SourceItem, TranslatorClient};

#[derive(Debug, Parser)]
#[command(name = "nglm", version, about = "Desk-scale dialogue model toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a freshly initialized base model.
    Init(InitArgs),
    /// Serve the HTTP chat API.
    Serve(ServeArgs),
    /// Interactive terminal chat over the same pipeline.
    Chat(ChatArgs),
    /// Fine-tune an adapter on a QA corpus.
    Train(TrainArgs),
    /// Quantize base weights to INT4.
    Quantize(QuantizeArgs),
    /// Perplexity over a QA corpus.
    EvalPpl(EvalArgs),
    /// Answer the probe prompts with a checkpoint.
    Probe(ProbeArgs),
    /// Validate a QA corpus and print its statistics.
    Ingest(IngestArgs),
    /// Validate a knowledge library and optionally install it.
    IngestLibrary(IngestLibraryArgs),
    /// Build a parallel corpus through an external translator.
    Translate(TranslateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Desk,
    Tiny,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write a starter config file here.
    #[arg(long)]
    pub write_config: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct ModelArgs {
    /// TOML config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    #[arg(long)]
    pub quantized: Option<PathBuf>,
    #[arg(long)]
    pub library: Option<PathBuf>,
    #[arg(long)]
    pub template: Option<PathBuf>,
    /// Event-log directory.
    #[arg(long)]
    pub persist: Option<PathBuf>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
}

impl ModelArgs {
    pub fn resolve(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        let set = |dst: &mut Option<PathBuf>, src: &Option<PathBuf>| {
            if src.is_some() {
                dst.clone_from(src);
            }
        };
        set(&mut cfg.model.path, &self.model);
        set(&mut cfg.model.adapter, &self.adapter);
        set(&mut cfg.model.quantized, &self.quantized);
        set(&mut cfg.prompt.library, &self.library);
        set(&mut cfg.prompt.template, &self.template);
        set(&mut cfg.persistence.dir, &self.persist);
        if let Some(t) = self.temperature {
            cfg.sampler.temperature = t;
        }
        if let Some(p) = self.top_p {
            cfg.sampler.top_p = p;
        }
        if let Some(s) = self.seed {
            cfg.sampler.seed = s;
        }
        if let Some(n) = self.max_new_tokens {
            cfg.sampler.max_new_tokens = n;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Print the designed prompt and match metadata after each reply.
    #[arg(long)]
    pub debug: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum Method {
    Lora,
    Prefix,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value = "lora")]
    pub method: Method,
    #[arg(long, default_value_t = DEFAULT_RANK)]
    pub rank: usize,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    /// LoRA target projections: q, v or qv.
    #[arg(long, default_value = "qv")]
    pub targets: String,
    #[arg(long, default_value_t = 8)]
    pub prefix_len: usize,
    /// Total optimizer steps; one epoch when omitted.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 500)]
    pub probe_interval: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    pub lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().lion_beta1)]
    pub beta1: f64,
    #[arg(long, default_value_t = TrainConfig::default().lion_beta2)]
    pub beta2: f64,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    pub warmup: usize,
    /// Learning-rate decay after warmup.
    #[arg(long, value_enum, default_value = "constant")]
    pub schedule: ScheduleArg,
    /// Checkpoint and probe-log directory.
    #[arg(long, default_value = "checkpoints")]
    pub checkpoints: PathBuf,
    /// Final adapter file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScheduleArg {
    Constant,
    Linear,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PolicyArg {
    Merge,
    FloatAdapter,
}

impl From<PolicyArg> for QuantPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Merge => QuantPolicy::MergeThenQuantize,
            PolicyArg::FloatAdapter => QuantPolicy::QuantBaseKeepAdapterFloat,
        }
    }
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "float-adapter")]
    pub policy: PolicyArg,
    #[arg(long, default_value_t = DEFAULT_GROUP_SIZE)]
    pub group_size: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Report float and quantized perplexity on this QA corpus.
    #[arg(long)]
    pub eval: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    #[arg(long)]
    pub quantized: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub max_new_tokens: usize,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub path: PathBuf,
    /// Fail on the first malformed line.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct IngestLibraryArgs {
    #[arg(long)]
    pub path: PathBuf,
    /// Copy the validated library here.
    #[arg(long)]
    pub install: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    /// Source texts, one per line; the origin id is the line number.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Parallel corpus output; an existing file is resumed.
    #[arg(long)]
    pub out: PathBuf,
    /// Chat-completion URL, or `mock://uppercase` for an offline run.
    #[arg(long)]
    pub endpoint: String,
    #[arg(long, default_value = "gpt-3.5-turbo")]
    pub remote_model: String,
    #[arg(long, default_value = translate::DEFAULT_TOKEN_ENV)]
    pub token_env: String,
    #[arg(long, default_value_t = RetryPolicy::default().max_attempts)]
    pub max_attempts: u32,
    #[arg(long, default_value_t = 1)]
    pub parallelism: usize,
    /// File holding the instruction sent with every text.
    #[arg(long)]
    pub instruction: Option<PathBuf>,
    /// Also write the pairs as a QA training corpus here.
    #[arg(long)]
    pub export: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Init(a) => init(a),
        Command::Serve(a) => serve(a),
        Command::Chat(a) => chat(a),
        Command::Train(a) => train(a),
        Command::Quantize(a) => quantize(a),
        Command::EvalPpl(a) => eval_ppl(a),
        Command::Probe(a) => probe(a),
        Command::Ingest(a) => ingest(a),
        Command::IngestLibrary(a) => ingest_library(a),
        Command::Translate(a) => translate_cmd(a),
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn init(a: InitArgs) -> Result<()> {
    let config = match a.preset {
        Preset::Desk => ModelConfig::desk(),
        Preset::Tiny => ModelConfig::tiny(2, 16, 2),
    };
    let bundle = ModelBundle::<f32>::random(config, a.seed)?;
    formats::save_model(&bundle, &a.out)?;
    eprintln!("wrote {} ({} parameters)", a.out.display(), bundle.parameter_count());
    if let Some(path) = a.write_config {
        let mut cfg = Config::default();
        cfg.model.path = Some(a.out.clone());
        std::fs::write(&path, cfg.to_toml())?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

/// Loads the model, library and template a config names.
pub fn build_service(cfg: &Config) -> Result<ChatService> {
    let model = match (&cfg.model.quantized, &cfg.model.path) {
        (Some(q), _) => {
            if cfg.model.adapter.is_some() {
                bail!("a quantized model carries its own adapter; drop the adapter path");
            }
            ServedModel::Quantized(formats::load_quantized(q).with_context(|| format!("loading {}", q.display()))?)
        }
        (None, Some(p)) => {
            let bundle = formats::load_model(p).with_context(|| format!("loading {}", p.display()))?;
            let adapter = cfg
                .model
                .adapter
                .as_deref()
                .map(|a| formats::load_adapter(a).with_context(|| format!("loading {}", a.display())))
                .transpose()?;
            if let Some(a) = &adapter {
                a.check_fits(bundle.config())?;
            }
            ServedModel::Float { bundle, adapter }
        }
        (None, None) => bail!("no model configured (set [model] path or pass --model)"),
    };
    let library = cfg.prompt.library.as_deref().map(library::load_library).transpose()?;
    let template = match &cfg.prompt.template {
        Some(p) => library::load_template(p)?,
        None => PromptTemplate::default(),
    }
    .with_section_budget(cfg.prompt.section_budget);
    let sampler = cfg.sampler.to_config();
    sampler.validate()?;
    let options = ServiceOptions {
        sampler,
        library,
        template,
        thresholds: cfg.degenerate.thresholds(),
        persist_dir: cfg.persistence.dir.clone(),
    };
    Ok(ChatService::new(model, options)?)
}

fn serve(a: ServeArgs) -> Result<()> {
    let mut cfg = a.model.resolve()?;
    if let Some(h) = a.host {
        cfg.server.host = h;
    }
    if let Some(p) = a.port {
        cfg.server.port = p;
    }
    let service = Arc::new(build_service(&cfg)?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((cfg.server.host.as_str(), cfg.server.port)).await?;
        log::info!("listening on http://{}", listener.local_addr()?);
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, http::router(service))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        anyhow::Ok(())
    })
}

fn chat(a: ChatArgs) -> Result<()> {
    let cfg = a.model.resolve()?;
    let service = build_service(&cfg)?;
    let id = service.create_session(&SamplerOverrides::default())?;
    let stdin = std::io::stdin();
    let mut out = std::io::stdout();
    eprintln!("session {id}; empty line or Ctrl-D quits");
    loop {
        write!(out, "> ")?;
        out.flush()?;
        let mut line = String::new();
        if stdin.lock().read_line(&mut line)? == 0 || line.trim().is_empty() {
            break;
        }
        let reply = service.post_message(id, line.trim_end(), a.debug, |t| {
            print!("{}", t.text);
            let _ = std::io::stdout().flush();
        })?;
        println!();
        if reply.repetition_flag {
            eprintln!("[repetition {:.2}]", reply.repetition_ratio);
        }
        if a.debug {
            eprintln!(
                "[matched {:?}, stop {:?}, {:.0} ms]\n{}",
                reply.matched_doc_ids,
                reply.stop,
                reply.latency_ms,
                reply.designed_prompt.unwrap_or_default()
            );
        }
    }
    service.flush_log()?;
    Ok(())
}

/// Token pairs for every record of a QA corpus file.
pub fn corpus_pairs(path: &Path, config: &ModelConfig) -> Result<Vec<(Vec<u32>, Vec<u32>)>> {
    let loaded = corpus::load_qa_corpus(path, LoadMode::Lenient)?;
    if !loaded.errors.is_empty() {
        log::warn!("{}: {} malformed lines skipped", path.display(), loaded.errors.len());
    }
    if loaded.records.is_empty() {
        bail!("{} holds no usable records", path.display());
    }
    Ok(qa_pairs(&loaded.records, config))
}

pub fn qa_pairs(records: &[QaRecord], config: &ModelConfig) -> Vec<(Vec<u32>, Vec<u32>)> {
    let tok = config.tokenizer();
    records.iter().map(|r| (tok.encode(&r.question), tok.encode(&r.answer))).collect()
}

pub fn eval_examples(pairs: &[(Vec<u32>, Vec<u32>)], config: &ModelConfig) -> Result<Vec<EncodedExample>> {
    let tc = TrainConfig::default();
    pairs
        .iter()
        .map(|(q, a)| Ok(encode_example(q, a, config.max_seq_len.min(tc.max_seq_len), tc.max_target_len)?))
        .collect()
}

fn train(a: TrainArgs) -> Result<()> {
    let bundle: ModelBundle<f32> = formats::load_model(&a.model)?;
    let cfg = bundle.config().clone();
    let pairs = corpus_pairs(&a.corpus, &cfg)?;
    let adapter = match a.method {
        Method::Lora => Adapter::Lora(init_lora(&cfg, a.rank, a.alpha, LoraTargets::parse(&a.targets)?, a.seed)?),
        Method::Prefix => Adapter::Prefix(init_prefix(&cfg, a.prefix_len, a.seed)),
    };
    let fraction = nglm_core::adapters::trainable_fraction(adapter.trainable_count(), bundle.parameter_count());
    eprintln!(
        "{} trainable parameters ({:.3}% of {})",
        adapter.trainable_count(),
        100.0 * fraction,
        bundle.parameter_count() + adapter.trainable_count()
    );
    let tc = TrainConfig {
        batch_size: a.batch_size,
        learning_rate: a.lr,
        max_steps: a.steps,
        lion_beta1: a.beta1,
        lion_beta2: a.beta2,
        weight_decay: a.weight_decay,
        warmup_steps: a.warmup,
        schedule: match a.schedule {
            ScheduleArg::Constant => LrSchedule::Constant,
            ScheduleArg::Linear => LrSchedule::Linear,
        },
        probe_interval: a.probe_interval,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let trainer = Trainer::new(tc, &cfg, adapter, &pairs)?;
    let total = trainer.total_steps();
    let summary = run_training(&bundle, trainer, &RunOptions::new(&a.checkpoints), |r| {
        if r.step % 50 == 0 || r.step == total {
            eprintln!("step {:>6}/{total} loss {:.4} lr {:.2e}", r.step, r.loss, r.learning_rate);
        }
    })?;
    for p in &summary.probes {
        eprintln!(
            "probe @{}: degenerate={} repetition={:.3} mean_len={:.1}",
            p.step, p.degenerate, p.repetition_ratio, p.mean_length
        );
    }
    formats::save_adapter(&summary.adapter, &a.out)?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn quantize(a: QuantizeArgs) -> Result<()> {
    let bundle: ModelBundle<f32> = formats::load_model(&a.model)?;
    let adapter: Option<Adapter<f32>> = a.adapter.as_deref().map(formats::load_adapter).transpose()?;
    let q = quantize_model(&bundle, adapter.as_ref(), a.policy.into(), a.group_size)?;
    formats::save_quantized(&q, &a.out)?;
    let fp = q.footprint();
    let mut report = serde_json::json!({
        "policy": q.policy.name(),
        "group_size": q.group_size,
        "float_weight_bytes": fp.float_weight_bytes,
        "quantized_weight_bytes": fp.quantized_weight_bytes,
        "float_other_bytes": fp.float_other_bytes,
        "weight_reduction": fp.reduction(),
    });
    if let Some(path) = a.eval {
        let examples = eval_examples(&corpus_pairs(&path, bundle.config())?, bundle.config())?;
        let float = perplexity(&FloatDecoder::new(&bundle, adapter.as_ref()), &examples)?;
        let quant = perplexity(&q, &examples)?;
        report["float_perplexity"] = float.into();
        report["quantized_perplexity"] = quant.into();
        report["relative_change"] = ((quant - float) / float).into();
    }
    print_json(&report)
}

fn eval_ppl(a: EvalArgs) -> Result<()> {
    let (ppl, config) = match (&a.quantized, &a.model) {
        (Some(q), _) => {
            let q = formats::load_quantized(q)?;
            let cfg = q.model.config().clone();
            let ex = eval_examples(&corpus_pairs(&a.corpus, &cfg)?, &cfg)?;
            (perplexity(&q, &ex)?, cfg)
        }
        (None, Some(m)) => {
            let bundle: ModelBundle<f32> = formats::load_model(m)?;
            let adapter: Option<Adapter<f32>> = a.adapter.as_deref().map(formats::load_adapter).transpose()?;
            let cfg = bundle.config().clone();
            let ex = eval_examples(&corpus_pairs(&a.corpus, &cfg)?, &cfg)?;
            (perplexity(&FloatDecoder::new(&bundle, adapter.as_ref()), &ex)?, cfg)
        }
        (None, None) => bail!("pass --model or --quantized"),
    };
    print_json(&serde_json::json!({ "perplexity": ppl, "vocab_size": config.vocab_size() }))
}

fn probe(a: ProbeArgs) -> Result<()> {
    let bundle: ModelBundle<f32> = formats::load_model(&a.model)?;
    let adapter: Option<Adapter<f32>> = a.adapter.as_deref().map(formats::load_adapter).transpose()?;
    let mut g = GreedyProbe {
        decoder: FloatDecoder::new(&bundle, adapter.as_ref()),
        max_new_tokens: a.max_new_tokens,
    };
    let prompts = nglm_core::train::default_probe_prompts();
    let report = run_probes(0, &mut g, &prompts, Default::default())?;
    print_json(&report)
}

fn ingest(a: IngestArgs) -> Result<()> {
    let mode = if a.strict { LoadMode::Strict } else { LoadMode::Lenient };
    let loaded = corpus::load_qa_corpus(&a.path, mode)?;
    print_json(&serde_json::json!({
        "records": loaded.records.len(),
        "stats": loaded.stats,
        "errors": loaded.errors,
    }))
}

fn ingest_library(a: IngestLibraryArgs) -> Result<()> {
    let lib = library::load_library(&a.path)?;
    let terms: usize = lib.docs().iter().map(|d| 1 + d.aliases.len()).sum();
    if let Some(dest) = &a.install {
        std::fs::copy(&a.path, dest)?;
    }
    print_json(&serde_json::json!({ "docs": lib.len(), "terms": terms, "installed": a.install }))
}

fn translate_cmd(a: TranslateArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let sources: Vec<SourceItem> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| SourceItem {
            origin: (i + 1).to_string(),
            text: l.to_string(),
        })
        .collect();
    let retry = RetryPolicy {
        max_attempts: a.max_attempts,
        ..RetryPolicy::default()
    };
    let mut client = if a.endpoint == "mock://uppercase" {
        TranslatorClient::new(translate::UppercaseTransport, "mock-uppercase")
    } else {
        let http = HttpTransport::new(HttpConfig {
            endpoint: a.endpoint.clone(),
            model: a.remote_model.clone(),
            token_env: a.token_env.clone(),
            ..HttpConfig::default()
        })?;
        TranslatorClient::new(http, a.remote_model.clone())
    }
    .with_retry(retry);
    if let Some(p) = &a.instruction {
        client = client.with_instruction(std::fs::read_to_string(p)?.trim_end());
    }
    let report = match translate::translate_file(&client, &sources, &a.out, a.parallelism) {
        Ok(r) => r,
        Err(translate::TranslateError::Auth { origin, message, report }) => {
            eprintln!("aborted at item {origin}: {message}; {} pairs kept", report.records.len());
            bail!("translator authentication failed");
        }
        Err(e) => return Err(e.into()),
    };
    for f in report.failed() {
        eprintln!("item {} failed: {:?}", f.origin, f.status);
    }
    if let Some(path) = &a.export {
        let all = corpus::load_parallel_corpus(&a.out)?;
        corpus::export_training_pairs(&all, corpus::DEFAULT_EXPORT_INSTRUCTION, path)?;
    }
    print_json(&serde_json::json!({
        "translated": report.records.len(),
        "resumed": report.resumed,
        "failed": report.failed().count(),
        "retries": report.total_retries(),
    }))
}
