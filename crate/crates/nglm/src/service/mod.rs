//! The chat service: sessions, context assembly, streamed generation,
//! repetition flags, metering and the event log. [`http`] exposes it over
//! HTTP.

pub mod http;
pub mod metrics;
pub mod persist;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use chrono::{DateTime, Utc};
use nglm_core::generate::{encode_prompt, generate, Decoder, FloatDecoder, StopReason};
use nglm_core::prompt::{design_prompt, DesignedPrompt, KnowledgeLibrary, PromptTemplate};
use nglm_core::quant::QuantizedBundle;
use nglm_core::sampler::{SamplerConfig, SplitMix64};
use nglm_core::train::{detect_degenerate, DegenerateThresholds};
use nglm_core::{Adapter, KvCache, ModelBundle, ModelConfig, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uuid::Uuid;

use metrics::{Meter, ServiceMetrics};
use persist::{EventLog, LogEvent};

/// A metrics snapshot is logged after every this many replies.
const METRICS_EVERY: u64 = 10;

/// Weights the service answers with.
#[derive(Debug)]
pub enum ServedModel {
    Float {
        bundle: ModelBundle<f32>,
        adapter: Option<Adapter<f32>>,
    },
    Quantized(QuantizedBundle),
}

impl ServedModel {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Float { .. } => "float",
            Self::Quantized(_) => "quantized",
        }
    }

    /// SHA-256 over the serialized weights and adapter.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        match self {
            Self::Float { bundle, adapter } => {
                h.update(crate::formats::encode_model(bundle));
                if let Some(a) = adapter {
                    h.update(crate::formats::encode_adapter(a));
                }
            }
            Self::Quantized(q) => h.update(crate::formats::encode_quantized(q)),
        }
        h.finalize().into()
    }
}

impl Decoder for ServedModel {
    fn config(&self) -> &ModelConfig {
        match self {
            Self::Float { bundle, .. } => bundle.config(),
            Self::Quantized(q) => q.model.config(),
        }
    }

    fn adapter(&self) -> Option<&Adapter<f32>> {
        match self {
            Self::Float { adapter, .. } => adapter.as_ref(),
            Self::Quantized(q) => q.adapter.as_ref(),
        }
    }

    fn forward_all(&self, tokens: &[u32], cache: Option<&mut KvCache<f32>>) -> nglm_core::Result<Tensor<f32>> {
        match self {
            Self::Float { bundle, adapter } => FloatDecoder::new(bundle, adapter.as_ref()).forward_all(tokens, cache),
            Self::Quantized(q) => q.forward_all(tokens, cache),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
    pub timestamp: DateTime<Utc>,
    pub tokens: usize,
}

/// Per-session sampler settings; unset fields take the service defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerOverrides {
    pub temperature: Option<f64>,
    pub top_p: Option<f64>,
    pub seed: Option<u64>,
    pub max_new_tokens: Option<usize>,
}

impl SamplerOverrides {
    pub fn apply(&self, base: &SamplerConfig) -> Result<SamplerConfig, ServiceError> {
        let cfg = SamplerConfig {
            temperature: self.temperature.unwrap_or(base.temperature),
            top_p: self.top_p.unwrap_or(base.top_p),
            seed: self.seed.unwrap_or(base.seed),
            max_new_tokens: self.max_new_tokens.unwrap_or(base.max_new_tokens),
            stop_tokens: base.stop_tokens.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("session {0} not found")]
    NotFound(Uuid),
    #[error("invalid {field}: {message}")]
    Invalid { field: String, message: String },
    #[error("generation failed: {0}")]
    Generation(nglm_core::Error),
    #[error("persistence: {0}")]
    Io(#[from] std::io::Error),
}

impl From<nglm_core::Error> for ServiceError {
    fn from(e: nglm_core::Error) -> Self {
        match e {
            nglm_core::Error::Invalid { field, reason } => Self::Invalid {
                field: field.to_string(),
                message: reason.to_string(),
            },
            other => Self::Generation(other),
        }
    }
}

/// The prompt actually fed to the model for one reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextWindow {
    pub tokens: Vec<u32>,
    /// Oldest turns left out to make room.
    pub dropped_turns: usize,
    /// Tokens cut from the front of the current question.
    pub truncated_question_tokens: usize,
}

/// Fits `turns` (oldest first) and `question` into `room` tokens, keeping
/// `reserve` free for the reply (capped at half the room). Whole turns are
/// dropped oldest first; a question that still does not fit loses its
/// leading tokens.
pub fn assemble_context(turns: &[(Vec<u32>, Vec<u32>)], question: &[u32], room: usize, reserve: usize) -> ContextWindow {
    let reserve = reserve.min(room / 2).max(1);
    let budget = room.saturating_sub(reserve);
    let turn_len = |(q, a): &(Vec<u32>, Vec<u32>)| q.len() + a.len() + 2;
    let mut total: usize = 2 + question.len() + turns.iter().map(turn_len).sum::<usize>();
    let mut first = 0;
    while total > budget && first < turns.len() {
        total -= turn_len(&turns[first]);
        first += 1;
    }
    let keep_q = budget.saturating_sub(2).min(question.len());
    let cut = question.len() - keep_q;
    ContextWindow {
        tokens: encode_prompt(&turns[first..], &question[cut..]),
        dropped_turns: first,
        truncated_question_tokens: cut,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEvent {
    pub session_id: Uuid,
    /// Position of this delta within the reply.
    pub index: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub session_id: Uuid,
    pub message: Message,
    pub stop: StopReason,
    /// The reply ended on the token budget or the context limit.
    pub overflow: bool,
    pub matched_doc_ids: Vec<String>,
    pub selected_doc_id: Option<String>,
    /// Present when requested with `debug`.
    pub designed_prompt: Option<String>,
    pub dropped_turns: usize,
    pub truncated_question_tokens: usize,
    pub repetition_ratio: f64,
    pub repetition_flag: bool,
    pub degenerate: bool,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: Uuid,
    pub created_at: DateTime<Utc>,
    pub sampler: SamplerConfig,
    pub history: Vec<Message>,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
}

struct Session {
    id: Uuid,
    created_at: DateTime<Utc>,
    sampler: SamplerConfig,
    rng: SplitMix64,
    history: Vec<Message>,
    prompt_tokens: usize,
    completion_tokens: usize,
}

impl Session {
    fn view(&self) -> SessionView {
        SessionView {
            session_id: self.id,
            created_at: self.created_at,
            sampler: self.sampler.clone(),
            history: self.history.clone(),
            prompt_tokens: self.prompt_tokens,
            completion_tokens: self.completion_tokens,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ServiceOptions {
    pub sampler: SamplerConfig,
    pub library: Option<KnowledgeLibrary>,
    pub template: PromptTemplate,
    pub thresholds: DegenerateThresholds,
    /// Event-log directory; replayed on start when it already has logs.
    pub persist_dir: Option<PathBuf>,
}

pub struct ChatService {
    model: ServedModel,
    options: ServiceOptions,
    sessions: RwLock<HashMap<Uuid, Arc<Mutex<Session>>>>,
    meter: Mutex<Meter>,
    log: Option<EventLog>,
}

impl std::fmt::Debug for ChatService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChatService").field("model", &self.model.kind()).finish_non_exhaustive()
    }
}

impl ChatService {
    pub fn new(model: ServedModel, options: ServiceOptions) -> Result<Self, ServiceError> {
        let mut sessions = HashMap::new();
        let log = match &options.persist_dir {
            Some(dir) => {
                let replay = persist::replay(dir)?;
                for (id, rec) in replay.sessions {
                    let session = Session {
                        id,
                        created_at: rec.created_at,
                        rng: rec.sampler.rng(),
                        sampler: rec.sampler,
                        prompt_tokens: 0,
                        completion_tokens: rec.history.iter().filter(|m| m.role == Role::Assistant).map(|m| m.tokens).sum(),
                        history: rec.history,
                    };
                    sessions.insert(id, Arc::new(Mutex::new(session)));
                }
                if !sessions.is_empty() {
                    log::info!("restored {} sessions from {}", sessions.len(), dir.display());
                }
                Some(EventLog::open(dir)?)
            }
            None => None,
        };
        Ok(Self {
            model,
            options,
            sessions: RwLock::new(sessions),
            meter: Mutex::new(Meter::new()),
            log,
        })
    }

    pub fn model(&self) -> &ServedModel {
        &self.model
    }

    pub fn options(&self) -> &ServiceOptions {
        &self.options
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().unwrap().len()
    }

    pub fn create_session(&self, overrides: &SamplerOverrides) -> Result<Uuid, ServiceError> {
        let sampler = overrides.apply(&self.options.sampler)?;
        let id = Uuid::new_v4();
        let created_at = Utc::now();
        let session = Session {
            id,
            created_at,
            rng: sampler.rng(),
            sampler: sampler.clone(),
            history: Vec::new(),
            prompt_tokens: 0,
            completion_tokens: 0,
        };
        {
            let mut map = self.sessions.write().unwrap();
            map.insert(id, Arc::new(Mutex::new(session)));
            // Logged under the map lock so creation precedes any message.
            self.emit(LogEvent::SessionCreated {
                session_id: id,
                at: created_at,
                sampler,
            });
        }
        Ok(id)
    }

    fn session(&self, id: Uuid) -> Result<Arc<Mutex<Session>>, ServiceError> {
        self.sessions.read().unwrap().get(&id).cloned().ok_or(ServiceError::NotFound(id))
    }

    pub fn contains(&self, id: Uuid) -> bool {
        self.sessions.read().unwrap().contains_key(&id)
    }

    pub fn session_view(&self, id: Uuid) -> Result<SessionView, ServiceError> {
        Ok(self.session(id)?.lock().unwrap().view())
    }

    pub fn session_ids(&self) -> Vec<Uuid> {
        self.sessions.read().unwrap().keys().copied().collect()
    }

    fn emit(&self, event: LogEvent) {
        if let Some(log) = &self.log {
            log.append(event);
        }
    }

    pub fn design(&self, text: &str) -> DesignedPrompt {
        match &self.options.library {
            Some(lib) => design_prompt(text, lib, &self.options.template),
            None => DesignedPrompt {
                original: text.to_string(),
                matched_ids: Vec::new(),
                selected_id: None,
                context: String::new(),
                prompt: text.to_string(),
            },
        }
    }

    /// Answers `text` in session `id`, handing each text delta to `on_token`
    /// as it forms. Turns in one session are serialized; sessions run
    /// independently.
    pub fn post_message(
        &self,
        id: Uuid,
        text: &str,
        debug: bool,
        mut on_token: impl FnMut(TokenEvent),
    ) -> Result<Reply, ServiceError> {
        if text.trim().is_empty() {
            return Err(ServiceError::Invalid {
                field: "text".into(),
                message: "must not be empty".into(),
            });
        }
        let session = self.session(id)?;
        let mut s = session.lock().unwrap();
        let start = Instant::now();
        let tokenizer = self.model.config().tokenizer();
        let designed = self.design(text);
        let turns: Vec<(Vec<u32>, Vec<u32>)> = s
            .history
            .chunks_exact(2)
            .map(|pair| (tokenizer.encode(&pair[0].text), tokenizer.encode(&pair[1].text)))
            .collect();
        let question = tokenizer.encode(&designed.prompt);
        let window = assemble_context(&turns, &question, self.model.context_len(), s.sampler.max_new_tokens);
        let sampler = s.sampler.clone();
        let mut index = 0;
        let generation = generate(&self.model, &window.tokens, &sampler, &mut s.rng, |delta| {
            on_token(TokenEvent {
                session_id: id,
                index,
                text: delta.to_string(),
            });
            index += 1;
        })?;
        let latency = start.elapsed();

        let report = detect_degenerate(&[generation.text.as_str()], self.options.thresholds);
        let repetition_flag = report.repetition_ratio > self.options.thresholds.max_rep_ratio;
        let now = Utc::now();
        let user = Message {
            role: Role::User,
            text: text.to_string(),
            timestamp: now,
            tokens: tokenizer.encode(text).len(),
        };
        let assistant = Message {
            role: Role::Assistant,
            text: generation.text.clone(),
            timestamp: now,
            tokens: generation.tokens.len(),
        };
        self.emit(LogEvent::Message {
            session_id: id,
            message: user.clone(),
        });
        self.emit(LogEvent::Message {
            session_id: id,
            message: assistant.clone(),
        });
        s.history.push(user);
        s.history.push(assistant.clone());
        s.prompt_tokens += generation.prompt_tokens;
        s.completion_tokens += generation.tokens.len();
        drop(s);

        let snapshot = {
            let mut meter = self.meter.lock().unwrap();
            meter.record(latency, repetition_flag);
            let m = meter.snapshot(self.session_count());
            m.pairs.is_multiple_of(METRICS_EVERY).then_some(m)
        };
        if let Some(metrics) = snapshot {
            self.emit(LogEvent::Metrics { at: now, metrics });
        }
        Ok(Reply {
            session_id: id,
            stop: generation.stop,
            overflow: generation.stop != StopReason::Stop,
            matched_doc_ids: designed.matched_ids.clone(),
            selected_doc_id: designed.selected_id.clone(),
            designed_prompt: debug.then(|| designed.prompt.clone()),
            dropped_turns: window.dropped_turns,
            truncated_question_tokens: window.truncated_question_tokens,
            repetition_ratio: report.repetition_ratio,
            repetition_flag,
            degenerate: report.degenerate,
            prompt_tokens: generation.prompt_tokens,
            completion_tokens: generation.tokens.len(),
            latency_ms: latency.as_secs_f64() * 1e3,
            message: assistant,
        })
    }

    pub fn metrics(&self) -> ServiceMetrics {
        self.meter.lock().unwrap().snapshot(self.session_count())
    }

    /// When the metrics window opened.
    pub fn started(&self) -> Instant {
        self.meter.lock().unwrap().started()
    }

    /// Blocks until every logged event is on disk.
    pub fn flush_log(&self) -> Result<(), ServiceError> {
        if let Some(log) = &self.log {
            log.flush()?;
        }
        Ok(())
    }
}
