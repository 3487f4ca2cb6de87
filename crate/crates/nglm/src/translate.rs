//! Building a parallel corpus by sending each source text to an external
//! translator.
//!
//! The live transport speaks a minimal chat-completion exchange. It POSTs
//!
//! ```json
//! {"model": "<model>", "temperature": 0,
//!  "messages": [{"role": "system", "content": "<instruction>"},
//!               {"role": "user", "content": "<source text>"}]}
//! ```
//!
//! with `Authorization: Bearer <token>` and reads
//! `choices[0].message.content` from the response. The token is read from
//! the environment variable named in the config (default
//! [`DEFAULT_TOKEN_ENV`]) and is never logged, serialized or included in
//! error messages.
//!
//! Status 401 and 403 are authentication failures and abort the run.
//! Status 408, 429 and 5xx, timeouts and connection errors are transient and
//! retried with exponential backoff. Other failures are permanent for the
//! item.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::{PairWriter, ParallelCorpusRecord};

pub const DEFAULT_TOKEN_ENV: &str = "NGLM_TRANSLATOR_TOKEN";
pub const DEFAULT_INSTRUCTION: &str =
    "You are a professional medical translator. Translate the user's English text into fluent Simplified Chinese. Reply with the translation only.";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("transient: {0}")]
    Transient(String),
    #[error("permanent: {0}")]
    Permanent(String),
    #[error("authentication failed: {0}")]
    Auth(String),
}

/// One translation exchange.
pub trait Transport: Send + Sync {
    fn translate(&self, instruction: &str, text: &str) -> Result<String, TransportError>;
}

/// An in-process transport backed by a closure.
pub struct FnTransport<F>(pub F);

impl<F> Transport for FnTransport<F>
where
    F: Fn(&str, &str) -> Result<String, TransportError> + Send + Sync,
{
    fn translate(&self, instruction: &str, text: &str) -> Result<String, TransportError> {
        (self.0)(instruction, text)
    }
}

/// Uppercases its input; used by the `mock://uppercase` endpoint.
pub struct UppercaseTransport;

impl Transport for UppercaseTransport {
    fn translate(&self, _instruction: &str, text: &str) -> Result<String, TransportError> {
        Ok(text.to_uppercase())
    }
}

/// A bearer token that prints as `***`.
#[derive(Clone)]
pub struct Secret(String);

impl Secret {
    pub fn new(token: impl Into<String>) -> Self {
        Self(token.into())
    }

    pub fn from_env(var: &str) -> Option<Self> {
        std::env::var(var).ok().filter(|t| !t.is_empty()).map(Self)
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("***")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the token.
    pub token_env: String,
    pub timeout_secs: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "gpt-3.5-turbo".into(),
            token_env: DEFAULT_TOKEN_ENV.into(),
            timeout_secs: 60,
        }
    }
}

#[derive(Debug)]
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    config: HttpConfig,
    token: Option<Secret>,
}

impl HttpTransport {
    pub fn new(config: HttpConfig) -> reqwest::Result<Self> {
        let token = Secret::from_env(&config.token_env);
        if token.is_none() {
            log::warn!("{} is not set; requests go out unauthenticated", config.token_env);
        }
        Self::with_token(config, token)
    }

    pub fn with_token(config: HttpConfig, token: Option<Secret>) -> reqwest::Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()?;
        Ok(Self { client, config, token })
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    temperature: f64,
    messages: [ChatMessage<'a>; 2],
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    content: String,
}

fn classify_status(status: reqwest::StatusCode) -> TransportError {
    let msg = format!("HTTP {status}");
    match status.as_u16() {
        401 | 403 => TransportError::Auth(msg),
        408 | 429 | 500..=599 => TransportError::Transient(msg),
        _ => TransportError::Permanent(msg),
    }
}

impl Transport for HttpTransport {
    fn translate(&self, instruction: &str, text: &str) -> Result<String, TransportError> {
        let body = ChatRequest {
            model: &self.config.model,
            temperature: 0.0,
            messages: [
                ChatMessage {
                    role: "system",
                    content: instruction,
                },
                ChatMessage { role: "user", content: text },
            ],
        };
        let mut req = self.client.post(&self.config.endpoint).json(&body);
        if let Some(t) = &self.token {
            req = req.bearer_auth(t.expose());
        }
        let resp = req.send().map_err(|e| {
            // Strip the URL so nothing request-specific leaks into logs.
            let e = e.without_url();
            if e.is_timeout() || e.is_connect() || e.is_request() {
                TransportError::Transient(e.to_string())
            } else {
                TransportError::Permanent(e.to_string())
            }
        })?;
        if !resp.status().is_success() {
            return Err(classify_status(resp.status()));
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| TransportError::Permanent(format!("bad response body: {}", e.without_url())))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| TransportError::Permanent("response has no choices".into()))?;
        let content = content.trim().to_string();
        if content.is_empty() {
            return Err(TransportError::Permanent("empty translation".into()));
        }
        Ok(content)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub multiplier: f64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff_ms: 500,
            multiplier: 2.0,
            max_backoff_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    /// Wait before retry number `retry` (1-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        let ms = self.initial_backoff_ms as f64 * self.multiplier.powi(retry.saturating_sub(1) as i32);
        Duration::from_millis(ms.min(self.max_backoff_ms as f64) as u64)
    }
}

pub type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

pub struct TranslatorClient {
    transport: Box<dyn Transport>,
    pub retry: RetryPolicy,
    pub instruction: String,
    /// Recorded in every output record.
    pub translator: String,
    sleeper: Sleeper,
}

impl fmt::Debug for TranslatorClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TranslatorClient")
            .field("retry", &self.retry)
            .field("translator", &self.translator)
            .finish_non_exhaustive()
    }
}

impl TranslatorClient {
    pub fn new(transport: impl Transport + 'static, translator: impl Into<String>) -> Self {
        Self {
            transport: Box::new(transport),
            retry: RetryPolicy::default(),
            instruction: DEFAULT_INSTRUCTION.into(),
            translator: translator.into(),
            sleeper: Arc::new(std::thread::sleep),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_instruction(mut self, instruction: impl Into<String>) -> Self {
        self.instruction = instruction.into();
        self
    }

    pub fn with_sleeper(mut self, sleeper: Sleeper) -> Self {
        self.sleeper = sleeper;
        self
    }

    /// One item with retries: the translation or the final error, and the
    /// number of retries spent.
    pub fn translate_one(&self, text: &str) -> (Result<String, TransportError>, u32) {
        let attempts = self.retry.max_attempts.max(1);
        let mut retries = 0;
        loop {
            match self.transport.translate(&self.instruction, text) {
                Err(TransportError::Transient(msg)) if retries + 1 < attempts => {
                    retries += 1;
                    let wait = self.retry.backoff(retries);
                    log::debug!("transient failure ({msg}); retry {retries} after {wait:?}");
                    (self.sleeper)(wait);
                }
                other => return (other, retries),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceItem {
    pub origin: String,
    pub text: String,
}

impl SourceItem {
    /// Items whose origin is their position in `texts`.
    pub fn numbered<S: AsRef<str>>(texts: &[S]) -> Vec<Self> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| Self {
                origin: i.to_string(),
                text: t.as_ref().to_string(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ItemStatus {
    Translated,
    Failed { reason: String },
    /// Not attempted because the run aborted.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ItemOutcome {
    pub origin: String,
    pub retries: u32,
    #[serde(flatten)]
    pub status: ItemStatus,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BatchReport {
    pub records: Vec<ParallelCorpusRecord>,
    pub outcomes: Vec<ItemOutcome>,
    /// Items already present in the output before this run.
    pub resumed: usize,
}

impl BatchReport {
    pub fn failed(&self) -> impl Iterator<Item = &ItemOutcome> {
        self.outcomes.iter().filter(|o| matches!(o.status, ItemStatus::Failed { .. }))
    }

    pub fn total_retries(&self) -> u32 {
        self.outcomes.iter().map(|o| o.retries).sum()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TranslateError {
    #[error("no sources to translate")]
    Empty,
    #[error("translator rejected credentials at item {origin}: {message}")]
    Auth { origin: String, message: String, report: Box<BatchReport> },
    #[error("persisting output failed after {written} records: {source}")]
    Persist { written: usize, source: io::Error },
}

/// Translates `sources` with up to `parallelism` requests in flight and
/// appends each successful pair to `out` in input order as soon as every
/// earlier item is settled.
pub fn translate_batch<W: Write>(
    client: &TranslatorClient,
    sources: &[SourceItem],
    out: &mut PairWriter<W>,
    parallelism: usize,
) -> Result<BatchReport, TranslateError> {
    if sources.is_empty() {
        return Err(TranslateError::Empty);
    }
    let parallelism = parallelism.clamp(1, sources.len());
    let next = AtomicUsize::new(0);
    let stop = std::sync::atomic::AtomicBool::new(false);
    let mut report = BatchReport::default();
    let (tx, rx) = mpsc::channel::<(usize, Result<String, TransportError>, u32)>();

    std::thread::scope(|scope| {
        for _ in 0..parallelism {
            let tx = tx.clone();
            let (next, stop) = (&next, &stop);
            scope.spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(item) = sources.get(i) else { break };
                    let (result, retries) = client.translate_one(&item.text);
                    if tx.send((i, result, retries)).is_err() {
                        break;
                    }
                }
            });
        }
        drop(tx);

        let mut pending = BTreeMap::new();
        let mut settled = 0;
        let mut failure = None;
        for (i, result, retries) in rx.iter() {
            pending.insert(i, (result, retries));
            while let Some((result, retries)) = pending.remove(&settled) {
                let item = &sources[settled];
                settled += 1;
                let status = match result {
                    Ok(target) => {
                        let record = ParallelCorpusRecord {
                            source: item.text.clone(),
                            target,
                            origin: item.origin.clone(),
                            translator: client.translator.clone(),
                        };
                        match out.append(&record) {
                            Ok(()) => {
                                report.records.push(record);
                                ItemStatus::Translated
                            }
                            Err(source) => {
                                failure = Some(TranslateError::Persist {
                                    written: out.written(),
                                    source,
                                });
                                ItemStatus::Failed {
                                    reason: "persist".into(),
                                }
                            }
                        }
                    }
                    Err(TransportError::Auth(message)) => {
                        failure = Some(TranslateError::Auth {
                            origin: item.origin.clone(),
                            message,
                            report: Box::default(),
                        });
                        ItemStatus::Failed {
                            reason: "authentication".into(),
                        }
                    }
                    Err(e) => {
                        log::warn!("item {} failed after {} retries: {e}", item.origin, retries);
                        ItemStatus::Failed { reason: e.to_string() }
                    }
                };
                report.outcomes.push(ItemOutcome {
                    origin: item.origin.clone(),
                    retries,
                    status,
                });
                if failure.is_some() {
                    stop.store(true, Ordering::Relaxed);
                    break;
                }
            }
            if failure.is_some() {
                break;
            }
        }
        // Drain so workers can finish; their results are discarded.
        drop(rx);

        for item in &sources[report.outcomes.len()..] {
            if failure.is_some() {
                report.outcomes.push(ItemOutcome {
                    origin: item.origin.clone(),
                    retries: 0,
                    status: ItemStatus::Skipped,
                });
            }
        }
        match failure {
            Some(TranslateError::Auth { origin, message, .. }) => Err(TranslateError::Auth {
                origin,
                message,
                report: Box::new(std::mem::take(&mut report)),
            }),
            Some(e) => Err(e),
            None => Ok(std::mem::take(&mut report)),
        }
    })
}

/// Continues a run whose output file may already hold a prefix of the
/// records (possibly with a torn last line): the torn tail is cut off and
/// sources already present are skipped.
pub fn translate_file(
    client: &TranslatorClient,
    sources: &[SourceItem],
    out_path: &std::path::Path,
    parallelism: usize,
) -> Result<BatchReport, TranslateError> {
    let persist = |source| TranslateError::Persist { written: 0, source };
    let existing = match std::fs::read(out_path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(persist(e)),
    };
    let (done, valid_len) = crate::corpus::read_parallel_prefix(&existing);
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(false)
        .open(out_path)
        .map_err(persist)?;
    file.set_len(valid_len as u64).map_err(persist)?;
    let mut file = file;
    std::io::Seek::seek(&mut file, io::SeekFrom::End(0)).map_err(persist)?;
    let seen: std::collections::HashSet<&str> = done.iter().map(|r| r.origin.as_str()).collect();
    let remaining: Vec<SourceItem> = sources.iter().filter(|s| !seen.contains(s.origin.as_str())).cloned().collect();
    let resumed = sources.len() - remaining.len();
    if remaining.is_empty() {
        return Ok(BatchReport {
            records: done,
            resumed,
            ..BatchReport::default()
        });
    }
    let mut writer = PairWriter::new(file);
    let mut report = translate_batch(client, &remaining, &mut writer, parallelism)?;
    report.resumed = resumed;
    let mut records = done;
    records.append(&mut report.records);
    report.records = records;
    Ok(report)
}
