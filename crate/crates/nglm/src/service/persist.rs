//! Append-only event log, one JSON object per line, one file per UTC day
//! (`events-YYYY-MM-DD.jsonl`).
//!
//! A single writer thread owns the files and is fed through a channel, so
//! events land in the order they were sent. Replay reads every day file in
//! name order and rebuilds each session's history.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread::JoinHandle;

use chrono::{DateTime, NaiveDate, Utc};
use nglm_core::sampler::SamplerConfig;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use super::metrics::ServiceMetrics;
use super::{Message, Role};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    SessionCreated {
        session_id: Uuid,
        at: DateTime<Utc>,
        sampler: SamplerConfig,
    },
    Message {
        session_id: Uuid,
        #[serde(flatten)]
        message: Message,
    },
    Metrics {
        at: DateTime<Utc>,
        metrics: ServiceMetrics,
    },
}

impl LogEvent {
    pub fn at(&self) -> DateTime<Utc> {
        match self {
            Self::SessionCreated { at, .. } | Self::Metrics { at, .. } => *at,
            Self::Message { message, .. } => message.timestamp,
        }
    }
}

pub fn day_file(dir: &Path, day: NaiveDate) -> PathBuf {
    dir.join(format!("events-{}.jsonl", day.format("%Y-%m-%d")))
}

enum Command {
    Append(LogEvent),
    Flush(mpsc::SyncSender<io::Result<()>>),
}

struct DayWriter {
    dir: PathBuf,
    day: Option<NaiveDate>,
    file: Option<BufWriter<fs::File>>,
    error: Option<io::Error>,
}

impl DayWriter {
    fn write(&mut self, event: &LogEvent) -> io::Result<()> {
        let day = event.at().date_naive();
        if self.day != Some(day) || self.file.is_none() {
            let f = fs::OpenOptions::new().create(true).append(true).open(day_file(&self.dir, day))?;
            self.file = Some(BufWriter::new(f));
            self.day = Some(day);
        }
        let f = self.file.as_mut().expect("opened above");
        let mut line = serde_json::to_vec(event)?;
        line.push(b'\n');
        f.write_all(&line)?;
        f.flush()
    }
}

/// Handle to the writer thread. Dropping it drains the queue and joins.
pub struct EventLog {
    tx: Option<mpsc::Sender<Command>>,
    handle: Option<JoinHandle<()>>,
    dir: PathBuf,
}

impl EventLog {
    pub fn open(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let (tx, rx) = mpsc::channel::<Command>();
        let mut writer = DayWriter {
            dir: dir.clone(),
            day: None,
            file: None,
            error: None,
        };
        let handle = std::thread::Builder::new().name("event-log".into()).spawn(move || {
            for cmd in rx {
                match cmd {
                    Command::Append(e) => {
                        if let Err(err) = writer.write(&e) {
                            log::error!("event log write failed: {err}");
                            writer.error = Some(err);
                        }
                    }
                    Command::Flush(reply) => {
                        let _ = reply.send(writer.error.take().map_or(Ok(()), Err));
                    }
                }
            }
        })?;
        Ok(Self {
            tx: Some(tx),
            handle: Some(handle),
            dir,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn append(&self, event: LogEvent) {
        if let Some(tx) = &self.tx {
            let _ = tx.send(Command::Append(event));
        }
    }

    /// Waits until every event sent so far is on disk.
    pub fn flush(&self) -> io::Result<()> {
        let (reply, done) = mpsc::sync_channel(1);
        let tx = self.tx.as_ref().ok_or_else(|| io::Error::other("log closed"))?;
        tx.send(Command::Flush(reply)).map_err(|_| io::Error::other("log writer stopped"))?;
        done.recv().map_err(|_| io::Error::other("log writer stopped"))?
    }
}

impl Drop for EventLog {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: Uuid,
    pub created_at: DateTime<Utc>,
    pub sampler: SamplerConfig,
    pub history: Vec<Message>,
}

#[derive(Debug, Default)]
pub struct Replay {
    pub sessions: BTreeMap<Uuid, SessionRecord>,
    pub events: usize,
    /// Lines that did not parse, as (file, 1-based line).
    pub skipped: Vec<(PathBuf, usize)>,
}

pub fn log_files(dir: &Path) -> io::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    match fs::read_dir(dir) {
        Ok(entries) => {
            for entry in entries {
                let path = entry?.path();
                let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
                if name.starts_with("events-") && name.ends_with(".jsonl") {
                    files.push(path);
                }
            }
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => {}
        Err(e) => return Err(e),
    }
    files.sort();
    Ok(files)
}

/// Rebuilds sessions from every log file under `dir`.
pub fn replay(dir: &Path) -> io::Result<Replay> {
    let mut out = Replay::default();
    for path in log_files(dir)? {
        let text = fs::read_to_string(&path)?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let event: LogEvent = match serde_json::from_str(line) {
                Ok(e) => e,
                Err(e) => {
                    log::warn!("{}:{}: unreadable event ({e})", path.display(), i + 1);
                    out.skipped.push((path.clone(), i + 1));
                    continue;
                }
            };
            out.events += 1;
            match event {
                LogEvent::SessionCreated { session_id, at, sampler } => {
                    out.sessions.insert(
                        session_id,
                        SessionRecord {
                            session_id,
                            created_at: at,
                            sampler,
                            history: Vec::new(),
                        },
                    );
                }
                LogEvent::Message { session_id, message } => match out.sessions.get_mut(&session_id) {
                    Some(s) => {
                        let expected = if s.history.len() % 2 == 0 { Role::User } else { Role::Assistant };
                        if message.role != expected {
                            log::warn!("{}:{}: out-of-turn message for {session_id}", path.display(), i + 1);
                            out.skipped.push((path.clone(), i + 1));
                            continue;
                        }
                        s.history.push(message);
                    }
                    None => {
                        log::warn!("{}:{}: message for unknown session {session_id}", path.display(), i + 1);
                        out.skipped.push((path.clone(), i + 1));
                    }
                },
                LogEvent::Metrics { .. } => {}
            }
        }
    }
    for s in out.sessions.values_mut() {
        // A user turn without its reply (crash mid-generation) is dropped.
        if s.history.len() % 2 == 1 {
            s.history.pop();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(role: Role, text: &str, at: DateTime<Utc>) -> Message {
        Message {
            role,
            text: text.into(),
            timestamp: at,
            tokens: text.len(),
        }
    }

    #[test]
    fn events_split_by_day_and_replay() {
        let dir = tempfile::tempdir().unwrap();
        let id = Uuid::new_v4();
        let d1: DateTime<Utc> = "2026-03-01T23:59:59Z".parse().unwrap();
        let d2: DateTime<Utc> = "2026-03-02T00:00:01Z".parse().unwrap();
        {
            let log = EventLog::open(dir.path()).unwrap();
            log.append(LogEvent::SessionCreated {
                session_id: id,
                at: d1,
                sampler: SamplerConfig::default(),
            });
            log.append(LogEvent::Message {
                session_id: id,
                message: msg(Role::User, "hi", d1),
            });
            log.append(LogEvent::Message {
                session_id: id,
                message: msg(Role::Assistant, "hello", d2),
            });
            log.append(LogEvent::Message {
                session_id: id,
                message: msg(Role::User, "dangling", d2),
            });
            log.flush().unwrap();
        }
        assert_eq!(log_files(dir.path()).unwrap().len(), 2);
        let r = replay(dir.path()).unwrap();
        let s = &r.sessions[&id];
        assert_eq!(s.history.iter().map(|m| m.text.as_str()).collect::<Vec<_>>(), ["hi", "hello"]);
        assert_eq!(r.events, 4);
    }

    #[test]
    fn torn_line_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let day: DateTime<Utc> = "2026-03-01T00:00:00Z".parse().unwrap();
        let id = Uuid::new_v4();
        let created = serde_json::to_string(&LogEvent::SessionCreated {
            session_id: id,
            at: day,
            sampler: SamplerConfig::default(),
        })
        .unwrap();
        fs::write(day_file(dir.path(), day.date_naive()), format!("{created}\n{{\"event\":\"mess")).unwrap();
        let r = replay(dir.path()).unwrap();
        assert!(r.sessions.contains_key(&id));
        assert_eq!(r.skipped.len(), 1);
    }
}
