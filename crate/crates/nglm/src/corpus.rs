//! Line-delimited QA corpora and the parallel translation corpus.
//!
//! A QA corpus holds one JSON object per line:
//!
//! ```json
//! {"question": "...", "answer": "...", "department": "Pediatrics", "language": "EN", "synthetic": false}
//! ```
//!
//! Departments use the names of the source dataset table ("Surgical",
//! "Obstetrics and Gynecology", "Pediatrics", "Internal Medicine",
//! "Andriatria") or "Multiple". `synthetic` defaults to `false`. Blank lines
//! are ignored.
//!
//! A parallel corpus holds `{"source", "target", "origin", "translator"}` per
//! line, in input order.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Department {
    Surgical,
    #[serde(rename = "Obstetrics and Gynecology")]
    ObstetricsAndGynecology,
    Pediatrics,
    #[serde(rename = "Internal Medicine")]
    InternalMedicine,
    Andriatria,
    Multiple,
}

impl Department {
    pub const ALL: [Department; 6] = [
        Self::Surgical,
        Self::ObstetricsAndGynecology,
        Self::Pediatrics,
        Self::InternalMedicine,
        Self::Andriatria,
        Self::Multiple,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Surgical => "Surgical",
            Self::ObstetricsAndGynecology => "Obstetrics and Gynecology",
            Self::Pediatrics => "Pediatrics",
            Self::InternalMedicine => "Internal Medicine",
            Self::Andriatria => "Andriatria",
            Self::Multiple => "Multiple",
        }
    }
}

impl fmt::Display for Department {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Language {
    CN,
    EN,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub question: String,
    pub answer: String,
    pub department: Department,
    pub language: Language,
    #[serde(default)]
    pub synthetic: bool,
}

impl QaRecord {
    fn check(&self) -> Result<(), String> {
        if self.question.trim().is_empty() {
            return Err("empty question".into());
        }
        if self.answer.trim().is_empty() {
            return Err("empty answer".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub total: usize,
    pub by_department: BTreeMap<Department, usize>,
    pub by_language: BTreeMap<Language, usize>,
    pub synthetic: usize,
}

impl CorpusStats {
    pub fn of(records: &[QaRecord]) -> Self {
        let mut s = Self::default();
        for r in records {
            s.total += 1;
            *s.by_department.entry(r.department).or_default() += 1;
            *s.by_language.entry(r.language).or_default() += 1;
            s.synthetic += r.synthetic as usize;
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LineError {
    /// 1-based.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadedCorpus {
    pub records: Vec<QaRecord>,
    pub stats: CorpusStats,
    pub errors: Vec<LineError>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LoadMode {
    /// Collect malformed lines and keep going.
    #[default]
    Lenient,
    /// Stop at the first malformed line.
    Strict,
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: io::Error },
    #[error("line {}: {}", .0.line, .0.message)]
    Malformed(LineError),
    #[error("write failed: {0}")]
    Write(#[from] io::Error),
}

fn parse_line(line: &str) -> Result<QaRecord, String> {
    let record: QaRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    record.check()?;
    Ok(record)
}

pub fn parse_qa_corpus(text: &str, mode: LoadMode) -> Result<LoadedCorpus, CorpusError> {
    let mut out = LoadedCorpus::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line) {
            Ok(r) => out.records.push(r),
            Err(message) => {
                let err = LineError { line: i + 1, message };
                if mode == LoadMode::Strict {
                    return Err(CorpusError::Malformed(err));
                }
                log::warn!("skipping line {}: {}", err.line, err.message);
                out.errors.push(err);
            }
        }
    }
    out.stats = CorpusStats::of(&out.records);
    Ok(out)
}

pub fn load_qa_corpus(path: &Path, mode: LoadMode) -> Result<LoadedCorpus, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Read {
        path: path.display().to_string(),
        source,
    })?;
    parse_qa_corpus(&text, mode)
}

pub fn write_qa_corpus(records: &[QaRecord], path: &Path) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelCorpusRecord {
    pub source: String,
    pub target: String,
    pub origin: String,
    pub translator: String,
}

/// Appends one record per line, flushing after each, so a crash loses at
/// most the line being written.
pub struct PairWriter<W: Write> {
    inner: W,
    written: usize,
}

impl<W: Write> PairWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner, written: 0 }
    }

    pub fn append(&mut self, record: &ParallelCorpusRecord) -> io::Result<()> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        self.inner.write_all(&line)?;
        self.inner.flush()?;
        self.written += 1;
        Ok(())
    }

    pub fn written(&self) -> usize {
        self.written
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

/// Complete records at the start of a parallel corpus file, plus the byte
/// length they occupy. A torn or unparsable line ends the prefix.
pub fn read_parallel_prefix(bytes: &[u8]) -> (Vec<ParallelCorpusRecord>, usize) {
    let mut records = Vec::new();
    let mut pos = 0;
    while let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') {
        let line = &bytes[pos..pos + nl];
        match serde_json::from_slice::<ParallelCorpusRecord>(line) {
            Ok(r) => records.push(r),
            Err(_) => break,
        }
        pos += nl + 1;
    }
    (records, pos)
}

pub fn load_parallel_corpus(path: &Path) -> Result<Vec<ParallelCorpusRecord>, CorpusError> {
    let bytes = fs::read(path).map_err(|source| CorpusError::Read {
        path: path.display().to_string(),
        source,
    })?;
    Ok(read_parallel_prefix(&bytes).0)
}

pub const DEFAULT_EXPORT_INSTRUCTION: &str = "Translate the following English text into Chinese:\n";

/// Each pair becomes a QA record asking for the translation of its source.
pub fn training_pairs(records: &[ParallelCorpusRecord], instruction: &str) -> Vec<QaRecord> {
    records
        .iter()
        .map(|r| QaRecord {
            question: format!("{instruction}{}", r.source),
            answer: r.target.clone(),
            department: Department::Multiple,
            language: Language::CN,
            synthetic: true,
        })
        .collect()
}

pub fn export_training_pairs(records: &[ParallelCorpusRecord], instruction: &str, path: &Path) -> Result<usize, CorpusError> {
    let pairs = training_pairs(records, instruction);
    write_qa_corpus(&pairs, path)?;
    Ok(pairs.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(dep: &str) -> String {
        format!(r#"{{"question":"q","answer":"a","department":"{dep}","language":"CN"}}"#)
    }

    #[test]
    fn empty_text_is_an_empty_corpus() {
        let c = parse_qa_corpus("", LoadMode::Strict).unwrap();
        assert!(c.records.is_empty() && c.errors.is_empty());
        assert_eq!(c.stats, CorpusStats::default());
    }

    #[test]
    fn department_counts() {
        let text = [rec("Pediatrics"), rec("Surgical"), rec("Pediatrics"), rec("Surgical"), rec("Pediatrics")].join("\n");
        let c = parse_qa_corpus(&text, LoadMode::Strict).unwrap();
        let expected: BTreeMap<_, _> = [(Department::Pediatrics, 3), (Department::Surgical, 2)].into();
        assert_eq!(c.stats.by_department, expected);
        assert_eq!(c.stats.by_language[&Language::CN], 5);
    }

    #[test]
    fn missing_answer_is_reported_with_its_line() {
        let text = format!("{}\n\n{}\n", rec("Surgical"), r#"{"question":"q","department":"Surgical","language":"EN"}"#);
        let c = parse_qa_corpus(&text, LoadMode::Lenient).unwrap();
        assert_eq!(c.records.len(), 1);
        assert_eq!(c.errors.len(), 1);
        assert_eq!(c.errors[0].line, 3);
        assert!(c.errors[0].message.contains("answer"));
        assert!(matches!(
            parse_qa_corpus(&text, LoadMode::Strict),
            Err(CorpusError::Malformed(LineError { line: 3, .. }))
        ));
    }

    #[test]
    fn whitespace_answer_and_bad_tags_are_malformed() {
        let text = [
            r#"{"question":"q","answer":"  ","department":"Surgical","language":"EN"}"#,
            r#"{"question":"q","answer":"a","department":"Cardiology","language":"EN"}"#,
            r#"{"question":"q","answer":"a","department":"Surgical","language":"FR"}"#,
        ]
        .join("\n");
        let c = parse_qa_corpus(&text, LoadMode::Lenient).unwrap();
        assert_eq!(c.errors.iter().map(|e| e.line).collect::<Vec<_>>(), [1, 2, 3]);
    }

    #[test]
    fn torn_tail_ends_the_prefix() {
        let r = ParallelCorpusRecord {
            source: "a".into(),
            target: "b".into(),
            origin: "0".into(),
            translator: "t".into(),
        };
        let mut w = PairWriter::new(Vec::new());
        w.append(&r).unwrap();
        w.append(&r).unwrap();
        let mut bytes = w.into_inner();
        let full = bytes.len();
        bytes.extend_from_slice(br#"{"source":"a","tar"#);
        let (records, len) = read_parallel_prefix(&bytes);
        assert_eq!(records.len(), 2);
        assert_eq!(len, full);
    }
}
