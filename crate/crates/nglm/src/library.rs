//! Knowledge-library and prompt-template files.
//!
//! A library file is a JSON array of disease records:
//!
//! ```json
//! [{"id": "tonsillitis", "name": "Tonsillitis", "aliases": ["扁桃体炎"],
//!   "symptoms": "...", "diagnosis": "...", "treatment": "...",
//!   "prevention": "...", "source": "synthetic"}]
//! ```
//!
//! `aliases` and `source` may be omitted. A template file is plain text
//! whose first line is the sentinel marker and which uses the placeholders
//! `{NAME}`, `{SYMPTOMS}`, `{DIAGNOSIS}`, `{TREATMENT}`, `{PREVENTION}` and
//! `{QUESTION}`.

use std::fs;
use std::path::Path;

use nglm_core::prompt::{DiseaseDoc, KnowledgeLibrary, PromptTemplate};

/// The bundled 20-document synthetic library.
pub const TOY_LIBRARY: &str = include_str!("../data/toy_library.json");
/// The bundled 32-pair toy QA corpus.
pub const TOY_CORPUS: &str = include_str!("../data/toy_qa.jsonl");

#[derive(Debug, thiserror::Error)]
pub enum LibraryError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("malformed library: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Invalid(#[from] nglm_core::Error),
}

pub fn parse_library(text: &str) -> Result<KnowledgeLibrary, LibraryError> {
    let docs: Vec<DiseaseDoc> = serde_json::from_str(text)?;
    Ok(KnowledgeLibrary::new(docs)?)
}

fn read(path: &Path) -> Result<String, LibraryError> {
    fs::read_to_string(path).map_err(|source| LibraryError::Read {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_library(path: &Path) -> Result<KnowledgeLibrary, LibraryError> {
    parse_library(&read(path)?)
}

pub fn toy_library() -> KnowledgeLibrary {
    parse_library(TOY_LIBRARY).expect("bundled library is valid")
}

pub fn load_template(path: &Path) -> Result<PromptTemplate, LibraryError> {
    Ok(PromptTemplate::parse(&read(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_library_has_twenty_docs() {
        let lib = toy_library();
        assert_eq!(lib.len(), 20);
        for doc in lib.docs() {
            for section in [&doc.symptoms, &doc.diagnosis, &doc.treatment, &doc.prevention] {
                assert!(!section.is_empty(), "{}", doc.id);
            }
        }
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let doc = r#"{"id":"a","name":"Flu","symptoms":"s","diagnosis":"d","treatment":"t","prevention":"p"}"#;
        let text = format!("[{doc},{}]", doc.replace(r#""id":"a""#, r#""id":"b""#));
        assert!(matches!(parse_library(&text), Err(LibraryError::Invalid(_))));
    }
}
