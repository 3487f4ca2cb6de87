//! Dictionary-driven prompt design: find disease names in the user's text,
//! pick one document from the knowledge library and wrap the question in a
//! templated summary of it.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use aho_corasick::{AhoCorasick, AhoCorasickBuilder, MatchKind};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-section byte budget applied when filling a template.
pub const DEFAULT_SECTION_BUDGET: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiseaseDoc {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    pub symptoms: String,
    pub diagnosis: String,
    pub treatment: String,
    pub prevention: String,
    #[serde(default)]
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordMatch {
    /// The library term that matched, as written in the library.
    pub term: String,
    pub doc_id: String,
    /// Byte span in the scanned text.
    pub start: usize,
    pub end: usize,
}

/// Immutable set of documents with a leftmost-longest matcher over every
/// name and alias. Matching ignores ASCII case.
#[derive(Debug, Clone)]
pub struct KnowledgeLibrary {
    docs: Vec<DiseaseDoc>,
    by_id: BTreeMap<String, usize>,
    /// Pattern index to (term, doc index).
    terms: Vec<(String, usize)>,
    matcher: AhoCorasick,
}

impl KnowledgeLibrary {
    pub fn new(docs: Vec<DiseaseDoc>) -> Result<Self> {
        let mut by_id = BTreeMap::new();
        let mut owner: BTreeMap<String, usize> = BTreeMap::new();
        let mut terms = Vec::new();
        for (i, doc) in docs.iter().enumerate() {
            if doc.id.trim().is_empty() {
                return Err(Error::invalid("library", format!("document {i} has an empty id")));
            }
            if doc.name.trim().is_empty() {
                return Err(Error::invalid("library", format!("document {} has an empty name", doc.id)));
            }
            if by_id.insert(doc.id.clone(), i).is_some() {
                return Err(Error::invalid("library", format!("duplicate id {}", doc.id)));
            }
            for term in core::iter::once(&doc.name).chain(&doc.aliases) {
                if term.is_empty() {
                    return Err(Error::invalid("library", format!("document {} has an empty alias", doc.id)));
                }
                let key = term.to_ascii_lowercase();
                match owner.get(&key) {
                    Some(&j) if j != i => {
                        return Err(Error::invalid(
                            "library",
                            format!("term {term} belongs to both {} and {}", docs[j].id, doc.id),
                        ))
                    }
                    Some(_) => continue,
                    None => {
                        owner.insert(key, i);
                        terms.push((term.clone(), i));
                    }
                }
            }
        }
        let matcher = AhoCorasickBuilder::new()
            .match_kind(MatchKind::LeftmostLongest)
            .ascii_case_insensitive(true)
            .build(terms.iter().map(|(t, _)| t.as_str()))
            .map_err(|e| Error::invalid("library", e.to_string()))?;
        Ok(Self {
            docs,
            by_id,
            terms,
            matcher,
        })
    }

    pub fn docs(&self) -> &[DiseaseDoc] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn lookup(&self, id: &str) -> Result<&DiseaseDoc> {
        self.by_id.get(id).map(|&i| &self.docs[i]).ok_or_else(|| Error::NotFound {
            kind: "document",
            id: id.to_string(),
        })
    }

    /// The document a name or alias belongs to.
    pub fn resolve(&self, term: &str) -> Option<&DiseaseDoc> {
        self.terms
            .iter()
            .find(|(t, _)| t.eq_ignore_ascii_case(term))
            .map(|&(_, i)| &self.docs[i])
    }

    /// Non-overlapping leftmost-longest matches in span order.
    pub fn extract_keywords(&self, text: &str) -> Vec<KeywordMatch> {
        self.matcher
            .find_iter(text)
            .map(|m| {
                let (term, doc) = &self.terms[m.pattern().as_usize()];
                KeywordMatch {
                    term: term.clone(),
                    doc_id: self.docs[*doc].id.clone(),
                    start: m.start(),
                    end: m.end(),
                }
            })
            .collect()
    }
}

/// Free function form of [`KnowledgeLibrary::extract_keywords`].
pub fn extract_keywords(text: &str, library: &KnowledgeLibrary) -> Vec<KeywordMatch> {
    library.extract_keywords(text)
}

pub fn lookup<'a>(library: &'a KnowledgeLibrary, id: &str) -> Result<&'a DiseaseDoc> {
    library.lookup(id)
}

/// The document to use for a match list: the earliest match, which under
/// leftmost-longest matching is also the longest term starting there.
pub fn most_likely(matches: &[KeywordMatch]) -> Option<&KeywordMatch> {
    matches
        .iter()
        .min_by(|a, b| a.start.cmp(&b.start).then_with(|| a.doc_id.cmp(&b.doc_id)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Name,
    Symptoms,
    Diagnosis,
    Treatment,
    Prevention,
    Question,
}

const SLOTS: [(&str, Slot); 6] = [
    ("{NAME}", Slot::Name),
    ("{SYMPTOMS}", Slot::Symptoms),
    ("{DIAGNOSIS}", Slot::Diagnosis),
    ("{TREATMENT}", Slot::Treatment),
    ("{PREVENTION}", Slot::Prevention),
    ("{QUESTION}", Slot::Question),
];

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(Slot),
}

/// Prompt template. The first line is a sentinel that marks a prompt as
/// already designed; `{QUESTION}` must appear after it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    source: String,
    sentinel: String,
    pieces: Vec<Piece>,
    section_budget: usize,
}

pub const DEFAULT_TEMPLATE: &str = "[knowledge]\n\
Disease: {NAME}\n\
Symptoms: {SYMPTOMS}\n\
Diagnosis: {DIAGNOSIS}\n\
Treatment: {TREATMENT}\n\
Prevention: {PREVENTION}\n\
\n\
{QUESTION}";

impl PromptTemplate {
    pub fn parse(source: &str) -> Result<Self> {
        let sentinel = source.lines().next().unwrap_or("").trim_end().to_string();
        if sentinel.is_empty() || SLOTS.iter().any(|(p, _)| sentinel.contains(p)) {
            return Err(Error::invalid("template", "first line must be a plain sentinel marker"));
        }
        let mut pieces = Vec::new();
        let mut rest = source;
        while !rest.is_empty() {
            let next = SLOTS
                .iter()
                .filter_map(|&(pat, slot)| rest.find(pat).map(|at| (at, pat, slot)))
                .min_by_key(|&(at, _, _)| at);
            match next {
                Some((at, pat, slot)) => {
                    if at > 0 {
                        pieces.push(Piece::Text(rest[..at].to_string()));
                    }
                    pieces.push(Piece::Slot(slot));
                    rest = &rest[at + pat.len()..];
                }
                None => {
                    pieces.push(Piece::Text(rest.to_string()));
                    rest = "";
                }
            }
        }
        if !pieces.contains(&Piece::Slot(Slot::Question)) {
            return Err(Error::invalid("template", "missing {QUESTION}"));
        }
        Ok(Self {
            source: source.to_string(),
            sentinel,
            pieces,
            section_budget: DEFAULT_SECTION_BUDGET,
        })
    }

    pub fn with_section_budget(mut self, bytes: usize) -> Self {
        self.section_budget = bytes;
        self
    }

    pub fn sentinel(&self) -> &str {
        &self.sentinel
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn section_budget(&self) -> usize {
        self.section_budget
    }

    /// Fills the template in one pass, so placeholder-like text inside a
    /// document or the question is never expanded.
    pub fn render(&self, doc: &DiseaseDoc, question: &str) -> String {
        let cut = |s: &str| truncate_bytes(s, self.section_budget).to_string();
        let mut out = String::new();
        for piece in &self.pieces {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(Slot::Name) => out.push_str(&doc.name),
                Piece::Slot(Slot::Symptoms) => out.push_str(&cut(&doc.symptoms)),
                Piece::Slot(Slot::Diagnosis) => out.push_str(&cut(&doc.diagnosis)),
                Piece::Slot(Slot::Treatment) => out.push_str(&cut(&doc.treatment)),
                Piece::Slot(Slot::Prevention) => out.push_str(&cut(&doc.prevention)),
                Piece::Slot(Slot::Question) => out.push_str(question),
            }
        }
        out
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("default template is valid")
    }
}

/// Longest prefix of `s` of at most `max` bytes ending on a char boundary.
pub fn truncate_bytes(s: &str, max: usize) -> &str {
    &s[..s.floor_char_boundary(max)]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignedPrompt {
    pub original: String,
    /// Distinct matched documents in order of first appearance.
    pub matched_ids: Vec<String>,
    pub selected_id: Option<String>,
    pub context: String,
    pub prompt: String,
}

impl DesignedPrompt {
    fn passthrough(text: &str) -> Self {
        Self {
            original: text.to_string(),
            matched_ids: Vec::new(),
            selected_id: None,
            context: String::new(),
            prompt: text.to_string(),
        }
    }
}

/// Wraps `text` with the most likely matching document. Text without a
/// match, or already starting with the template's sentinel, passes through
/// unchanged.
pub fn design_prompt(text: &str, library: &KnowledgeLibrary, template: &PromptTemplate) -> DesignedPrompt {
    if text.starts_with(template.sentinel()) {
        return DesignedPrompt::passthrough(text);
    }
    let matches = library.extract_keywords(text);
    let Some(best) = most_likely(&matches) else {
        return DesignedPrompt::passthrough(text);
    };
    let doc = library.lookup(&best.doc_id).expect("matches refer to library docs");
    let mut matched_ids: Vec<String> = Vec::new();
    for m in &matches {
        if !matched_ids.contains(&m.doc_id) {
            matched_ids.push(m.doc_id.clone());
        }
    }
    let prompt = template.render(doc, text);
    let context = template.render(doc, "");
    DesignedPrompt {
        original: text.to_string(),
        matched_ids,
        selected_id: Some(doc.id.clone()),
        context,
        prompt,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn doc(id: &str, name: &str, aliases: &[&str]) -> DiseaseDoc {
        DiseaseDoc {
            id: id.into(),
            name: name.into(),
            aliases: aliases.iter().map(|s| s.to_string()).collect(),
            symptoms: format!("{name} symptoms"),
            diagnosis: format!("{name} diagnosis"),
            treatment: format!("{name} treatment"),
            prevention: format!("{name} prevention"),
            source: "test".into(),
        }
    }

    fn library() -> KnowledgeLibrary {
        KnowledgeLibrary::new(vec![
            doc("d1", "急性扁桃体炎", &[]),
            doc("d2", "扁桃体炎", &["tonsillitis"]),
            doc("d3", "Asthma", &["哮喘"]),
        ])
        .unwrap()
    }

    #[test]
    fn longest_term_wins() {
        let m = library().extract_keywords("我得了急性扁桃体炎怎么办");
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].doc_id, "d1");
        assert_eq!(m[0].term, "急性扁桃体炎");
        assert_eq!((m[0].start, m[0].end), (9, 27));
    }

    #[test]
    fn no_match_is_empty_and_scans_are_repeatable() {
        let lib = library();
        assert!(lib.extract_keywords("headache all day").is_empty());
        let text = "asthma and 扁桃体炎";
        assert_eq!(lib.extract_keywords(text), lib.extract_keywords(text));
    }

    #[test]
    fn alias_resolves_to_the_same_doc() {
        let lib = library();
        assert_eq!(lib.resolve("哮喘").unwrap().id, "d3");
        assert_eq!(lib.resolve("asthma").unwrap().id, "d3");
        assert!(matches!(lib.lookup("zz"), Err(Error::NotFound { .. })));
    }

    #[test]
    fn conflicting_terms_are_rejected() {
        let err = KnowledgeLibrary::new(vec![doc("a", "Flu", &[]), doc("b", "Influenza", &["flu"])]);
        assert!(err.is_err());
        assert!(KnowledgeLibrary::new(vec![doc("a", "", &[])]).is_err());
        assert!(KnowledgeLibrary::new(vec![doc("a", "X", &[]), doc("a", "Y", &[])]).is_err());
    }

    #[test]
    fn design_selects_first_match_only() {
        let lib = library();
        let t = PromptTemplate::default();
        let d = design_prompt("Asthma or tonsillitis?", &lib, &t);
        assert_eq!(d.matched_ids, ["d3", "d2"]);
        assert_eq!(d.selected_id.as_deref(), Some("d3"));
        assert!(d.prompt.contains("Asthma treatment"));
        assert!(!d.prompt.contains("扁桃体炎 treatment"));
        assert!(d.prompt.ends_with("Asthma or tonsillitis?"));
    }

    #[test]
    fn passthrough_and_idempotence() {
        let lib = library();
        let t = PromptTemplate::default();
        assert_eq!(design_prompt("just tired", &lib, &t).prompt, "just tired");
        let once = design_prompt("哮喘怎么治疗", &lib, &t).prompt;
        let twice = design_prompt(&once, &lib, &t).prompt;
        assert_eq!(once, twice);
        assert_eq!(twice.matches("[knowledge]").count(), 1);
    }

    #[test]
    fn sections_respect_the_byte_budget() {
        let mut d = doc("x", "Gout", &[]);
        d.treatment = "痛".repeat(10);
        let lib = KnowledgeLibrary::new(vec![d]).unwrap();
        let t = PromptTemplate::parse("##\nT={TREATMENT}|{QUESTION}").unwrap().with_section_budget(7);
        assert_eq!(design_prompt("gout?", &lib, &t).prompt, "##\nT=痛痛|gout?");
    }

    #[test]
    fn template_rules() {
        assert!(PromptTemplate::parse("##\n{NAME}").is_err());
        assert!(PromptTemplate::parse("{NAME}\n{QUESTION}").is_err());
        let t = PromptTemplate::parse("##\n{QUESTION}").unwrap();
        let lib = library();
        assert_eq!(design_prompt("{NAME} Asthma", &lib, &t).prompt, "##\n{NAME} Asthma");
    }
}
