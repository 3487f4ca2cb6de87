//! Repetition and length heuristics for spotting collapsed generations.
//!
//! Texts are measured in characters, so a CJK answer such as `治疗。` counts as
//! three units regardless of its UTF-8 width.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

const NGRAM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegenerateThresholds {
    /// Mean length below which outputs count as collapsed.
    pub min_len: usize,
    /// Mean repetition ratio above which outputs count as collapsed.
    pub max_rep_ratio: f64,
}

impl Default for DegenerateThresholds {
    fn default() -> Self {
        Self {
            min_len: 8,
            max_rep_ratio: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegenerateReport {
    pub degenerate: bool,
    /// Mean of the per-text repetition ratios.
    pub repetition_ratio: f64,
    pub mean_length: f64,
    pub per_text: Vec<f64>,
}

/// `1 − distinct/total` over character 4-grams; 0 for texts shorter than 4.
pub fn repetition_ratio(text: &str) -> f64 {
    let chars: Vec<char> = text.chars().collect();
    if chars.len() < NGRAM {
        return 0.0;
    }
    let grams = chars.windows(NGRAM);
    let total = grams.len();
    let distinct: BTreeSet<&[char]> = grams.collect();
    1.0 - distinct.len() as f64 / total as f64
}

pub fn detect_degenerate<S: AsRef<str>>(texts: &[S], thresholds: DegenerateThresholds) -> DegenerateReport {
    if texts.is_empty() {
        return DegenerateReport {
            degenerate: true,
            repetition_ratio: 0.0,
            mean_length: 0.0,
            per_text: Vec::new(),
        };
    }
    let per_text: Vec<f64> = texts.iter().map(|t| repetition_ratio(t.as_ref())).collect();
    let n = texts.len() as f64;
    let repetition = per_text.iter().sum::<f64>() / n;
    let mean_length = texts.iter().map(|t| t.as_ref().chars().count() as f64).sum::<f64>() / n;
    DegenerateReport {
        degenerate: mean_length < thresholds.min_len as f64 || repetition > thresholds.max_rep_ratio,
        repetition_ratio: repetition,
        mean_length,
        per_text,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::String;

    #[test]
    fn short_text_has_zero_ratio_and_is_flagged_by_length() {
        assert_eq!(repetition_ratio("abc"), 0.0);
        let r = detect_degenerate(&["abc"], DegenerateThresholds::default());
        assert!(r.degenerate);
        assert_eq!(r.mean_length, 3.0);
    }

    #[test]
    fn repeated_phrase_is_flagged() {
        let text = "A B C D ".repeat(10);
        let text = text.trim_end();
        // 79 chars, 76 windows, period 8 gives 8 distinct.
        let ratio = repetition_ratio(text);
        assert!((ratio - (1.0 - 8.0 / 76.0)).abs() < 1e-12);
        assert!(detect_degenerate(&[text], DegenerateThresholds::default()).degenerate);
    }

    #[test]
    fn distinct_text_is_healthy() {
        let text: String = (0..40u8).map(|i| char::from(b'0' + i)).collect();
        assert_eq!(repetition_ratio(&text), 0.0);
        assert!(!detect_degenerate(&[text], DegenerateThresholds::default()).degenerate);
    }

    #[test]
    fn collapsed_answer_is_flagged() {
        let r = detect_degenerate(&["治疗。", "治疗。"], DegenerateThresholds::default());
        assert!(r.degenerate);
        let looped = "治疗".repeat(20);
        assert!(repetition_ratio(&looped) > 0.9);
    }
}
