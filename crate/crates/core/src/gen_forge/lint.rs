//! Content rules for generated QA text: no magnification ratios, no dates,
//! no references to the caption's narration.

use std::ops::Range;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::parse::QaPair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LintRule {
    Magnification,
    Date,
    MetaPhrase,
}

impl LintRule {
    pub fn id(self) -> &'static str {
        match self {
            Self::Magnification => "MAGNIFICATION",
            Self::Date => "DATE",
            Self::MetaPhrase => "META_PHRASE",
        }
    }
}

static MAGNIFICATION: LazyLock<Vec<Regex>> = LazyLock::new(|| {
    [
        r"(?i)\b\d+(?:\.\d+)?[ \t]?[x×][ \t]*magnification",
        r"(?i)magnification[ \t]+(?:of[ \t]+)?\d+(?:\.\d+)?[ \t]?[x×]",
        r"(?i)\b\d+(?:\.\d+)?(?:x\b|×)",
    ]
    .iter()
    .map(|p| Regex::new(p).unwrap())
    .collect()
});

const MONTH: &str = r"(?:jan(?:uary)?|feb(?:ruary)?|mar(?:ch)?|apr(?:il)?|may|june?|july?|aug(?:ust)?|sep(?:t(?:ember)?)?|oct(?:ober)?|nov(?:ember)?|dec(?:ember)?)";

static DATE: LazyLock<Vec<Regex>> = LazyLock::new(|| {
    vec![
        Regex::new(r"\b(?:1[89]|20)\d{2}\b").unwrap(),
        Regex::new(&format!(
            r"(?i)\b{MONTH}\.?[ \t]+\d{{1,2}}(?:st|nd|rd|th)?\b"
        ))
        .unwrap(),
        Regex::new(&format!(
            r"(?i)\b\d{{1,2}}(?:st|nd|rd|th)?[ \t]+(?:of[ \t]+)?{MONTH}\b"
        ))
        .unwrap(),
    ]
});

static META_PHRASE: LazyLock<Vec<Regex>> =
    LazyLock::new(|| vec![Regex::new(r"(?i)\b(?:mention|title|context|narrator)\w*").unwrap()]);

/// Byte ranges of every rule hit in `text`; overlapping hits of the same rule
/// are merged into one.
pub fn lint_text(text: &str) -> Vec<(LintRule, Range<usize>)> {
    let mut out = Vec::new();
    for (rule, patterns) in [
        (LintRule::Magnification, &*MAGNIFICATION),
        (LintRule::Date, &*DATE),
        (LintRule::MetaPhrase, &*META_PHRASE),
    ] {
        let mut spans: Vec<Range<usize>> = patterns
            .iter()
            .flat_map(|re| re.find_iter(text).map(|m| m.range()))
            .collect();
        spans.sort_by_key(|r| (r.start, r.end));
        let mut merged: Vec<Range<usize>> = Vec::new();
        for span in spans {
            match merged.last_mut() {
                Some(last) if span.start < last.end => last.end = last.end.max(span.end),
                _ => merged.push(span),
            }
        }
        out.extend(merged.into_iter().map(|r| (rule, r)));
    }
    out.sort_by_key(|(_, r)| (r.start, r.end));
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule_id: String,
    pub pair_index: usize,
    /// `"question"` or `"answer"`.
    pub field: String,
    /// Character (not byte) offsets into the linted field.
    pub span: (usize, usize),
    pub excerpt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LintReport {
    pub violations: Vec<Violation>,
}

impl LintReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

fn char_offset(text: &str, byte: usize) -> usize {
    text[..byte].chars().count()
}

pub fn lint_qa(pairs: &[QaPair]) -> LintReport {
    let mut violations = Vec::new();
    for (i, pair) in pairs.iter().enumerate() {
        for (field, text) in [("question", &pair.question), ("answer", &pair.answer)] {
            for (rule, range) in lint_text(text) {
                violations.push(Violation {
                    rule_id: rule.id().to_string(),
                    pair_index: i,
                    field: field.to_string(),
                    span: (char_offset(text, range.start), char_offset(text, range.end)),
                    excerpt: text[range].to_string(),
                });
            }
        }
    }
    LintReport { violations }
}
