//! Parsing of labelled question/answer text returned by the backend.
//!
//! Recognised labels:
//! - at the start of a line, after optional list numbering (`1.`, `2)`, `-`,
//!   `*`) and optional `**` emphasis: `Question`, `Answer`, `Q`, `A`, any case,
//!   optionally followed by a number (`Q1:`), then `:`;
//! - anywhere after whitespace: `Question:` and `Answer:` (exact case).
//!
//! Text between one label and the next is the field value, trimmed.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

static LINE_LABEL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?mi)^[ \t]*(?:(?:\d+[.)]|[-*•])[ \t]*)?(?:\*\*)?(question|answer|q|a)(?:[ \t]*\d+)?(?:\*\*)?[ \t]*:(?:\*\*)?",
    )
    .unwrap()
});

static INLINE_LABEL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?:^|[ \t])(Question|Answer)[ \t]*:").unwrap());

pub const MIN_STRICT_PAIRS: usize = 4;
pub const MAX_STRICT_PAIRS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedQa {
    pub pairs: Vec<QaPair>,
    /// Lenient-mode notes, e.g. a pair count outside 4..=5.
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("no question/answer labels found in: {excerpt:?}")]
    NoLabels { excerpt: String },
    #[error("question {index} has no answer")]
    DanglingQuestion { index: usize },
    #[error("answer at pair {index} has no preceding question")]
    OrphanAnswer { index: usize },
    #[error("pair {index}: empty {field}")]
    EmptyField { index: usize, field: &'static str },
    #[error("expected 4-5 question-answer pairs, found {found}")]
    PairCount { found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Label {
    Question,
    Answer,
}

struct LabelMatch {
    start: usize,
    end: usize,
    label: Label,
}

fn classify(word: &str) -> Label {
    match word.to_ascii_lowercase().as_str() {
        "question" | "q" => Label::Question,
        _ => Label::Answer,
    }
}

fn find_labels(text: &str) -> Vec<LabelMatch> {
    let mut found: Vec<LabelMatch> = LINE_LABEL
        .captures_iter(text)
        .map(|c| {
            let m = c.get(0).unwrap();
            LabelMatch {
                start: m.start(),
                end: m.end(),
                label: classify(&c[1]),
            }
        })
        .chain(INLINE_LABEL.captures_iter(text).map(|c| {
            let word = c.get(1).unwrap();
            LabelMatch {
                start: word.start(),
                end: c.get(0).unwrap().end(),
                label: classify(word.as_str()),
            }
        }))
        .collect();
    found.sort_by(|a, b| a.start.cmp(&b.start).then(b.end.cmp(&a.end)));
    let mut kept: Vec<LabelMatch> = Vec::with_capacity(found.len());
    for m in found {
        if kept.last().is_none_or(|prev| m.start >= prev.end) {
            kept.push(m);
        }
    }
    kept
}

/// Extracts question/answer pairs in order. In strict mode a pair count
/// outside 4..=5 is an error; otherwise it becomes a warning.
pub fn parse_qa(text: &str, strict: bool) -> Result<ParsedQa, ParseError> {
    let labels = find_labels(text);
    if labels.is_empty() {
        return Err(ParseError::NoLabels {
            excerpt: text.chars().take(80).collect(),
        });
    }
    let mut pairs = Vec::new();
    let mut pending: Option<String> = None;
    for (i, m) in labels.iter().enumerate() {
        let value_end = labels.get(i + 1).map_or(text.len(), |n| n.start);
        let value = text[m.end..value_end].trim();
        let index = pairs.len() + 1;
        match (m.label, pending.take()) {
            (Label::Question, None) => {
                if value.is_empty() {
                    return Err(ParseError::EmptyField {
                        index,
                        field: "question",
                    });
                }
                pending = Some(value.to_string());
            }
            (Label::Question, Some(_)) => return Err(ParseError::DanglingQuestion { index }),
            (Label::Answer, None) => return Err(ParseError::OrphanAnswer { index }),
            (Label::Answer, Some(question)) => {
                if value.is_empty() {
                    return Err(ParseError::EmptyField {
                        index,
                        field: "answer",
                    });
                }
                pairs.push(QaPair {
                    question,
                    answer: value.to_string(),
                });
            }
        }
    }
    if pending.is_some() {
        return Err(ParseError::DanglingQuestion {
            index: pairs.len() + 1,
        });
    }
    let mut warnings = Vec::new();
    if !(MIN_STRICT_PAIRS..=MAX_STRICT_PAIRS).contains(&pairs.len()) {
        if strict {
            return Err(ParseError::PairCount { found: pairs.len() });
        }
        warnings.push(format!(
            "expected 4-5 question-answer pairs, found {}",
            pairs.len()
        ));
    }
    Ok(ParsedQa { pairs, warnings })
}

/// Canonical `Question:`/`Answer:` layout, one blank line between pairs.
pub fn render_qa(pairs: &[QaPair]) -> String {
    pairs
        .iter()
        .map(|p| format!("Question: {}\nAnswer: {}\n", p.question, p.answer))
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    const HPYLORI: &str = include_str!("../../tests/fixtures/hpylori_qa.txt");

    #[test]
    fn worked_example_parses_to_four_pairs() {
        let parsed = parse_qa(HPYLORI, true).unwrap();
        assert_eq!(parsed.pairs.len(), 4);
        assert_eq!(parsed.pairs[0].question, "What is the described condition?");
        assert!(parsed.pairs[3].answer.starts_with("The H. pylori organisms were visualized"));
        assert!(parsed.warnings.is_empty());
    }

    #[test]
    fn empty_answer_is_an_error_at_pair_one() {
        assert_eq!(
            parse_qa("Question: x Answer:", false),
            Err(ParseError::EmptyField {
                index: 1,
                field: "answer"
            })
        );
    }

    #[test]
    fn pair_count_strict_and_lenient() {
        let two = "Question: a?\nAnswer: b.\nQuestion: c?\nAnswer: d.";
        assert_eq!(parse_qa(two, true), Err(ParseError::PairCount { found: 2 }));
        let lenient = parse_qa(two, false).unwrap();
        assert_eq!(lenient.pairs.len(), 2);
        assert_eq!(lenient.warnings.len(), 1);
    }

    #[test]
    fn numbered_and_short_labels() {
        let text = "Here are the pairs:\n\n1. Q: What is shown?\n   A: Glands.\n2) **Question 2:** Any atypia?\n**Answer 2:** None seen,\nover two lines.\n- q3: Stain?\n- a3: H&E.";
        let parsed = parse_qa(text, false).unwrap();
        assert_eq!(
            parsed.pairs,
            vec![
                QaPair {
                    question: "What is shown?".into(),
                    answer: "Glands.".into()
                },
                QaPair {
                    question: "Any atypia?".into(),
                    answer: "None seen,\nover two lines.".into()
                },
                QaPair {
                    question: "Stain?".into(),
                    answer: "H&E.".into()
                },
            ]
        );
    }

    #[test]
    fn inline_labels_on_one_line() {
        let parsed = parse_qa("Question: what? Answer: that.", false).unwrap();
        assert_eq!(parsed.pairs[0].question, "what?");
        assert_eq!(parsed.pairs[0].answer, "that.");
    }

    #[test]
    fn structural_errors() {
        let long = "x".repeat(200);
        match parse_qa(&long, false) {
            Err(ParseError::NoLabels { excerpt }) => assert_eq!(excerpt.len(), 80),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(
            parse_qa("Question: a?\nAnswer: b\nQuestion: c?\nQuestion: d?\nAnswer: e", false),
            Err(ParseError::DanglingQuestion { index: 2 })
        );
        assert_eq!(
            parse_qa("Question: a?\nAnswer: b\nQuestion: c?", false),
            Err(ParseError::DanglingQuestion { index: 2 })
        );
        assert_eq!(
            parse_qa("Answer: b", false),
            Err(ParseError::OrphanAnswer { index: 1 })
        );
    }

    #[test]
    fn render_round_trip() {
        let pairs = parse_qa(HPYLORI, true).unwrap().pairs;
        assert_eq!(parse_qa(&render_qa(&pairs), true).unwrap().pairs, pairs);
    }

    #[test]
    fn answer_words_ending_in_a_are_not_labels() {
        let text = "Question: Which area?\nAnswer: Area: the mucosa.\nQuestion: Type A: what?\nAnswer: Type A: lesion";
        let parsed = parse_qa(text, false).unwrap();
        assert_eq!(parsed.pairs.len(), 2);
        assert_eq!(parsed.pairs[0].answer, "Area: the mucosa.");
    }
}
