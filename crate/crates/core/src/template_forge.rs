//! Template-based instructions: one bank question per image, answered by the
//! merged caption.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::{digest, rng};

const DEFAULT_BANK: &str = include_str!("../resources/templates.txt");

/// Timestamp used when the caller does not pin one.
pub const DEFAULT_CREATED_AT: &str = "1970-01-01T00:00:00Z";

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("template bank is empty")]
    EmptyBank,
    #[error("template bank line {line}: duplicate statement '{statement}'")]
    DuplicateStatement { line: usize, statement: String },
    #[error("record '{0}' has an empty merged caption")]
    EmptyCaption(String),
    #[error("reading template bank {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateBank {
    statements: Vec<String>,
}

impl TemplateBank {
    /// Parses one statement per line, skipping blanks and `#` comments.
    pub fn parse(text: &str) -> Result<Self, TemplateError> {
        let mut seen = HashSet::new();
        let mut statements = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !seen.insert(line.to_string()) {
                return Err(TemplateError::DuplicateStatement {
                    line: idx + 1,
                    statement: line.to_string(),
                });
            }
            statements.push(line.to_string());
        }
        if statements.is_empty() {
            return Err(TemplateError::EmptyBank);
        }
        Ok(Self { statements })
    }

    pub fn from_file(path: &Path) -> Result<Self, TemplateError> {
        let text = std::fs::read_to_string(path).map_err(|source| TemplateError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn statements(&self) -> &[String] {
        &self.statements
    }

    pub fn len(&self) -> usize {
        self.statements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.statements.is_empty()
    }

    pub fn contains(&self, question: &str) -> bool {
        self.statements.iter().any(|s| s == question)
    }
}

impl Default for TemplateBank {
    /// The 17 shipped detailed-description statements.
    fn default() -> Self {
        Self::parse(DEFAULT_BANK).expect("bundled template bank is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstructionKind {
    Generation,
    Template,
}

impl InstructionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Generation => "generation",
            Self::Template => "template",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    pub model: Option<String>,
    pub prompt_hash: Option<String>,
    pub created_at: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub instruction_id: String,
    pub image_id: String,
    pub kind: InstructionKind,
    pub turns: Vec<Turn>,
    pub provenance: Provenance,
}

impl Instruction {
    /// Builds an instruction and derives its id from image, kind and questions.
    pub fn new(
        image_id: impl Into<String>,
        kind: InstructionKind,
        turns: Vec<Turn>,
        provenance: Provenance,
    ) -> Self {
        let image_id = image_id.into();
        let instruction_id = Self::compute_id(&image_id, kind, &turns);
        Self {
            instruction_id,
            image_id,
            kind,
            turns,
            provenance,
        }
    }

    pub fn compute_id(image_id: &str, kind: InstructionKind, turns: &[Turn]) -> String {
        digest::sha256_fields(
            [image_id, kind.as_str()]
                .into_iter()
                .chain(turns.iter().map(|t| t.question.as_str())),
        )
    }

    /// Checks the structural invariants; returns a description of the first
    /// violation.
    pub fn validate(&self) -> Result<(), String> {
        if self.turns.is_empty() {
            return Err(format!("instruction {} has no turns", self.instruction_id));
        }
        for (i, t) in self.turns.iter().enumerate() {
            if t.question.trim().is_empty() || t.answer.trim().is_empty() {
                return Err(format!(
                    "instruction {} turn {} has an empty field",
                    self.instruction_id,
                    i + 1
                ));
            }
        }
        if self.kind == InstructionKind::Template && self.turns.len() != 1 {
            return Err(format!(
                "template instruction {} has {} turns",
                self.instruction_id,
                self.turns.len()
            ));
        }
        let expected = Self::compute_id(&self.image_id, self.kind, &self.turns);
        if expected != self.instruction_id {
            return Err(format!(
                "instruction {} does not match its content digest",
                self.instruction_id
            ));
        }
        Ok(())
    }

    /// Same image, kind and turns; provenance is ignored.
    pub fn same_content(&self, other: &Self) -> bool {
        self.image_id == other.image_id && self.kind == other.kind && self.turns == other.turns
    }
}

/// Picks a bank index for one record. The draw depends only on the run seed
/// and the image id, so records can be processed in any order.
pub fn pick_template(bank_len: usize, seed: u64, image_id: &str) -> usize {
    let seed_str = seed.to_string();
    let mut rng = rng::seeded(digest::derive_seed([seed_str.as_str(), image_id]));
    rng.random_range(0..bank_len)
}

/// One template instruction per record; the answer is the merged caption
/// verbatim.
pub fn build_template_instructions(
    corpus: &Corpus,
    bank: &TemplateBank,
    seed: u64,
    created_at: &str,
) -> Result<Vec<Instruction>, TemplateError> {
    if bank.is_empty() {
        return Err(TemplateError::EmptyBank);
    }
    corpus
        .records
        .iter()
        .map(|record| {
            if record.merged_caption.trim().is_empty() {
                return Err(TemplateError::EmptyCaption(record.image_id.clone()));
            }
            let question = bank.statements[pick_template(bank.len(), seed, &record.image_id)].clone();
            Ok(Instruction::new(
                record.image_id.clone(),
                InstructionKind::Template,
                vec![Turn {
                    question,
                    answer: record.merged_caption.clone(),
                }],
                Provenance {
                    method: "template".into(),
                    model: None,
                    prompt_hash: None,
                    created_at: created_at.to_string(),
                },
            ))
        })
        .collect()
}
