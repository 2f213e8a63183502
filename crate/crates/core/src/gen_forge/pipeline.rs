//! Budgeted batch generation with checkpoint/resume.
//!
//! Records are processed in corpus order, in waves of at most
//! `max_concurrency` requests. Budget reservations and commits happen on the
//! calling thread in record order; only the backend calls run concurrently.
//! With a deterministic backend the output is therefore independent of the
//! concurrency setting.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::backend::{call_with_retry, settle, CompletionBackend, CompletionRequest, RetryPolicy};
use super::cost::{BudgetExceeded, CostMeter, GenerationReceipt};
use super::lint::lint_qa;
use super::parse::parse_qa;
use super::prompt::{build_prompt, FewShotExample};
use crate::corpus::Corpus;
use crate::jsonl;
use crate::template_forge::{Instruction, InstructionKind, Provenance, Turn};

#[derive(Debug, Clone)]
pub struct GenerationOptions {
    pub system_prompt: String,
    pub fewshot: Vec<FewShotExample>,
    pub retry: RetryPolicy,
    pub strict: bool,
    pub max_concurrency: usize,
    pub model: Option<String>,
    pub created_at: String,
    /// JSONL of processed records; read on start to resume.
    pub checkpoint: Option<PathBuf>,
    /// JSONL of `(image_id, reason)` for records left out of the output.
    pub skip_log: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub image_id: String,
    pub receipt: GenerationReceipt,
    pub instruction: Option<Instruction>,
    pub skip_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipEntry {
    pub image_id: String,
    pub reason: String,
}

/// Why and where a run stopped early.
#[derive(Debug, Clone, PartialEq)]
pub struct Halt {
    pub image_id: String,
    pub guard: BudgetExceeded,
    /// Records left unprocessed, including `image_id`.
    pub remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GenerationRun {
    pub instructions: Vec<Instruction>,
    pub receipts: Vec<GenerationReceipt>,
    pub skipped: Vec<SkipEntry>,
    pub warnings: Vec<String>,
    pub halted: Option<Halt>,
    /// Records restored from the checkpoint rather than requested again.
    pub resumed: usize,
}

impl GenerationRun {
    pub fn total_cost_usd(&self) -> f64 {
        self.receipts.iter().map(|r| r.estimated_cost_usd).sum()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GenerationError {
    #[error("budget must be positive, got {0}")]
    InvalidBudget(f64),
    #[error("max_concurrency must be at least 1")]
    InvalidConcurrency,
    #[error("reading checkpoint: {0}")]
    CheckpointRead(#[from] jsonl::JsonlError),
    /// Output produced before the failure is kept in `partial`.
    #[error("writing {path}: {source}")]
    LogWrite {
        path: String,
        #[source]
        source: std::io::Error,
        partial: Box<GenerationRun>,
    },
}

struct Logs {
    checkpoint: Option<(PathBuf, File)>,
    skips: Option<(PathBuf, File)>,
}

fn open_append(path: &PathBuf) -> std::io::Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    OpenOptions::new().create(true).append(true).open(path)
}

enum Outcome {
    Kept(Instruction),
    Skipped(String),
}

fn interpret(
    text: &str,
    image_id: &str,
    prompt_hash: String,
    opts: &GenerationOptions,
    warnings: &mut Vec<String>,
) -> Outcome {
    let parsed = match parse_qa(text, opts.strict) {
        Ok(p) => p,
        Err(e) => return Outcome::Skipped(format!("parse: {e}")),
    };
    let report = lint_qa(&parsed.pairs);
    if opts.strict && !report.is_clean() {
        let rules: Vec<String> = report
            .violations
            .iter()
            .map(|v| format!("{} {:?}", v.rule_id, v.excerpt))
            .collect();
        return Outcome::Skipped(format!("lint: {}", rules.join(", ")));
    }
    warnings.extend(parsed.warnings.iter().map(|w| format!("{image_id}: {w}")));
    warnings.extend(
        report
            .violations
            .iter()
            .map(|v| format!("{image_id}: lint {} {:?}", v.rule_id, v.excerpt)),
    );
    let turns = parsed
        .pairs
        .into_iter()
        .map(|p| Turn {
            question: p.question,
            answer: p.answer,
        })
        .collect();
    Outcome::Kept(Instruction::new(
        image_id,
        InstructionKind::Generation,
        turns,
        Provenance {
            method: "generation".into(),
            model: opts.model.clone(),
            prompt_hash: Some(prompt_hash),
            created_at: opts.created_at.clone(),
        },
    ))
}

/// Generates one instruction per record that parses (and, in strict mode,
/// lints clean). Stops before the first request whose worst-case cost would
/// push the meter past its budget.
pub fn generate_instructions(
    corpus: &Corpus,
    backend: &dyn CompletionBackend,
    meter: &CostMeter,
    opts: &GenerationOptions,
) -> Result<GenerationRun, GenerationError> {
    if !(meter.budget_usd() > 0.0) {
        return Err(GenerationError::InvalidBudget(meter.budget_usd()));
    }
    if opts.max_concurrency == 0 {
        return Err(GenerationError::InvalidConcurrency);
    }
    let mut run = GenerationRun::default();

    let mut done = HashSet::new();
    if let Some(path) = opts.checkpoint.as_ref().filter(|p| p.exists()) {
        for entry in jsonl::read::<CheckpointEntry>(path)? {
            if !done.insert(entry.image_id.clone()) {
                continue;
            }
            meter.add_spent(entry.receipt.estimated_cost_usd);
            run.receipts.push(entry.receipt);
            match (entry.instruction, entry.skip_reason) {
                (Some(ins), _) => run.instructions.push(ins),
                (None, reason) => run.skipped.push(SkipEntry {
                    image_id: entry.image_id,
                    reason: reason.unwrap_or_else(|| "skipped".into()),
                }),
            }
            run.resumed += 1;
        }
    }

    let mut logs = Logs {
        checkpoint: None,
        skips: None,
    };
    for (slot, path) in [
        (&mut logs.checkpoint, &opts.checkpoint),
        (&mut logs.skips, &opts.skip_log),
    ] {
        if let Some(path) = path {
            match open_append(path) {
                Ok(f) => *slot = Some((path.clone(), f)),
                Err(source) => {
                    return Err(GenerationError::LogWrite {
                        path: path.display().to_string(),
                        source,
                        partial: Box::new(run),
                    })
                }
            }
        }
    }

    let pending: Vec<_> = corpus
        .records
        .iter()
        .filter(|r| !done.contains(&r.image_id))
        .collect();

    let mut cursor = 0;
    while cursor < pending.len() {
        // Reserve a wave in record order.
        let mut wave = Vec::new();
        while wave.len() < opts.max_concurrency && cursor < pending.len() {
            let record = pending[cursor];
            let envelope = build_prompt(&opts.system_prompt, &record.merged_caption, &opts.fewshot);
            if record.merged_caption.trim().is_empty() {
                cursor += 1;
                let skip = SkipEntry {
                    image_id: record.image_id.clone(),
                    reason: "empty merged caption".into(),
                };
                if let Err(e) = log_skip(&mut logs, &skip) {
                    return Err(e.into_error(run));
                }
                run.skipped.push(skip);
                continue;
            }
            match meter.reserve(&envelope) {
                Ok(reservation) => {
                    wave.push((record, envelope, reservation));
                    cursor += 1;
                }
                // Outstanding reservations still hold their worst case;
                // settle them and try this record again before halting.
                Err(_) if !wave.is_empty() => break,
                Err(guard) => {
                    run.halted = Some(Halt {
                        image_id: record.image_id.clone(),
                        guard,
                        remaining: pending.len() - cursor,
                    });
                    break;
                }
            }
        }

        let results: Vec<_> = std::thread::scope(|scope| {
            let handles: Vec<_> = wave
                .iter()
                .map(|(_, envelope, _)| {
                    scope.spawn(move || {
                        let request = CompletionRequest {
                            envelope,
                            max_tokens: meter.max_completion_tokens(),
                        };
                        call_with_retry(&request, backend, &opts.retry)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("backend call panicked"))
                .collect()
        });

        for ((record, envelope, reservation), result) in wave.into_iter().zip(results) {
            let image_id = record.image_id.as_str();
            match result {
                Ok((completion, retries)) => {
                    let receipt = settle(
                        &envelope,
                        &completion,
                        retries,
                        reservation,
                        meter,
                        backend.id(),
                        image_id,
                    );
                    let outcome =
                        interpret(&completion.text, image_id, envelope.digest(), opts, &mut run.warnings);
                    let entry = match outcome {
                        Outcome::Kept(ins) => CheckpointEntry {
                            image_id: image_id.to_string(),
                            receipt: receipt.clone(),
                            instruction: Some(ins),
                            skip_reason: None,
                        },
                        Outcome::Skipped(reason) => CheckpointEntry {
                            image_id: image_id.to_string(),
                            receipt: receipt.clone(),
                            instruction: None,
                            skip_reason: Some(reason),
                        },
                    };
                    run.receipts.push(receipt);
                    if let Some(reason) = &entry.skip_reason {
                        let skip = SkipEntry {
                            image_id: image_id.to_string(),
                            reason: reason.clone(),
                        };
                        if let Err(e) = log_skip(&mut logs, &skip) {
                            return Err(e.into_error(run));
                        }
                        run.skipped.push(skip);
                    }
                    if let Err(e) = log_checkpoint(&mut logs, &entry) {
                        if let Some(ins) = entry.instruction {
                            run.instructions.push(ins);
                        }
                        return Err(e.into_error(run));
                    }
                    if let Some(ins) = entry.instruction {
                        run.instructions.push(ins);
                    }
                }
                Err(e) => {
                    meter.release(reservation);
                    let skip = SkipEntry {
                        image_id: image_id.to_string(),
                        reason: format!("backend: {e}"),
                    };
                    if let Err(e) = log_skip(&mut logs, &skip) {
                        return Err(e.into_error(run));
                    }
                    run.skipped.push(skip);
                }
            }
        }

        if run.halted.is_some() {
            break;
        }
    }
    Ok(run)
}

struct LogFailure {
    path: String,
    source: std::io::Error,
}

impl LogFailure {
    fn into_error(self, run: GenerationRun) -> GenerationError {
        GenerationError::LogWrite {
            path: self.path,
            source: self.source,
            partial: Box::new(run),
        }
    }
}

fn log_skip(logs: &mut Logs, skip: &SkipEntry) -> Result<(), LogFailure> {
    write_log(&mut logs.skips, skip)
}

fn log_checkpoint(logs: &mut Logs, entry: &CheckpointEntry) -> Result<(), LogFailure> {
    write_log(&mut logs.checkpoint, entry)
}

fn write_log<T: Serialize>(slot: &mut Option<(PathBuf, File)>, item: &T) -> Result<(), LogFailure> {
    match slot {
        Some((path, file)) => jsonl::append(file, item).map_err(|source| LogFailure {
            path: path.display().to_string(),
            source,
        }),
        None => Ok(()),
    }
}
