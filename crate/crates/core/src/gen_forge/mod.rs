//! Generation-based instructions: the PVLM-oriented prompt, chat-completion
//! backends with retry and cost accounting, QA parsing and linting, and the
//! budgeted batch driver.

mod backend;
mod cost;
mod lint;
mod parse;
mod pipeline;
mod prompt;

pub use backend::{
    call_with_retry, complete, BackendError, Completion, CompletionBackend, CompletionRequest, CompleteError,
    LiveBackend, MockBackend, RetryPolicy, Usage, API_KEY_ENV, DIALECT_OPENAI_CHAT,
};
pub use cost::{
    estimate_prompt_tokens, estimate_tokens, BudgetExceeded, CostMeter, GenerationReceipt, Rates,
    Reservation,
};
pub use lint::{lint_qa, lint_text, LintReport, LintRule, Violation};
pub use parse::{parse_qa, render_qa, ParseError, ParsedQa, QaPair};
pub use pipeline::{
    generate_instructions, CheckpointEntry, GenerationError, GenerationOptions, GenerationRun,
    Halt, SkipEntry,
};
pub use prompt::{
    build_prompt, default_system_prompt, load_fewshot, FewShotExample, Message, PromptEnvelope,
    Role,
};
