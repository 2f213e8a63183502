//! Data and evaluation machinery for pathology visual question answering.
//!
//! The crate covers the whole instruction-data pipeline: caption corpora
//! ([`corpus`]), template-based instructions ([`template_forge`]),
//! generation-based instructions driven through a chat-completion backend
//! ([`gen_forge`]), dataset assembly and splitting ([`instruction_store`]),
//! VQA scoring ([`vqa_metrics`]), the alignment and instruction-tuning
//! objectives ([`loss_kernel`]) and the clinical few-shot protocol
//! ([`clinical_fewshot`]).

pub mod clinical_fewshot;
pub mod corpus;
pub mod digest;
pub mod gen_forge;
pub mod instruction_store;
pub mod jsonl;
pub mod loss_kernel;
pub mod rng;
pub mod template_forge;
pub mod vqa_metrics;

pub use corpus::{Corpus, ImageTextRecord};
pub use template_forge::{Instruction, InstructionKind, Provenance, TemplateBank, Turn};

/// Version string written into dataset manifests.
pub const TOOL_VERSION: &str = concat!("clover-forge ", env!("CARGO_PKG_VERSION"));
