//! Instruction datasets: persistence, hybrid assembly, subset splits and
//! scale sampling.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::jsonl::{self, JsonlError};
use crate::template_forge::{Instruction, InstructionKind};
use crate::{digest, rng, TOOL_VERSION};

/// Task prompt placed before every question when instruction data is fed to
/// the language model during instruction tuning.
pub const STAGE2_TASK_PROMPT: &str =
    "Now that you are a pathologist, please answer the following questions based on the images";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("instruction id {0} appears twice with different content")]
    IdCollision(String),
    #[error("duplicate instruction id {0}")]
    DuplicateId(String),
    #[error("cannot split {items} items into {k} subsets")]
    InvalidSplit { items: usize, k: usize },
    #[error("cannot sample {requested} items from a dataset of {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("invalid instruction: {0}")]
    Invalid(String),
    #[error("manifest counts {manifest:?} disagree with items {actual:?}")]
    ManifestMismatch {
        manifest: BTreeMap<InstructionKind, usize>,
        actual: BTreeMap<InstructionKind, usize>,
    },
    #[error(transparent)]
    Io(#[from] JsonlError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Manifest {
    pub counts: BTreeMap<InstructionKind, usize>,
    /// Digest of the corpus the items were built from, when known.
    pub source_corpus_digest: Option<String>,
    /// Digests of the datasets this one was derived from.
    pub parents: Vec<String>,
    pub seed: Option<u64>,
    pub prng: String,
    pub tool_version: String,
    /// Digest of the item id sequence.
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionDataset {
    pub items: Vec<Instruction>,
    pub manifest: Manifest,
}

fn counts(items: &[Instruction]) -> BTreeMap<InstructionKind, usize> {
    let mut out = BTreeMap::new();
    for item in items {
        *out.entry(item.kind).or_insert(0) += 1;
    }
    out
}

fn items_digest(items: &[Instruction]) -> String {
    digest::sha256_fields(items.iter().map(|i| i.instruction_id.as_str()))
}

impl InstructionDataset {
    /// Wraps `items` after checking id uniqueness and per-item invariants.
    pub fn new(items: Vec<Instruction>) -> Result<Self, StoreError> {
        let mut seen = HashSet::new();
        for item in &items {
            item.validate().map_err(StoreError::Invalid)?;
            if !seen.insert(item.instruction_id.as_str()) {
                return Err(StoreError::DuplicateId(item.instruction_id.clone()));
            }
        }
        Ok(Self::derived(items, Vec::new(), None))
    }

    fn derived(items: Vec<Instruction>, parents: Vec<String>, seed: Option<u64>) -> Self {
        let manifest = Manifest {
            counts: counts(&items),
            source_corpus_digest: None,
            parents,
            seed,
            prng: rng::PRNG_ALGORITHM.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            digest: items_digest(&items),
        };
        Self { items, manifest }
    }

    pub fn with_source_corpus(mut self, corpus_digest: impl Into<String>) -> Self {
        self.manifest.source_corpus_digest = Some(corpus_digest.into());
        self
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> HashSet<&str> {
        self.items.iter().map(|i| i.instruction_id.as_str()).collect()
    }

    pub fn digest(&self) -> &str {
        &self.manifest.digest
    }

    pub fn count(&self, kind: InstructionKind) -> usize {
        self.manifest.counts.get(&kind).copied().unwrap_or(0)
    }
}

/// Sidecar path for a dataset file: `<file>.manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    path.with_file_name(name)
}

/// Writes items as JSONL plus the manifest sidecar, both atomically.
pub fn write_dataset(path: &Path, ds: &InstructionDataset) -> Result<(), StoreError> {
    jsonl::write(path, &ds.items)?;
    let manifest = serde_json::to_string_pretty(&ds.manifest).map_err(JsonlError::from)?;
    jsonl::write_atomic(&manifest_path(path), format!("{manifest}\n").as_bytes())?;
    Ok(())
}

/// Reads a dataset. The sidecar is optional; when present its counts must
/// match the items.
pub fn read_dataset(path: &Path) -> Result<InstructionDataset, StoreError> {
    let items: Vec<Instruction> = jsonl::read(path)?;
    let mut ds = InstructionDataset::new(items)?;
    let sidecar = manifest_path(path);
    if sidecar.exists() {
        let text = std::fs::read_to_string(&sidecar).map_err(|source| JsonlError::Io {
            path: sidecar.display().to_string(),
            source,
        })?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| JsonlError::Parse {
            path: sidecar.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if manifest.counts != ds.manifest.counts {
            return Err(StoreError::ManifestMismatch {
                manifest: manifest.counts,
                actual: ds.manifest.counts,
            });
        }
        ds.manifest = Manifest {
            digest: ds.manifest.digest,
            counts: ds.manifest.counts,
            ..manifest
        };
    }
    Ok(ds)
}

/// Union of two datasets with id-level deduplication: items of `generation`
/// first, then items of `template` not already present.
pub fn assemble_hybrid(
    generation: &InstructionDataset,
    template: &InstructionDataset,
) -> Result<InstructionDataset, StoreError> {
    let mut index: HashMap<&str, &Instruction> = HashMap::new();
    let mut items = Vec::with_capacity(generation.len() + template.len());
    for item in generation.items.iter().chain(&template.items) {
        match index.get(item.instruction_id.as_str()) {
            Some(existing) if existing.same_content(item) => {}
            Some(_) => return Err(StoreError::IdCollision(item.instruction_id.clone())),
            None => {
                index.insert(&item.instruction_id, item);
                items.push(item.clone());
            }
        }
    }
    let parents = vec![generation.digest().to_string(), template.digest().to_string()];
    let mut out = InstructionDataset::derived(items, parents, None);
    out.manifest.source_corpus_digest = match (
        &generation.manifest.source_corpus_digest,
        &template.manifest.source_corpus_digest,
    ) {
        (Some(a), Some(b)) if a == b => Some(a.clone()),
        _ => None,
    };
    Ok(out)
}

/// Partitions `ds` into `k` subsets: items are shuffled under `seed` and dealt
/// round-robin, so sizes differ by at most one. Each subset keeps the input's
/// relative order.
pub fn split_subsets(
    ds: &InstructionDataset,
    k: usize,
    seed: u64,
) -> Result<Vec<InstructionDataset>, StoreError> {
    if k == 0 || k > ds.len() {
        return Err(StoreError::InvalidSplit { items: ds.len(), k });
    }
    if k == 1 {
        return Ok(vec![ds.clone()]);
    }
    let mut assignment = vec![0usize; ds.len()];
    for (position, index) in rng::permutation(ds.len(), seed).into_iter().enumerate() {
        assignment[index] = position % k;
    }
    let mut buckets: Vec<Vec<Instruction>> = vec![Vec::new(); k];
    for (item, &bucket) in ds.items.iter().zip(&assignment) {
        buckets[bucket].push(item.clone());
    }
    Ok(buckets
        .into_iter()
        .map(|items| InstructionDataset::derived(items, vec![ds.digest().to_string()], Some(seed)))
        .collect())
}

/// Uniform sample without replacement, in draw order.
pub fn sample_scale(
    ds: &InstructionDataset,
    size: usize,
    seed: u64,
) -> Result<InstructionDataset, StoreError> {
    if size > ds.len() {
        return Err(StoreError::SampleTooLarge {
            requested: size,
            available: ds.len(),
        });
    }
    let items = rng::sample_indices(ds.len(), size, seed)
        .into_iter()
        .map(|i| ds.items[i].clone())
        .collect();
    Ok(InstructionDataset::derived(
        items,
        vec![ds.digest().to_string()],
        Some(seed),
    ))
}

/// Model input for one turn: the task prompt followed by the question.
pub fn stage2_input(question: &str) -> String {
    format!("{STAGE2_TASK_PROMPT}. {question}")
}
