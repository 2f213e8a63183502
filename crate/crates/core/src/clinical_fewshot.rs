//! Patch manifests for the clinical tumour-detection task, K-shot splits
//! grouped by whole-slide image, and the VQA rendering of each patch.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::digest::derive_seed;
use crate::rng::sample_indices;
use crate::vqa_metrics::{EvalExample, QuestionType};

pub const CLINICAL_QUESTION: &str = "Is this pathological image showing a negative or positive result?";
pub const NEGATIVE_ANSWER: &str = "this is a negative pathological image";
pub const POSITIVE_ANSWER: &str = "this is a positive pathological image";

pub const DEFAULT_PATCH_SIZE: (u32, u32) = (512, 512);
pub const DEFAULT_REPLICATES: usize = 5;

/// Redraws per replicate when hunting for an unused WSI combination.
const MAX_REDRAWS: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum ClinicalError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate patch_id '{patch_id}'")]
    DuplicatePatch { line: usize, patch_id: String },
    #[error("line {line}: WSI '{wsi_id}' is listed under both {first} and {second}")]
    OrganConflict {
        line: usize,
        wsi_id: String,
        first: Organ,
        second: Organ,
    },
    #[error("{organ} {class}: {eligible} eligible training WSIs, k={k} requested")]
    NotEnoughWsis {
        organ: Organ,
        class: Label,
        eligible: usize,
        k: usize,
    },
    #[error("no {organ} WSIs from the test manifest are present in the patch manifest")]
    EmptyTestSet { organ: Organ },
    #[error("k and replicates must be at least 1")]
    InvalidArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Organ {
    Stomach,
    #[serde(alias = "intestines")]
    Intestine,
}

impl Organ {
    pub fn as_str(self) -> &'static str {
        match self {
            Organ::Stomach => "stomach",
            Organ::Intestine => "intestine",
        }
    }
}

impl fmt::Display for Organ {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Organ {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "stomach" => Ok(Organ::Stomach),
            "intestine" | "intestines" => Ok(Organ::Intestine),
            other => Err(format!("unknown organ '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Tumor,
    NonTumor,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Tumor => "tumor",
            Label::NonTumor => "non_tumor",
        }
    }

    pub fn answer(self) -> &'static str {
        match self {
            Label::Tumor => POSITIVE_ANSWER,
            Label::NonTumor => NEGATIVE_ANSWER,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "tumor" => Ok(Label::Tumor),
            "non_tumor" => Ok(Label::NonTumor),
            other => Err(format!("unknown label '{other}'")),
        }
    }
}

fn default_size() -> (u32, u32) {
    DEFAULT_PATCH_SIZE
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub patch_id: String,
    pub wsi_id: String,
    pub organ: Organ,
    pub label: Label,
    pub patch_ref: String,
    #[serde(default = "default_size")]
    pub size_px: (u32, u32),
}

#[derive(Debug, Deserialize)]
struct PatchRow {
    patch_id: String,
    wsi_id: String,
    organ: String,
    label: String,
    patch_ref: String,
}

/// Patch counts keyed by organ and label.
pub fn counts(patches: &[PatchRecord]) -> BTreeMap<(Organ, Label), usize> {
    let mut out = BTreeMap::new();
    for p in patches {
        *out.entry((p.organ, p.label)).or_insert(0) += 1;
    }
    out
}

/// Reads and validates a patch manifest CSV
/// (`patch_id,wsi_id,organ,label,patch_ref`).
pub fn ingest_patches(path: &Path) -> Result<Vec<PatchRecord>, ClinicalError> {
    let file = std::fs::File::open(path).map_err(|source| ClinicalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_patches(file)
}

pub fn parse_patches<R: std::io::Read>(reader: R) -> Result<Vec<PatchRecord>, ClinicalError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    let mut organs: HashMap<String, Organ> = HashMap::new();
    for (i, row) in rdr.deserialize::<PatchRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| ClinicalError::Parse {
            line,
            message: e.to_string(),
        })?;
        let organ: Organ = row
            .organ
            .parse()
            .map_err(|message| ClinicalError::Parse { line, message })?;
        let label: Label = row
            .label
            .parse()
            .map_err(|message| ClinicalError::Parse { line, message })?;
        if row.patch_id.is_empty() || row.wsi_id.is_empty() {
            return Err(ClinicalError::Parse {
                line,
                message: "empty patch_id or wsi_id".into(),
            });
        }
        if !ids.insert(row.patch_id.clone()) {
            return Err(ClinicalError::DuplicatePatch {
                line,
                patch_id: row.patch_id,
            });
        }
        match organs.get(&row.wsi_id) {
            Some(&first) if first != organ => {
                return Err(ClinicalError::OrganConflict {
                    line,
                    wsi_id: row.wsi_id,
                    first,
                    second: organ,
                })
            }
            Some(_) => {}
            None => {
                organs.insert(row.wsi_id.clone(), organ);
            }
        }
        out.push(PatchRecord {
            patch_id: row.patch_id,
            wsi_id: row.wsi_id,
            organ,
            label,
            patch_ref: row.patch_ref,
            size_px: DEFAULT_PATCH_SIZE,
        });
    }
    Ok(out)
}

/// One WSI id per line; blank lines and `#` comments are ignored.
pub fn read_test_manifest(path: &Path) -> Result<BTreeSet<String>, ClinicalError> {
    let text = std::fs::read_to_string(path).map_err(|source| ClinicalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(parse_test_manifest(&text))
}

pub fn parse_test_manifest(text: &str) -> BTreeSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

/// Class of a WSI: its majority patch label, tumour on a tie.
pub fn wsi_classes(patches: &[PatchRecord], organ: Organ) -> BTreeMap<String, Label> {
    let mut tally: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for p in patches.iter().filter(|p| p.organ == organ) {
        let t = tally.entry(&p.wsi_id).or_default();
        match p.label {
            Label::Tumor => t.0 += 1,
            Label::NonTumor => t.1 += 1,
        }
    }
    tally
        .into_iter()
        .map(|(id, (tumor, normal))| {
            let class = if tumor >= normal {
                Label::Tumor
            } else {
                Label::NonTumor
            };
            (id.to_string(), class)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub k: usize,
    pub organ: Organ,
    pub train_wsis: Vec<String>,
    pub test_wsis: Vec<String>,
    pub train_patches: Vec<PatchRecord>,
    pub test_patches: Vec<PatchRecord>,
    pub seed: u64,
    pub replicate_index: usize,
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Builds `replicates` K-shot splits for one organ. Each replicate samples
/// `k` training WSIs per class from the WSIs outside the test manifest; the
/// test side is every patch of the organ's test WSIs and is the same for all
/// replicates. Replicates use distinct WSI combinations while unused ones
/// remain.
pub fn make_kshot(
    patches: &[PatchRecord],
    organ: Organ,
    k: usize,
    test_manifest: &BTreeSet<String>,
    seed: u64,
    replicates: usize,
) -> Result<Vec<FewShotSplit>, ClinicalError> {
    if k == 0 || replicates == 0 {
        return Err(ClinicalError::InvalidArgs);
    }
    let classes = wsi_classes(patches, organ);
    let test_wsis: Vec<String> = classes
        .keys()
        .filter(|id| test_manifest.contains(*id))
        .cloned()
        .collect();
    if test_wsis.is_empty() {
        return Err(ClinicalError::EmptyTestSet { organ });
    }
    let eligible = |class: Label| -> Vec<&String> {
        classes
            .iter()
            .filter(|(id, c)| **c == class && !test_manifest.contains(*id))
            .map(|(id, _)| id)
            .collect()
    };
    let tumor = eligible(Label::Tumor);
    let normal = eligible(Label::NonTumor);
    for (class, pool) in [(Label::Tumor, &tumor), (Label::NonTumor, &normal)] {
        if pool.len() < k {
            return Err(ClinicalError::NotEnoughWsis {
                organ,
                class,
                eligible: pool.len(),
                k,
            });
        }
    }
    let combos = binomial(tumor.len(), k).saturating_mul(binomial(normal.len(), k));

    let test_set: HashSet<&str> = test_wsis.iter().map(String::as_str).collect();
    let test_patches: Vec<PatchRecord> = patches
        .iter()
        .filter(|p| p.organ == organ && test_set.contains(p.wsi_id.as_str()))
        .cloned()
        .collect();

    let seed_str = seed.to_string();
    let k_str = k.to_string();
    let mut used: HashSet<Vec<String>> = HashSet::new();
    let mut splits = Vec::with_capacity(replicates);
    for replicate in 1..=replicates {
        let rep_str = replicate.to_string();
        let mut chosen = None;
        for attempt in 0..MAX_REDRAWS {
            let attempt_str = attempt.to_string();
            let rep_seed = derive_seed([
                "kshot",
                seed_str.as_str(),
                organ.as_str(),
                k_str.as_str(),
                rep_str.as_str(),
                attempt_str.as_str(),
            ]);
            let mut train: Vec<String> = Vec::with_capacity(2 * k);
            for (salt, pool) in [(0u64, &tumor), (1u64, &normal)] {
                let mut picked: Vec<String> = sample_indices(pool.len(), k, rep_seed ^ salt)
                    .into_iter()
                    .map(|i| pool[i].clone())
                    .collect();
                picked.sort();
                train.extend(picked);
            }
            let fresh = !used.contains(&train);
            let exhausted = used.len() as u128 >= combos;
            if fresh || exhausted || attempt + 1 == MAX_REDRAWS {
                if !fresh {
                    log::warn!("{organ} k={k} replicate {replicate} reuses a WSI combination");
                }
                chosen = Some((rep_seed, train));
                break;
            }
        }
        let (rep_seed, train_wsis) = chosen.expect("at least one draw");
        used.insert(train_wsis.clone());
        let train_set: HashSet<&str> = train_wsis.iter().map(String::as_str).collect();
        let train_patches = patches
            .iter()
            .filter(|p| p.organ == organ && train_set.contains(p.wsi_id.as_str()))
            .cloned()
            .collect();
        splits.push(FewShotSplit {
            k,
            organ,
            train_wsis,
            test_wsis: test_wsis.clone(),
            train_patches,
            test_patches: test_patches.clone(),
            seed: rep_seed,
            replicate_index: replicate,
        });
    }
    Ok(splits)
}

/// Writes `<dir>/<organ>_k<k>_rep<i>.jsonl`, one split per file.
pub fn write_splits(dir: &Path, splits: &[FewShotSplit]) -> Result<Vec<std::path::PathBuf>, crate::jsonl::JsonlError> {
    let mut paths = Vec::with_capacity(splits.len());
    for s in splits {
        let path = dir.join(format!("{}_k{}_rep{}.jsonl", s.organ, s.k, s.replicate_index));
        crate::jsonl::write(&path, std::slice::from_ref(s))?;
        paths.push(path);
    }
    Ok(paths)
}

/// A patch rendered as a closed VQA item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaRecord {
    pub example_id: String,
    pub image_ref: String,
    pub question: String,
    pub answer: String,
}

impl VqaRecord {
    pub fn to_eval(&self, prediction: impl Into<String>) -> EvalExample {
        EvalExample {
            example_id: self.example_id.clone(),
            question: self.question.clone(),
            reference: self.answer.clone(),
            prediction: prediction.into(),
            qtype: QuestionType::Closed,
        }
    }
}

pub fn to_vqa(patches: &[PatchRecord]) -> Vec<VqaRecord> {
    patches
        .iter()
        .map(|p| VqaRecord {
            example_id: p.patch_id.clone(),
            image_ref: p.patch_ref.clone(),
            question: CLINICAL_QUESTION.to_string(),
            answer: p.label.answer().to_string(),
        })
        .collect()
}
