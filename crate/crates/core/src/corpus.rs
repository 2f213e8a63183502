//! Image-caption corpora: manifest ingestion, caption merging, the
//! minimum-length filter and seeded sampling.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::rng;

/// Default minimum word count of a merged caption.
pub const DEFAULT_MIN_WORDS: usize = 25;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("cannot sample {requested} records from a corpus of {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("min_words must be at least 1")]
    InvalidMinWords,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ManifestFormat {
    Jsonl,
    Csv,
}

impl ManifestFormat {
    /// Guesses the format from a file extension, defaulting to JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Self::Csv,
            _ => Self::Jsonl,
        }
    }
}

impl std::str::FromStr for ManifestFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" => Ok(Self::Jsonl),
            "csv" => Ok(Self::Csv),
            other => Err(format!("unknown manifest format '{other}' (expected jsonl or csv)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageTextRecord {
    pub image_id: String,
    #[serde(default)]
    pub image_ref: String,
    pub captions: Vec<String>,
    #[serde(default)]
    pub merged_caption: String,
    #[serde(default)]
    pub source: String,
}

impl ImageTextRecord {
    /// Captions trimmed and joined with single spaces, empty captions skipped.
    pub fn merge_captions(&self) -> String {
        self.captions
            .iter()
            .map(|c| c.trim())
            .filter(|c| !c.is_empty())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub records: Vec<ImageTextRecord>,
    pub seed: u64,
}

/// Side information produced while ingesting a manifest.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub rows: usize,
    pub duplicate_captions_dropped: usize,
}

/// Number of maximal non-whitespace runs.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    #[serde(default)]
    image_id: Option<String>,
    #[serde(default)]
    image_ref: Option<String>,
    #[serde(default)]
    caption: Option<String>,
    #[serde(default)]
    source: Option<String>,
}

struct Builder {
    records: Vec<ImageTextRecord>,
    index: HashMap<String, usize>,
    seen: HashSet<(String, String)>,
    stats: IngestStats,
}

impl Builder {
    fn new() -> Self {
        Self {
            records: Vec::new(),
            index: HashMap::new(),
            seen: HashSet::new(),
            stats: IngestStats::default(),
        }
    }

    fn push(&mut self, line: usize, row: ManifestRow) -> Result<(), CorpusError> {
        self.stats.rows += 1;
        let image_id = row
            .image_id
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .ok_or_else(|| CorpusError::Parse {
                line,
                message: "missing image_id".into(),
            })?;
        let caption = row
            .caption
            .filter(|c| !c.trim().is_empty())
            .ok_or_else(|| CorpusError::Parse {
                line,
                message: format!("record '{image_id}' has no caption"),
            })?;
        if !self.seen.insert((image_id.clone(), caption.clone())) {
            self.stats.duplicate_captions_dropped += 1;
            return Ok(());
        }
        match self.index.get(&image_id) {
            Some(&i) => self.records[i].captions.push(caption),
            None => {
                self.index.insert(image_id.clone(), self.records.len());
                self.records.push(ImageTextRecord {
                    image_id,
                    image_ref: row.image_ref.unwrap_or_default(),
                    captions: vec![caption],
                    merged_caption: String::new(),
                    source: row.source.unwrap_or_default(),
                });
            }
        }
        Ok(())
    }
}

/// Reads a caption manifest. Rows sharing an `image_id` are folded into one
/// record with captions in file order; exact duplicate captions are dropped
/// and counted.
pub fn ingest_manifest(
    path: &Path,
    format: ManifestFormat,
) -> Result<(Corpus, IngestStats), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut builder = Builder::new();
    match format {
        ManifestFormat::Jsonl => {
            for (idx, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(io_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                let row: ManifestRow =
                    serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                        line: idx + 1,
                        message: e.to_string(),
                    })?;
                builder.push(idx + 1, row)?;
            }
        }
        ManifestFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(file);
            for result in reader.deserialize::<ManifestRow>() {
                let row = result.map_err(|e| CorpusError::Parse {
                    line: e.position().map(|p| p.line() as usize).unwrap_or(0),
                    message: e.to_string(),
                })?;
                // header is line 1
                let line = builder.stats.rows + 2;
                builder.push(line, row)?;
            }
        }
    }
    Ok((
        Corpus {
            records: builder.records,
            seed: 0,
        },
        builder.stats,
    ))
}

/// Sets every `merged_caption` and drops records with fewer than `min_words`
/// words. Order is preserved.
pub fn merge_and_filter(corpus: &Corpus, min_words: usize) -> Result<Corpus, CorpusError> {
    if min_words == 0 {
        return Err(CorpusError::InvalidMinWords);
    }
    let records = corpus
        .records
        .iter()
        .filter_map(|r| {
            let merged = r.merge_captions();
            (word_count(&merged) >= min_words).then(|| ImageTextRecord {
                merged_caption: merged,
                ..r.clone()
            })
        })
        .collect();
    Ok(Corpus {
        records,
        seed: corpus.seed,
    })
}

/// Uniform sample without replacement, in draw order.
pub fn sample(corpus: &Corpus, size: usize, seed: u64) -> Result<Corpus, CorpusError> {
    let available = corpus.records.len();
    if size > available {
        return Err(CorpusError::SampleTooLarge {
            requested: size,
            available,
        });
    }
    let records = rng::sample_indices(available, size, seed)
        .into_iter()
        .map(|i| corpus.records[i].clone())
        .collect();
    Ok(Corpus { records, seed })
}

/// Reads a corpus previously written by [`write_corpus`].
pub fn read_corpus(path: &Path) -> Result<Corpus, crate::jsonl::JsonlError> {
    Ok(Corpus {
        records: crate::jsonl::read(path)?,
        seed: 0,
    })
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<(), crate::jsonl::JsonlError> {
    crate::jsonl::write(path, &corpus.records)
}
