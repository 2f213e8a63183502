//! VQA scoring: closed-end accuracy, open-end token recall, token-level
//! recall/precision/F1, answer-length statistics and the
//! performance-per-log-parameter cost ratio.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("example {0}: reference has no tokens after normalization")]
    EmptyReference(String),
    #[error("no examples to score")]
    Empty,
    #[error("example {id}: closed reference {reference:?} is not one of {positive:?}/{negative:?}")]
    BadPolarity {
        id: String,
        reference: String,
        positive: String,
        negative: String,
    },
    #[error("example {0} is not a closed question")]
    NotClosed(String),
    #[error("trainable parameter count must exceed 1e6, got {0}")]
    ParamsOutOfDomain(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionType {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalExample {
    pub example_id: String,
    pub question: String,
    pub reference: String,
    pub prediction: String,
    pub qtype: QuestionType,
}

/// Lowercases and splits on every run of non-alphanumeric characters.
pub fn normalize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn overlap(reference: &[String], prediction: &[String]) -> usize {
    let mut available: HashMap<&str, usize> = HashMap::new();
    for t in prediction {
        *available.entry(t).or_insert(0) += 1;
    }
    reference
        .iter()
        .filter(|t| match available.get_mut(t.as_str()) {
            Some(n) if *n > 0 => {
                *n -= 1;
                true
            }
            _ => false,
        })
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

/// Share of reference tokens (as a multiset) that also occur in the
/// prediction.
pub fn open_recall(reference: &str, prediction: &str) -> Result<f64, MetricsError> {
    Ok(prf(reference, prediction)?.recall)
}

pub fn prf(reference: &str, prediction: &str) -> Result<Prf, MetricsError> {
    let r = normalize(reference);
    if r.is_empty() {
        return Err(MetricsError::EmptyReference(reference.to_string()));
    }
    let p = normalize(prediction);
    let common = overlap(&r, &p) as f64;
    let recall = common / r.len() as f64;
    let precision = if p.is_empty() { 0.0 } else { common / p.len() as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Prf {
        recall,
        precision,
        f1,
    })
}

/// Token pair used by the closed-answer rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Polarity {
    pub positive: String,
    pub negative: String,
}

impl Polarity {
    pub fn yes_no() -> Self {
        Self {
            positive: "yes".into(),
            negative: "no".into(),
        }
    }

    /// The pair used for the clinical tumour-detection answers.
    pub fn positive_negative() -> Self {
        Self {
            positive: "positive".into(),
            negative: "negative".into(),
        }
    }

    /// Which side a reference answer names; `None` if it names neither or both.
    fn side(&self, tokens: &[String]) -> Option<bool> {
        let pos = tokens.contains(&self.positive);
        let neg = tokens.contains(&self.negative);
        match (pos, neg) {
            (true, false) => Some(true),
            (false, true) => Some(false),
            _ => None,
        }
    }
}

impl Default for Polarity {
    fn default() -> Self {
        Self::yes_no()
    }
}

/// Correct iff the prediction contains the reference's polarity token and
/// not the opposite one.
pub fn closed_correct(example: &EvalExample, polarity: &Polarity) -> Result<bool, MetricsError> {
    let reference = normalize(&example.reference);
    let side = polarity
        .side(&reference)
        .ok_or_else(|| MetricsError::BadPolarity {
            id: example.example_id.clone(),
            reference: example.reference.clone(),
            positive: polarity.positive.clone(),
            negative: polarity.negative.clone(),
        })?;
    let pred = normalize(&example.prediction);
    Ok(polarity.side(&pred) == Some(side))
}

/// Percentage of correct closed examples.
pub fn closed_accuracy(examples: &[EvalExample], polarity: &Polarity) -> Result<f64, MetricsError> {
    if examples.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut correct = 0usize;
    for ex in examples {
        if ex.qtype != QuestionType::Closed {
            return Err(MetricsError::NotClosed(ex.example_id.clone()));
        }
        correct += closed_correct(ex, polarity)? as usize;
    }
    Ok(100.0 * correct as f64 / examples.len() as f64)
}

/// Mean whitespace word counts of references and predictions.
pub fn length_stats(examples: &[EvalExample]) -> Result<(f64, f64), MetricsError> {
    if examples.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = examples.len() as f64;
    let r: usize = examples.iter().map(|e| e.reference.split_whitespace().count()).sum();
    let p: usize = examples.iter().map(|e| e.prediction.split_whitespace().count()).sum();
    Ok((r as f64 / n, p as f64 / n))
}

/// `metric_pct / log10(params / 1e6)`.
pub fn cost_ratio(metric_pct: f64, trainable_params: u64) -> Result<f64, MetricsError> {
    if trainable_params <= 1_000_000 {
        return Err(MetricsError::ParamsOutOfDomain(trainable_params));
    }
    Ok(metric_pct / (trainable_params as f64 / 1e6).log10())
}

/// Two-decimal rounding used in reports.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub example_id: String,
    pub qtype: QuestionType,
    /// Closed questions: 1 or 0.
    pub correct: Option<bool>,
    /// Open questions.
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    pub ref_len: usize,
    pub pred_len: usize,
}

/// Aggregate metrics. Fields for a question type with no scorable examples
/// are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub closed_accuracy_pct: Option<f64>,
    pub open_recall_pct: Option<f64>,
    pub recall_pct: Option<f64>,
    pub precision_pct: Option<f64>,
    /// Mean of per-example F1.
    pub f1_pct: Option<f64>,
    /// Harmonic mean of `recall_pct` and `precision_pct`.
    pub f1_of_means_pct: Option<f64>,
    pub mean_ref_len: f64,
    pub mean_pred_len: f64,
    pub n_open: usize,
    pub n_closed: usize,
    /// Open examples whose reference normalizes to nothing.
    pub n_excluded: usize,
    pub per_example: Vec<ExampleScore>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn harmonic(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Macro-averaged report over a mixed batch.
pub fn evaluate(examples: &[EvalExample], polarity: &Polarity) -> Result<MetricsReport, MetricsError> {
    if examples.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut per_example = Vec::with_capacity(examples.len());
    let mut excluded = 0usize;
    for ex in examples {
        let ref_len = ex.reference.split_whitespace().count();
        let pred_len = ex.prediction.split_whitespace().count();
        let mut score = ExampleScore {
            example_id: ex.example_id.clone(),
            qtype: ex.qtype,
            correct: None,
            recall: None,
            precision: None,
            f1: None,
            ref_len,
            pred_len,
        };
        match ex.qtype {
            QuestionType::Closed => score.correct = Some(closed_correct(ex, polarity)?),
            QuestionType::Open => match prf(&ex.reference, &ex.prediction) {
                Ok(s) => {
                    score.recall = Some(s.recall);
                    score.precision = Some(s.precision);
                    score.f1 = Some(s.f1);
                }
                Err(MetricsError::EmptyReference(_)) => {
                    log::warn!("example {}: empty reference, excluded", ex.example_id);
                    excluded += 1;
                    continue;
                }
                Err(e) => return Err(e),
            },
        }
        per_example.push(score);
    }
    let open: Vec<_> = per_example
        .iter()
        .filter(|s| s.qtype == QuestionType::Open)
        .collect();
    let closed: Vec<_> = per_example
        .iter()
        .filter(|s| s.qtype == QuestionType::Closed)
        .collect();
    let pct = |v: Option<f64>| v.map(|x| 100.0 * x);
    let recall = pct(mean(open.iter().filter_map(|s| s.recall)));
    let precision = pct(mean(open.iter().filter_map(|s| s.precision)));
    let (mean_ref_len, mean_pred_len) = if per_example.is_empty() {
        (0.0, 0.0)
    } else {
        let n = per_example.len() as f64;
        (
            per_example.iter().map(|s| s.ref_len as f64).sum::<f64>() / n,
            per_example.iter().map(|s| s.pred_len as f64).sum::<f64>() / n,
        )
    };
    Ok(MetricsReport {
        closed_accuracy_pct: pct(mean(
            closed.iter().map(|s| if s.correct == Some(true) { 1.0 } else { 0.0 }),
        )),
        open_recall_pct: recall,
        recall_pct: recall,
        precision_pct: precision,
        f1_pct: pct(mean(open.iter().filter_map(|s| s.f1))),
        f1_of_means_pct: recall.zip(precision).map(|(r, p)| harmonic(r, p)),
        mean_ref_len,
        mean_pred_len,
        n_open: open.len(),
        n_closed: closed.len(),
        n_excluded: excluded,
        per_example,
    })
}

/// Plain-text summary table.
pub fn render_table(report: &MetricsReport) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
    let rows = [
        ("closed accuracy (%)", fmt(report.closed_accuracy_pct)),
        ("open recall (%)", fmt(report.open_recall_pct)),
        ("precision (%)", fmt(report.precision_pct)),
        ("f1 (%)", fmt(report.f1_pct)),
        ("mean reference length", format!("{:.2}", report.mean_ref_len)),
        ("mean prediction length", format!("{:.2}", report.mean_pred_len)),
        ("open examples", report.n_open.to_string()),
        ("closed examples", report.n_closed.to_string()),
        ("excluded", report.n_excluded.to_string()),
    ];
    let mut out = String::new();
    for (name, value) in rows {
        out.push_str(&format!("{name:<24}{value:>10}\n"));
    }
    out
}
