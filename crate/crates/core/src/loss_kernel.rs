//! Alignment objectives (image-text contrastive, image-grounded generation,
//! image-text matching) and the autoregressive answer likelihood used for
//! instruction tuning, as pure functions over supplied embeddings and
//! probabilities, with analytic gradients and a central-difference checker.

use ndarray::{Array2, Array3, ArrayView2};
use serde::Serialize;

/// Probabilities are clamped to at least this before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

const NORM_TOL: f64 = 1e-6;
const SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KernelError {
    #[error("contrastive loss needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("{what} row {row} has L2 norm {norm}, expected 1")]
    NotNormalized {
        what: &'static str,
        row: String,
        norm: f64,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("empty token sequence")]
    EmptySequence,
    #[error("step {step}: {message}")]
    BadDistribution { step: usize, message: String },
    #[error("length mismatch: {probs} probabilities, {labels} labels")]
    LengthMismatch { probs: usize, labels: usize },
    #[error("label at {0} is not 0 or 1")]
    BadLabel(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pooling {
    /// Best-matching query (default).
    #[default]
    Max,
    Mean,
}

impl std::str::FromStr for Pooling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max" => Ok(Self::Max),
            "mean" => Ok(Self::Mean),
            other => Err(format!("unknown pooling '{other}'")),
        }
    }
}

/// Query embeddings `[B, Nq, D]` and text embeddings `[B, D]`, unit rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub query_embeddings: Array3<f64>,
    pub text_embeddings: Array2<f64>,
}

impl EmbeddingBatch {
    pub fn new(query: Array3<f64>, text: Array2<f64>) -> Result<Self, KernelError> {
        let (b, _, d) = query.dim();
        if text.dim() != (b, d) {
            return Err(KernelError::Shape(format!(
                "queries are {:?} but texts are {:?}",
                query.dim(),
                text.dim()
            )));
        }
        for (i, queries) in query.outer_iter().enumerate() {
            for (q, row) in queries.outer_iter().enumerate() {
                let norm = row.dot(&row).sqrt();
                if (norm - 1.0).abs() > NORM_TOL {
                    return Err(KernelError::NotNormalized {
                        what: "query",
                        row: format!("[{i},{q}]"),
                        norm,
                    });
                }
            }
        }
        for (i, row) in text.outer_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > NORM_TOL {
                return Err(KernelError::NotNormalized {
                    what: "text",
                    row: i.to_string(),
                    norm,
                });
            }
        }
        Ok(Self {
            query_embeddings: query,
            text_embeddings: text,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.text_embeddings.nrows()
    }

    /// `s[i, j]` = pooled over queries of `dot(query[i, q], text[j])`.
    pub fn similarities(&self, pooling: Pooling) -> Array2<f64> {
        let b = self.batch_size();
        let mut sim = Array2::zeros((b, b));
        for (i, queries) in self.query_embeddings.outer_iter().enumerate() {
            // [Nq, B]
            let scores = queries.dot(&self.text_embeddings.t());
            for j in 0..b {
                let col = scores.column(j);
                sim[[i, j]] = match pooling {
                    Pooling::Max => col.fold(f64::NEG_INFINITY, |m, &v| m.max(v)),
                    Pooling::Mean => col.mean().unwrap_or(0.0),
                };
            }
        }
        sim
    }
}

fn log_softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Symmetric InfoNCE over a `[B, B]` similarity matrix whose diagonal holds
/// the matching pairs: half the mean row-wise cross-entropy plus half the
/// mean column-wise cross-entropy of `softmax(s / temperature)`.
pub fn itc_loss_from_similarities(sim: ArrayView2<f64>, temperature: f64) -> Result<f64, KernelError> {
    let (b, b2) = sim.dim();
    if b != b2 {
        return Err(KernelError::Shape(format!("similarity matrix is {b}x{b2}")));
    }
    if b < 2 {
        return Err(KernelError::BatchTooSmall(b));
    }
    if !(temperature > 0.0) {
        return Err(KernelError::Temperature(temperature));
    }
    let logits = sim.mapv(|s| s / temperature);
    let rows = log_softmax_rows(logits.view());
    let cols = log_softmax_rows(logits.t());
    let n = b as f64;
    let row_ce = -rows.diag().sum() / n;
    let col_ce = -cols.diag().sum() / n;
    Ok(0.5 * (row_ce + col_ce))
}

/// Gradient of [`itc_loss_from_similarities`] with respect to `sim`.
pub fn itc_grad_similarities(sim: ArrayView2<f64>, temperature: f64) -> Result<Array2<f64>, KernelError> {
    itc_loss_from_similarities(sim, temperature)?;
    let b = sim.nrows();
    let logits = sim.mapv(|s| s / temperature);
    let row_p = log_softmax_rows(logits.view()).mapv(f64::exp);
    let col_p = log_softmax_rows(logits.t()).mapv(f64::exp);
    let scale = 0.5 / (b as f64 * temperature);
    let mut grad = Array2::zeros((b, b));
    for i in 0..b {
        for j in 0..b {
            let delta = if i == j { 1.0 } else { 0.0 };
            grad[[i, j]] = scale * ((row_p[[i, j]] - delta) + (col_p[[j, i]] - delta));
        }
    }
    Ok(grad)
}

pub fn itc_loss(batch: &EmbeddingBatch, temperature: f64, pooling: Pooling) -> Result<f64, KernelError> {
    if batch.batch_size() < 2 {
        return Err(KernelError::BatchTooSmall(batch.batch_size()));
    }
    itc_loss_from_similarities(batch.similarities(pooling).view(), temperature)
}

/// Per-step probability vectors and the realised token at each step.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLogits {
    pub stepwise_probs: Vec<Vec<f64>>,
    pub answer_ids: Vec<usize>,
}

impl TokenLogits {
    pub fn new(stepwise_probs: Vec<Vec<f64>>, answer_ids: Vec<usize>) -> Result<Self, KernelError> {
        if stepwise_probs.is_empty() {
            return Err(KernelError::EmptySequence);
        }
        if stepwise_probs.len() != answer_ids.len() {
            return Err(KernelError::Shape(format!(
                "{} probability vectors for {} answer tokens",
                stepwise_probs.len(),
                answer_ids.len()
            )));
        }
        for (step, (probs, &id)) in stepwise_probs.iter().zip(&answer_ids).enumerate() {
            if probs.iter().any(|&p| !(p >= 0.0)) {
                return Err(KernelError::BadDistribution {
                    step,
                    message: "negative or NaN probability".into(),
                });
            }
            let sum: f64 = probs.iter().sum();
            if (sum - 1.0).abs() > SUM_TOL {
                return Err(KernelError::BadDistribution {
                    step,
                    message: format!("probabilities sum to {sum}"),
                });
            }
            if id >= probs.len() {
                return Err(KernelError::BadDistribution {
                    step,
                    message: format!("token {id} outside vocabulary of {}", probs.len()),
                });
            }
        }
        Ok(Self {
            stepwise_probs,
            answer_ids,
        })
    }

    /// Probability assigned to the realised token at each step.
    pub fn realized(&self) -> Vec<f64> {
        self.stepwise_probs
            .iter()
            .zip(&self.answer_ids)
            .map(|(p, &id)| p[id])
            .collect()
    }
}

/// `-sum ln p_i` over realised-token probabilities, clamped at [`PROB_FLOOR`].
pub fn nll_from_realized(realized: &[f64]) -> f64 {
    -realized.iter().map(|&p| p.max(PROB_FLOOR).ln()).sum::<f64>()
}

/// d/dp_i of [`nll_from_realized`]: `-1 / p_i`.
pub fn nll_grad_realized(realized: &[f64]) -> Vec<f64> {
    realized.iter().map(|&p| -1.0 / p.max(PROB_FLOOR)).collect()
}

/// Image-grounded text generation loss: negative log-likelihood of the
/// answer tokens.
pub fn itg_nll(logits: &TokenLogits) -> f64 {
    nll_from_realized(&logits.realized())
}

/// Likelihood of the answer as the product of per-step conditional
/// probabilities.
pub fn answer_likelihood(logits: &TokenLogits) -> f64 {
    logits.realized().iter().map(|&p| p.max(PROB_FLOOR)).product()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchBatch {
    pub match_probs: Vec<f64>,
    pub labels: Vec<u8>,
}

impl MatchBatch {
    pub fn new(match_probs: Vec<f64>, labels: Vec<u8>) -> Result<Self, KernelError> {
        if match_probs.len() != labels.len() {
            return Err(KernelError::LengthMismatch {
                probs: match_probs.len(),
                labels: labels.len(),
            });
        }
        if match_probs.is_empty() {
            return Err(KernelError::EmptySequence);
        }
        if let Some(i) = labels.iter().position(|&y| y > 1) {
            return Err(KernelError::BadLabel(i));
        }
        Ok(Self {
            match_probs,
            labels,
        })
    }
}

fn clamp_open(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Mean binary cross-entropy of the match probabilities.
pub fn itm_loss(batch: &MatchBatch) -> f64 {
    let n = batch.match_probs.len() as f64;
    -batch
        .match_probs
        .iter()
        .zip(&batch.labels)
        .map(|(&p, &y)| {
            let p = clamp_open(p);
            let y = y as f64;
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum::<f64>()
        / n
}

/// `(p - y) / (p (1 - p)) / n` per element.
pub fn itm_grad(batch: &MatchBatch) -> Vec<f64> {
    let n = batch.match_probs.len() as f64;
    batch
        .match_probs
        .iter()
        .zip(&batch.labels)
        .map(|(&p, &y)| {
            let p = clamp_open(p);
            (p - y as f64) / (p * (1.0 - p)) / n
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst_index: Option<usize>,
    pub passed: bool,
    /// Set when the loss was non-finite at a perturbed point.
    pub failure: Option<String>,
}

/// Gradients smaller than this in magnitude on both sides count as equal.
const GRAD_ZERO: f64 = 1e-10;

/// Compares `analytic` against central differences
/// `(f(x + h e_i) - f(x - h e_i)) / 2h`. Relative error per coordinate is
/// `|a - n| / max(|a|, |n|)`, and 0 when both are below 1e-10.
pub fn grad_check<F>(loss: F, analytic: &[f64], input: &[f64], h: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(analytic.len(), input.len(), "gradient and input lengths differ");
    let mut x = input.to_vec();
    let mut numeric = Vec::with_capacity(input.len());
    let mut failure = None;
    for i in 0..input.len() {
        x[i] = input[i] + h;
        let up = loss(&x);
        x[i] = input[i] - h;
        let down = loss(&x);
        x[i] = input[i];
        if !up.is_finite() || !down.is_finite() {
            failure = Some(format!("non-finite loss when perturbing coordinate {i}"));
            numeric.push(f64::NAN);
            continue;
        }
        numeric.push((up - down) / (2.0 * h));
    }
    let mut max_rel_error = 0.0f64;
    let mut worst_index = None;
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = if n.is_nan() {
            f64::INFINITY
        } else {
            let scale = a.abs().max(n.abs());
            if scale < GRAD_ZERO {
                0.0
            } else {
                (a - n).abs() / scale
            }
        };
        if worst_index.is_none() || err > max_rel_error {
            max_rel_error = err;
            worst_index = Some(i);
        }
    }
    GradCheckReport {
        analytic: analytic.to_vec(),
        numeric,
        max_rel_error,
        worst_index,
        passed: failure.is_none() && max_rel_error < tol,
        failure,
    }
}

/// Row-normalizes along the last axis.
pub fn normalize_rows2(mut m: Array2<f64>) -> Array2<f64> {
    for mut row in m.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row.mapv_inplace(|v| v / norm);
    }
    m
}

pub fn normalize_rows3(mut m: Array3<f64>) -> Array3<f64> {
    for mut item in m.outer_iter_mut() {
        for mut row in item.rows_mut() {
            let norm = row.dot(&row).sqrt();
            row.mapv_inplace(|v| v / norm);
        }
    }
    m
}

/// One row of the [`kernel_check`] report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelCheckReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

pub const CHECK_H: f64 = 1e-4;
pub const CHECK_GRAD_TOL: f64 = 1e-5;
pub const CHECK_IDENTITY_TOL: f64 = 1e-9;
pub const CHECK_CASES: usize = 1000;

struct Tally {
    result: CheckResult,
}

impl Tally {
    fn new(name: &str, tolerance: f64) -> Self {
        Self {
            result: CheckResult {
                name: name.to_string(),
                cases: 0,
                max_error: 0.0,
                tolerance,
                passed: true,
                detail: None,
            },
        }
    }

    fn record(&mut self, error: f64, failure: Option<String>) {
        let r = &mut self.result;
        r.cases += 1;
        if error > r.max_error || error.is_nan() {
            r.max_error = error;
        }
        let ok = failure.is_none() && error <= r.tolerance;
        if !ok && r.passed {
            r.passed = false;
            r.detail = Some(failure.unwrap_or_else(|| format!("case {} error {error:e}", r.cases)));
        }
    }
}

fn random_distribution(rng: &mut impl rand::Rng, vocab: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..vocab).map(|_| rng.random_range(0.01..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Randomised property and gradient suite over all four objectives.
pub fn kernel_check(seed: u64) -> KernelCheckReport {
    use rand::Rng;
    let mut rng = crate::rng::seeded(seed);

    let mut likelihood = Tally::new("likelihood = exp(-itg_nll)", CHECK_IDENTITY_TOL);
    for _ in 0..CHECK_CASES {
        let steps = rng.random_range(1..=20);
        let vocab = rng.random_range(2..=50);
        let probs: Vec<Vec<f64>> = (0..steps).map(|_| random_distribution(&mut rng, vocab)).collect();
        let ids = (0..steps).map(|_| rng.random_range(0..vocab)).collect();
        let logits = TokenLogits::new(probs, ids).expect("generated distributions are valid");
        let l = answer_likelihood(&logits);
        let via_nll = (-itg_nll(&logits)).exp();
        likelihood.record((via_nll - l).abs() / l, None);
    }

    let mut uniform = Tally::new("itc = ln B on equal similarities", CHECK_IDENTITY_TOL);
    for b in [2usize, 3, 8] {
        for _ in 0..10 {
            let value = rng.random_range(-1.0..1.0);
            let tau = rng.random_range(0.01..1.0);
            let sim = Array2::from_elem((b, b), value);
            match itc_loss_from_similarities(sim.view(), tau) {
                Ok(loss) => uniform.record((loss - (b as f64).ln()).abs(), None),
                Err(e) => uniform.record(f64::INFINITY, Some(e.to_string())),
            }
        }
    }

    let mut itc = Tally::new("itc gradient wrt similarities", CHECK_GRAD_TOL);
    for _ in 0..50 {
        let b = rng.random_range(2..=8);
        let tau = rng.random_range(0.3..1.0);
        let sim: Vec<f64> = (0..b * b).map(|_| rng.random_range(-1.0..1.0)).collect();
        let view = |x: &[f64]| Array2::from_shape_vec((b, b), x.to_vec()).expect("square");
        let analytic = itc_grad_similarities(view(&sim).view(), tau).expect("valid batch");
        let report = grad_check(
            |x| itc_loss_from_similarities(view(x).view(), tau).unwrap_or(f64::NAN),
            analytic.as_slice().expect("contiguous"),
            &sim,
            CHECK_H,
            CHECK_GRAD_TOL,
        );
        itc.record(report.max_rel_error, report.failure);
    }

    let mut itm = Tally::new("itm gradient wrt probabilities", CHECK_GRAD_TOL);
    for _ in 0..50 {
        let n = rng.random_range(1..=16);
        let probs: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1)).collect();
        let batch = MatchBatch::new(probs.clone(), labels.clone()).expect("valid batch");
        let report = grad_check(
            |x| {
                MatchBatch::new(x.to_vec(), labels.clone())
                    .map(|b| itm_loss(&b))
                    .unwrap_or(f64::NAN)
            },
            &itm_grad(&batch),
            &probs,
            CHECK_H,
            CHECK_GRAD_TOL,
        );
        itm.record(report.max_rel_error, report.failure);
    }

    let mut itg = Tally::new("itg gradient wrt realised probabilities", CHECK_GRAD_TOL);
    for _ in 0..50 {
        let n = rng.random_range(1..=20);
        let realized: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let report = grad_check(
            nll_from_realized,
            &nll_grad_realized(&realized),
            &realized,
            CHECK_H,
            CHECK_GRAD_TOL,
        );
        itg.record(report.max_rel_error, report.failure);
    }

    let checks: Vec<CheckResult> = [likelihood, uniform, itc, itm, itg]
        .into_iter()
        .map(|t| t.result)
        .collect();
    let passed = checks.iter().all(|c| c.passed);
    KernelCheckReport {
        seed,
        checks,
        passed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn equal_similarities_give_ln_b() {
        for b in [2usize, 3, 8] {
            let sim = Array2::from_elem((b, b), 0.3);
            let loss = itc_loss_from_similarities(sim.view(), 0.07).unwrap();
            assert!((loss - (b as f64).ln()).abs() < 1e-12, "b={b}: {loss}");
        }
    }

    #[test]
    fn strongly_diagonal_similarities_give_near_zero_loss() {
        let sim = array![[10.0, -10.0], [-10.0, 10.0]];
        let loss = itc_loss_from_similarities(sim.view(), 0.05).unwrap();
        // independent scalar evaluation: each CE = ln(1 + exp(-20 / 0.05))
        let scalar = (1.0f64 + (-400.0f64).exp()).ln();
        assert!((loss - scalar).abs() < 1e-15);
        assert!(loss < 1e-6);
    }

    #[test]
    fn itc_errors() {
        let one = Array2::from_elem((1, 1), 0.0);
        assert_eq!(
            itc_loss_from_similarities(one.view(), 0.1),
            Err(KernelError::BatchTooSmall(1))
        );
        let two = Array2::from_elem((2, 2), 0.0);
        assert!(matches!(
            itc_loss_from_similarities(two.view(), 0.0),
            Err(KernelError::Temperature(_))
        ));
        let q = Array3::from_elem((2, 1, 2), 1.0);
        let t = normalize_rows2(Array2::from_elem((2, 2), 1.0));
        assert!(matches!(
            EmbeddingBatch::new(q, t),
            Err(KernelError::NotNormalized { what: "query", .. })
        ));
    }

    #[test]
    fn pooling_modes_differ_with_heterogeneous_queries() {
        // item 0 has queries e1 and e2, item 1 has e2 twice; texts are e1 and e2
        let q = array![[[1.0, 0.0], [0.0, 1.0]], [[0.0, 1.0], [0.0, 1.0]]];
        let t = array![[1.0, 0.0], [0.0, 1.0]];
        let batch = EmbeddingBatch::new(q, t).unwrap();
        // max: [[1,1],[0,1]]; mean: [[0.5,0.5],[0,1]]
        assert_eq!(batch.similarities(Pooling::Max), array![[1.0, 1.0], [0.0, 1.0]]);
        assert_eq!(batch.similarities(Pooling::Mean), array![[0.5, 0.5], [0.0, 1.0]]);
        let max = itc_loss(&batch, 0.5, Pooling::Max).unwrap();
        let mean = itc_loss(&batch, 0.5, Pooling::Mean).unwrap();
        assert!((max - mean).abs() > 1e-3);
    }

    #[test]
    fn itg_examples() {
        let l = TokenLogits::new(vec![vec![0.5, 0.5], vec![0.25, 0.75]], vec![0, 0]).unwrap();
        assert!((itg_nll(&l) - 2.0794415416798357).abs() < 1e-12);
        let certain = TokenLogits::new(vec![vec![0.0, 1.0]; 3], vec![1; 3]).unwrap();
        assert_eq!(itg_nll(&certain), 0.0);
        let uniform = TokenLogits::new(vec![vec![0.1; 10]; 3], vec![4, 0, 9]).unwrap();
        assert!((itg_nll(&uniform) - 3.0 * 10f64.ln()).abs() < 1e-12);
        assert!((answer_likelihood(&uniform) - 1e-3).abs() < 1e-15);
        let single = TokenLogits::new(vec![vec![0.7, 0.3]], vec![0]).unwrap();
        assert_eq!(answer_likelihood(&single), 0.7);
    }

    #[test]
    fn token_logits_validation() {
        assert_eq!(TokenLogits::new(vec![], vec![]), Err(KernelError::EmptySequence));
        assert!(TokenLogits::new(vec![vec![0.5, 0.6]], vec![0]).is_err());
        assert!(TokenLogits::new(vec![vec![0.5, 0.5]], vec![2]).is_err());
        assert!(TokenLogits::new(vec![vec![1.5, -0.5]], vec![0]).is_err());
    }

    #[test]
    fn itm_examples() {
        let b = MatchBatch::new(vec![1.0 - 1e-12], vec![1]).unwrap();
        assert!(itm_loss(&b) < 1e-11);
        let half = MatchBatch::new(vec![0.5, 0.5, 0.5], vec![1, 0, 1]).unwrap();
        assert!((itm_loss(&half) - 2f64.ln()).abs() < 1e-15);
        let mixed = MatchBatch::new(vec![0.9, 0.2], vec![1, 0]).unwrap();
        let hand = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((itm_loss(&mixed) - hand).abs() < 1e-15);
        assert!((hand - 0.16425).abs() < 1e-5);
        assert_eq!(
            MatchBatch::new(vec![0.5], vec![1, 0]),
            Err(KernelError::LengthMismatch {
                probs: 1,
                labels: 2
            })
        );
        assert_eq!(MatchBatch::new(vec![0.5], vec![2]), Err(KernelError::BadLabel(0)));
    }

    #[test]
    fn grad_check_constant_and_nonfinite() {
        let r = grad_check(|_| 3.0, &[0.0, 0.0], &[1.0, 2.0], 1e-4, 1e-5);
        assert!(r.passed);
        assert_eq!(r.numeric, vec![0.0, 0.0]);

        let r = grad_check(|x| (x[0]).ln(), &[1.0], &[0.0], 1e-4, 1e-5);
        assert!(!r.passed);
        assert!(r.failure.unwrap().contains("coordinate 0"));
    }

    #[test]
    fn grad_check_detects_wrong_gradient() {
        let r = grad_check(|x| x[0] * x[0], &[3.0], &[1.0], 1e-4, 1e-5);
        assert!(!r.passed);
        assert!((r.max_rel_error - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn kernel_suite_passes() {
        let report = kernel_check(7);
        for c in &report.checks {
            assert!(c.passed, "{c:?}");
            assert!(c.cases > 0);
        }
        assert!(report.passed);
    }

    #[test]
    fn itm_gradient_matches_finite_difference() {
        let labels = vec![1, 0, 1, 0];
        let p = vec![0.9, 0.2, 0.35, 0.6];
        let b = MatchBatch::new(p.clone(), labels.clone()).unwrap();
        let report = grad_check(
            |x| itm_loss(&MatchBatch::new(x.to_vec(), labels.clone()).unwrap()),
            &itm_grad(&b),
            &p,
            1e-4,
            1e-5,
        );
        assert!(report.passed, "{report:?}");
    }
}
