//! Performance bookkeeping and transfer metrics.
//!
//! The performance matrix `R` holds one row per completed training
//! stage: `R[i][j]` is the AUC on task `j`'s evaluation split after
//! training through task `i`. The backward-transfer family reads the
//! lower triangle of `R`; entries above the diagonal may be recorded for
//! learning curves but never enter these formulas.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::nn::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("degenerate batch: no class has both positive and negative examples")]
    DegenerateBatch,
    #[error("label {label} out of range for {classes} score columns")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("entry R[{i}][{j}] is not populated")]
    Unpopulated { i: usize, j: usize },
    #[error("metric needs at least 2 tasks, got {0}")]
    TooFewTasks(usize),
    #[error("step {t} out of range 1..={max}")]
    StepOutOfRange { t: usize, max: usize },
    #[error("value {0} outside [0, 1]")]
    OutOfBounds(f64),
    #[error("scores and labels disagree: {0} rows vs {1} labels")]
    LengthMismatch(usize, usize),
}

/// One-vs-rest rank-based AUC with midrank tie handling, macro-averaged
/// over the classes that have both positives and negatives.
pub fn macro_auc(scores: &Tensor, labels: &[usize]) -> Result<f64, MetricsError> {
    if scores.shape().len() != 2 || scores.rows() != labels.len() {
        return Err(MetricsError::LengthMismatch(scores.rows(), labels.len()));
    }
    let classes = scores.cols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(MetricsError::LabelOutOfRange { label: bad, classes });
    }
    let mut per_class = Vec::new();
    for c in 0..classes {
        let positives = labels.iter().filter(|&&l| l == c).count();
        let negatives = labels.len() - positives;
        if positives == 0 || negatives == 0 {
            continue;
        }
        let column: Vec<f64> = (0..labels.len()).map(|i| scores.at(i, c)).collect();
        per_class.push(rank_auc(&column, labels, c, positives, negatives));
    }
    if per_class.is_empty() {
        return Err(MetricsError::DegenerateBatch);
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// Mann-Whitney AUC via midranks: sum of positive ranks, normalized by
/// `positives * negatives`.
fn rank_auc(
    scores: &[f64],
    labels: &[usize],
    class: usize,
    positives: usize,
    negatives: usize,
) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Midrank over the tie run [i, j]; 1-based ranks.
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = midrank;
        }
        i = j + 1;
    }

    let rank_sum: f64 = (0..scores.len())
        .filter(|&i| labels[i] == class)
        .map(|i| ranks[i])
        .sum();
    let p = positives as f64;
    (rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64)
}

/// N x N matrix of AUC values; rows index the training stage, columns
/// the evaluated task. Entries are populated as training progresses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceMatrix {
    n: usize,
    entries: Vec<Option<f64>>,
}

impl PerformanceMatrix {
    pub fn new(n: usize) -> Self {
        PerformanceMatrix { n, entries: vec![None; n * n] }
    }

    pub fn task_count(&self) -> usize {
        self.n
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) -> Result<(), MetricsError> {
        if !(0.0..=1.0).contains(&value) {
            return Err(MetricsError::OutOfBounds(value));
        }
        self.entries[i * self.n + j] = Some(value);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.entries[i * self.n + j]
    }

    fn require(&self, i: usize, j: usize) -> Result<f64, MetricsError> {
        self.get(i, j).ok_or(MetricsError::Unpopulated { i, j })
    }
}

/// Mean of the final row: performance over all tasks after the last one.
pub fn average_auc(r: &PerformanceMatrix) -> Result<f64, MetricsError> {
    let n = r.task_count();
    let mut total = 0.0;
    for j in 0..n {
        total += r.require(n - 1, j)?;
    }
    Ok(total / n as f64)
}

/// Mean change on earlier tasks after finishing the last one:
/// `(1/(N-1)) * sum_j (R[N][j] - R[j][j])` over `j = 1..N-1` (1-based).
pub fn bwt(r: &PerformanceMatrix) -> Result<f64, MetricsError> {
    let n = r.task_count();
    if n < 2 {
        return Err(MetricsError::TooFewTasks(n));
    }
    let mut total = 0.0;
    for j in 0..n - 1 {
        total += r.require(n - 1, j)? - r.require(j, j)?;
    }
    Ok(total / (n - 1) as f64)
}

/// Change on earlier tasks exactly `t` stages later:
/// `(1/(N-t)) * sum_j (R[j+t][j] - R[j][j])`.
pub fn bwt_t(r: &PerformanceMatrix, t: usize) -> Result<f64, MetricsError> {
    let n = r.task_count();
    if n < 2 {
        return Err(MetricsError::TooFewTasks(n));
    }
    if t < 1 || t > n - 1 {
        return Err(MetricsError::StepOutOfRange { t, max: n - 1 });
    }
    let mut total = 0.0;
    for j in 0..n - t {
        total += r.require(j + t, j)? - r.require(j, j)?;
    }
    Ok(total / (n - t) as f64)
}

/// Per-task average over every available horizon, then averaged over
/// tasks: `(1/(N-1)) * sum_j [(1/(N-j)) * sum_t (R[j+t][j] - R[j][j])]`.
pub fn bwt_lambda(r: &PerformanceMatrix) -> Result<f64, MetricsError> {
    let n = r.task_count();
    if n < 2 {
        return Err(MetricsError::TooFewTasks(n));
    }
    let mut outer = 0.0;
    for j in 0..n - 1 {
        let horizons = n - 1 - j;
        let mut inner = 0.0;
        for t in 1..=horizons {
            inner += r.require(j + t, j)? - r.require(j, j)?;
        }
        outer += inner / horizons as f64;
    }
    Ok(outer / (n - 1) as f64)
}

/// Evaluation summary for one (strategy, seed) run. The transfer family
/// is absent (never zero) when the run has no task sequence to measure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub strategy: String,
    pub seed: u64,
    pub average_auc: f64,
    pub bwt: Option<f64>,
    /// `bwt_t` keyed by horizon `t` (1-based).
    pub bwt_t: BTreeMap<usize, f64>,
    pub bwt_lambda: Option<f64>,
}

impl MetricReport {
    /// Build the full report from a populated matrix.
    pub fn from_matrix(
        strategy: &str,
        seed: u64,
        r: &PerformanceMatrix,
        sequential: bool,
    ) -> Result<Self, MetricsError> {
        let n = r.task_count();
        let average_auc = average_auc(r)?;
        if !sequential || n < 2 {
            return Ok(MetricReport {
                strategy: strategy.to_string(),
                seed,
                average_auc,
                bwt: None,
                bwt_t: BTreeMap::new(),
                bwt_lambda: None,
            });
        }
        let mut per_t = BTreeMap::new();
        for t in 1..n {
            per_t.insert(t, bwt_t(r, t)?);
        }
        Ok(MetricReport {
            strategy: strategy.to_string(),
            seed,
            average_auc,
            bwt: Some(bwt(r)?),
            bwt_t: per_t,
            bwt_lambda: Some(bwt_lambda(r)?),
        })
    }
}
