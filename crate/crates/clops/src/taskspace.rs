//! Task difficulty, similarity, and curriculum construction.
//!
//! Each task's storage scores are summarized by a fitted Gaussian. The
//! reciprocal of its mean is the task's difficulty (lower scores mean
//! harder instances), and one minus the Hellinger distance between two
//! fitted Gaussians is the pairwise task similarity. A curriculum
//! starts at the easiest task and chains to whichever unvisited task is
//! most similar to the last one appended; the anti-curriculum starts at
//! the hardest.

use serde::{Deserialize, Serialize};

use crate::types::TaskId;

#[derive(Debug, thiserror::Error)]
pub enum TaskspaceError {
    #[error("need at least 2 samples to fit, got {0}")]
    TooFewSamples(usize),
    #[error("samples are constant; variance is zero")]
    ZeroVariance,
    #[error("difficulty needs a positive mean score, got {0}")]
    NonPositiveMean(f64),
    #[error("similarity matrix is {got} x {got}, expected {expected} x {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no tasks to order")]
    Empty,
}

/// Gaussian summary of one task's storage-score distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDistribution {
    pub task_id: TaskId,
    pub mu: f64,
    /// Sample standard deviation (n-1 denominator); always positive.
    pub sigma: f64,
    pub n: usize,
}

/// Fit mean and sample standard deviation; constant input is rejected.
pub fn fit_gaussian(task_id: TaskId, values: &[f64]) -> Result<TaskDistribution, TaskspaceError> {
    if values.len() < 2 {
        return Err(TaskspaceError::TooFewSamples(values.len()));
    }
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mu) * (v - mu)).sum();
    let sigma = (ss / (n - 1.0)).sqrt();
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(TaskspaceError::ZeroVariance);
    }
    Ok(TaskDistribution { task_id, mu, sigma, n: values.len() })
}

/// Task difficulty: the reciprocal of the mean storage score.
pub fn difficulty(dist: &TaskDistribution) -> Result<f64, TaskspaceError> {
    if dist.mu <= 0.0 {
        return Err(TaskspaceError::NonPositiveMean(dist.mu));
    }
    Ok(1.0 / dist.mu)
}

/// Similarity `S = 1 - D_H` between two Gaussian summaries, using the
/// closed-form Hellinger distance
/// `D_H^2 = 1 - sqrt(2*s0*s1 / (s0^2 + s1^2)) * exp(-(m0-m1)^2 / (4*(s0^2 + s1^2)))`.
pub fn hellinger_similarity(
    d0: &TaskDistribution,
    d1: &TaskDistribution,
) -> Result<f64, TaskspaceError> {
    if d0.sigma <= 0.0 || d1.sigma <= 0.0 {
        return Err(TaskspaceError::ZeroVariance);
    }
    let var_sum = d0.sigma * d0.sigma + d1.sigma * d1.sigma;
    let prefactor = (2.0 * d0.sigma * d1.sigma / var_sum).sqrt();
    let gap = d0.mu - d1.mu;
    let bc = prefactor * (-gap * gap / (4.0 * var_sum)).exp();
    let dh = (1.0 - bc).max(0.0).sqrt();
    Ok(1.0 - dh)
}

/// Symmetric N x N similarity matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    /// Pairwise similarities of the given fits, in their order.
    pub fn from_distributions(dists: &[TaskDistribution]) -> Result<Self, TaskspaceError> {
        let n = dists.len();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
            for j in i + 1..n {
                let s = hellinger_similarity(&dists[i], &dists[j])?;
                values[i * n + j] = s;
                values[j * n + i] = s;
            }
        }
        Ok(SimilarityMatrix { n, values })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurriculumMode {
    Curriculum,
    Anti,
    Given,
}

/// An ordering over all tasks, always a permutation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumOrder {
    pub order: Vec<TaskId>,
    pub mode: CurriculumMode,
}

/// Greedy task chain: seed with the easiest (curriculum) or hardest
/// (anti) task, then repeatedly append the unvisited task most similar
/// to the most recently appended one. Ties break on ascending task id.
pub fn build_curriculum(
    dists: &[TaskDistribution],
    similarity: &SimilarityMatrix,
    mode: CurriculumMode,
) -> Result<CurriculumOrder, TaskspaceError> {
    let n = dists.len();
    if n == 0 {
        return Err(TaskspaceError::Empty);
    }
    if similarity.size() != n {
        return Err(TaskspaceError::DimensionMismatch { expected: n, got: similarity.size() });
    }
    if mode == CurriculumMode::Given {
        return Ok(CurriculumOrder { order: dists.iter().map(|d| d.task_id).collect(), mode });
    }

    let difficulties: Vec<f64> = dists
        .iter()
        .map(difficulty)
        .collect::<Result<_, _>>()?;

    let better = |a: (f64, TaskId), b: (f64, TaskId)| -> bool {
        // Strictly better difficulty, or equal with a lower task id.
        match mode {
            CurriculumMode::Curriculum => a.0 < b.0 || (a.0 == b.0 && a.1 < b.1),
            CurriculumMode::Anti => a.0 > b.0 || (a.0 == b.0 && a.1 < b.1),
            CurriculumMode::Given => unreachable!(),
        }
    };
    let mut seed = 0usize;
    for k in 1..n {
        if better(
            (difficulties[k], dists[k].task_id),
            (difficulties[seed], dists[seed].task_id),
        ) {
            seed = k;
        }
    }

    let mut visited = vec![false; n];
    visited[seed] = true;
    let mut chain = vec![seed];
    while chain.len() < n {
        let last = *chain.last().unwrap();
        let mut best: Option<usize> = None;
        for candidate in 0..n {
            if visited[candidate] {
                continue;
            }
            let is_better = match best {
                None => true,
                Some(current) => {
                    let sc = similarity.get(last, candidate);
                    let sb = similarity.get(last, current);
                    sc > sb || (sc == sb && dists[candidate].task_id < dists[current].task_id)
                }
            };
            if is_better {
                best = Some(candidate);
            }
        }
        let next = best.unwrap();
        visited[next] = true;
        chain.push(next);
    }
    Ok(CurriculumOrder { order: chain.into_iter().map(|k| dists[k].task_id).collect(), mode })
}
