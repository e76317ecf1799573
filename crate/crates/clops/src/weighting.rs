//! Task-instance loss coefficients.
//!
//! Every training instance of the current task carries a learnable
//! scalar coefficient beta, initialized to exactly 1 so the weighted
//! objective starts out as a standard mean loss. Instances that stay
//! hard to classify pull their beta down; a quadratic regularizer pulls
//! it back toward 1 so the network never stops learning from the data.
//! The area under each beta trajectory (trapezoidal rule) becomes the
//! instance's storage score, which ranks it for replay-buffer storage.

use std::collections::BTreeMap;

use crate::nn::{Graph, NodeId, ScalarAdam, Tensor};
use crate::types::{InstanceId, TaskId};

#[derive(Debug, thiserror::Error)]
pub enum WeightingError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch size must be positive")]
    ZeroBatchSize,
    #[error("non-finite input")]
    NonFinite,
    #[error("task {0} not registered")]
    UnknownTask(TaskId),
    #[error("instance {1} of task {0} not registered")]
    UnknownInstance(TaskId, InstanceId),
    #[error("task {0} already registered")]
    DuplicateTask(TaskId),
    #[error("epoch {epoch} already recorded for task {task}")]
    DuplicateEpoch { task: TaskId, epoch: u32 },
    #[error("epoch {epoch} is not after the last recorded epoch {last} for task {task}")]
    OutOfOrderEpoch { task: TaskId, epoch: u32, last: u32 },
    #[error("storage score needs at least 2 trajectory points, got {0}")]
    TooFewPoints(usize),
    #[error("trajectory epochs must be consecutive (unit spacing)")]
    NonUniformSpacing,
    #[error("cannot update frozen coefficient for instance {1} of task {0}")]
    FrozenUpdate(TaskId, InstanceId),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
}

/// How beta coefficients are stepped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaOptimizer {
    /// Adam with the same hyperparameters and learning rate as the
    /// network weights; each coefficient keeps its own moments.
    Adam { lr: f64 },
    /// Plain gradient descent at a separate learning rate.
    Sgd { lr: f64 },
}

#[derive(Debug, Clone)]
struct BetaEntry {
    beta: f64,
    /// `(epoch, beta)` pairs; starts at `(0, 1.0)` before any training.
    trajectory: Vec<(u32, f64)>,
    frozen: bool,
    adam: (f64, f64, u64), // (m, v, step) for the per-coefficient Adam path
}

/// Storage score for one instance: area under its beta trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StorageScore {
    pub task_id: TaskId,
    pub instance_id: InstanceId,
    pub s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StorageVariant {
    Identity,
    Squared,
}

/// The per-(task, instance) coefficient table with trajectories.
#[derive(Debug, Clone, Default)]
pub struct BetaTable {
    entries: BTreeMap<(TaskId, InstanceId), BetaEntry>,
    tasks: BTreeMap<TaskId, Vec<InstanceId>>,
}

impl BetaTable {
    pub fn new() -> Self {
        BetaTable::default()
    }

    /// Register every instance of a task with beta = 1.0 and the
    /// pre-training trajectory point at epoch 0.
    pub fn register_task(
        &mut self,
        task: TaskId,
        instances: &[InstanceId],
    ) -> Result<(), WeightingError> {
        if self.tasks.contains_key(&task) {
            return Err(WeightingError::DuplicateTask(task));
        }
        for &inst in instances {
            self.entries.insert(
                (task, inst),
                BetaEntry {
                    beta: 1.0,
                    trajectory: vec![(0, 1.0)],
                    frozen: false,
                    adam: (0.0, 0.0, 0),
                },
            );
        }
        self.tasks.insert(task, instances.to_vec());
        Ok(())
    }

    pub fn contains_task(&self, task: TaskId) -> bool {
        self.tasks.contains_key(&task)
    }

    pub fn task_instances(&self, task: TaskId) -> Result<&[InstanceId], WeightingError> {
        self.tasks
            .get(&task)
            .map(|v| v.as_slice())
            .ok_or(WeightingError::UnknownTask(task))
    }

    pub fn beta(&self, task: TaskId, inst: InstanceId) -> Result<f64, WeightingError> {
        self.entries
            .get(&(task, inst))
            .map(|e| e.beta)
            .ok_or(WeightingError::UnknownInstance(task, inst))
    }

    pub fn betas(&self, task: TaskId, insts: &[InstanceId]) -> Result<Vec<f64>, WeightingError> {
        insts.iter().map(|&i| self.beta(task, i)).collect()
    }

    pub fn trajectory(
        &self,
        task: TaskId,
        inst: InstanceId,
    ) -> Result<&[(u32, f64)], WeightingError> {
        self.entries
            .get(&(task, inst))
            .map(|e| e.trajectory.as_slice())
            .ok_or(WeightingError::UnknownInstance(task, inst))
    }

    /// Apply one optimizer step per `(instance, gradient)` pair.
    pub fn apply_gradients(
        &mut self,
        task: TaskId,
        updates: &[(InstanceId, f64)],
        optimizer: BetaOptimizer,
    ) -> Result<(), WeightingError> {
        for &(inst, grad) in updates {
            if !grad.is_finite() {
                return Err(WeightingError::NonFinite);
            }
            let entry = self
                .entries
                .get_mut(&(task, inst))
                .ok_or(WeightingError::UnknownInstance(task, inst))?;
            if entry.frozen {
                return Err(WeightingError::FrozenUpdate(task, inst));
            }
            match optimizer {
                BetaOptimizer::Sgd { lr } => entry.beta -= lr * grad,
                BetaOptimizer::Adam { lr } => {
                    let (m, v, step) = entry.adam;
                    let mut adam = ScalarAdam { m, v, step };
                    adam.update(&mut entry.beta, grad, lr);
                    entry.adam = (adam.m, adam.v, adam.step);
                }
            }
        }
        Ok(())
    }

    /// Append one trajectory point (the current beta) for every instance
    /// of the task. `epoch` must be strictly after the last recorded one.
    pub fn record_epoch(&mut self, task: TaskId, epoch: u32) -> Result<(), WeightingError> {
        let instances = self
            .tasks
            .get(&task)
            .cloned()
            .ok_or(WeightingError::UnknownTask(task))?;
        // Validate against the first instance; all trajectories of one
        // task advance in lockstep.
        if let Some(&first) = instances.first() {
            let last = self.entries[&(task, first)]
                .trajectory
                .last()
                .map(|&(e, _)| e)
                .unwrap_or(0);
            if epoch == last {
                return Err(WeightingError::DuplicateEpoch { task, epoch });
            }
            if epoch < last {
                return Err(WeightingError::OutOfOrderEpoch { task, epoch, last });
            }
        }
        for inst in instances {
            let entry = self.entries.get_mut(&(task, inst)).unwrap();
            entry.trajectory.push((epoch, entry.beta));
        }
        Ok(())
    }

    /// Freeze every coefficient of a completed task.
    pub fn freeze_task(&mut self, task: TaskId) -> Result<(), WeightingError> {
        let instances = self
            .tasks
            .get(&task)
            .cloned()
            .ok_or(WeightingError::UnknownTask(task))?;
        for inst in instances {
            self.entries.get_mut(&(task, inst)).unwrap().frozen = true;
        }
        Ok(())
    }

    /// Storage scores for every instance of a task.
    pub fn storage_scores(
        &self,
        task: TaskId,
        variant: StorageVariant,
    ) -> Result<Vec<StorageScore>, WeightingError> {
        let instances = self.tasks.get(&task).ok_or(WeightingError::UnknownTask(task))?;
        instances
            .iter()
            .map(|&inst| {
                let traj = &self.entries[&(task, inst)].trajectory;
                Ok(StorageScore {
                    task_id: task,
                    instance_id: inst,
                    s: storage_score(traj, variant)?,
                })
            })
            .collect()
    }

    /// All `(task, instance, epoch, beta)` rows in deterministic order.
    pub fn trajectory_rows(&self) -> Vec<(TaskId, InstanceId, u32, f64)> {
        let mut rows = Vec::new();
        for ((task, inst), entry) in &self.entries {
            for &(epoch, beta) in &entry.trajectory {
                rows.push((*task, *inst, epoch, beta));
            }
        }
        rows
    }

    pub fn tasks(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.tasks.keys().copied()
    }
}

/// Weighted current-task loss on the tape:
/// `(1/B_k) * sum_i [beta_i * L_i + lambda * (beta_i - 1)^2]`.
///
/// `betas` must be a live leaf so its gradient can be read back.
pub fn current_loss(
    g: &mut Graph,
    losses: NodeId,
    betas: NodeId,
    lambda: f64,
) -> Result<NodeId, WeightingError> {
    let batch = g.value(losses).len();
    if batch == 0 {
        return Err(WeightingError::EmptyBatch);
    }
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(WeightingError::NonFinite);
    }
    let weighted = g.mul_elem(betas, losses)?;
    let sum_weighted = g.sum(weighted)?;
    let centered = g.add_scalar(betas, -1.0)?;
    let sq = g.square(centered)?;
    let reg = g.sum(sq)?;
    let reg = g.scale(reg, lambda)?;
    let total = g.add(sum_weighted, reg)?;
    Ok(g.scale(total, 1.0 / batch as f64)?)
}

/// Value-level twin of [`current_loss`].
pub fn current_loss_value(
    losses: &[f64],
    betas: &[f64],
    lambda: f64,
) -> Result<f64, WeightingError> {
    if losses.is_empty() {
        return Err(WeightingError::EmptyBatch);
    }
    if losses.len() != betas.len() {
        return Err(WeightingError::NonFinite);
    }
    let total: f64 = losses
        .iter()
        .zip(betas)
        .map(|(&l, &b)| b * l + lambda * (b - 1.0) * (b - 1.0))
        .sum();
    Ok(total / losses.len() as f64)
}

/// Exact partial derivative of [`current_loss`] with respect to one
/// coefficient: `(L_i + 2*lambda*(beta_i - 1)) / B_k`.
pub fn beta_gradient(
    loss_i: f64,
    beta_i: f64,
    lambda: f64,
    batch_size: usize,
) -> Result<f64, WeightingError> {
    if batch_size == 0 {
        return Err(WeightingError::ZeroBatchSize);
    }
    if !loss_i.is_finite() || !beta_i.is_finite() || !lambda.is_finite() {
        return Err(WeightingError::NonFinite);
    }
    Ok((loss_i + 2.0 * lambda * (beta_i - 1.0)) / batch_size as f64)
}

/// Replay loss over instances from earlier tasks: the plain mean of
/// their losses, or, in the weighted variant, the mean of losses scaled
/// by their frozen coefficients (which receive no gradient).
///
/// An empty replay set contributes 0.
pub fn replay_loss_value(
    per_task_losses: &BTreeMap<TaskId, Vec<(InstanceId, f64)>>,
    table: &BetaTable,
    weighted: bool,
) -> Result<f64, WeightingError> {
    let total_count: usize = per_task_losses.values().map(|v| v.len()).sum();
    if total_count == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (&task, losses) in per_task_losses {
        if !table.contains_task(task) {
            return Err(WeightingError::UnknownTask(task));
        }
        for &(inst, loss) in losses {
            if weighted {
                total += table.beta(task, inst)? * loss;
            } else {
                total += loss;
            }
        }
    }
    Ok(total / total_count as f64)
}

/// Tape version used by the training loop. `frozen_betas`, when present,
/// enters the graph as a constant leaf: the coefficients scale the loss
/// but receive no update.
pub fn replay_loss(
    g: &mut Graph,
    losses: NodeId,
    frozen_betas: Option<&[f64]>,
) -> Result<NodeId, WeightingError> {
    let count = g.value(losses).len();
    if count == 0 {
        return Err(WeightingError::EmptyBatch);
    }
    let summed = match frozen_betas {
        Some(betas) => {
            let leaf = g.leaf(Tensor::new(vec![count], betas.to_vec())?)?;
            let weighted = g.mul_elem(leaf, losses)?;
            g.sum(weighted)?
        }
        None => g.sum(losses)?,
    };
    Ok(g.scale(summed, 1.0 / count as f64)?)
}

/// Total objective: current-task loss plus replay loss.
pub fn total_loss(current: f64, replay: f64) -> Result<f64, WeightingError> {
    if !current.is_finite() || !replay.is_finite() {
        return Err(WeightingError::NonFinite);
    }
    Ok(current + replay)
}

/// Area under a beta trajectory by the trapezoidal rule with unit epoch
/// spacing. The squared variant squares each beta before integrating.
pub fn storage_score(
    trajectory: &[(u32, f64)],
    variant: StorageVariant,
) -> Result<f64, WeightingError> {
    if trajectory.len() < 2 {
        return Err(WeightingError::TooFewPoints(trajectory.len()));
    }
    for pair in trajectory.windows(2) {
        if pair[1].0 != pair[0].0 + 1 {
            return Err(WeightingError::NonUniformSpacing);
        }
    }
    let f = |b: f64| match variant {
        StorageVariant::Identity => b,
        StorageVariant::Squared => b * b,
    };
    Ok(trajectory
        .windows(2)
        .map(|pair| (f(pair[1].1) + f(pair[0].1)) / 2.0)
        .sum())
}
