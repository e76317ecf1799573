//! Deterministic synthetic scenarios and dataset ingestion.
//!
//! Three generators mirror the structural challenges a sequential
//! learner faces: novel class pairs per task (class-incremental),
//! covariate drift over time (time-incremental), and changing input
//! modality (domain-incremental). Features are isotropic Gaussian
//! clusters, sized so complete experiments run in seconds. Instances
//! carry a group id (a patient analogue); the three splits never share
//! a group.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{derive_indexed, mix, Stream};
use crate::types::{InstanceId, TaskId};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("invalid scenario spec: {0}")]
    InvalidSpec(String),
    #[error("need at least {need} distinct groups, got {got}")]
    TooFewGroups { need: usize, got: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv file has no data rows")]
    NoDataRows,
    #[error("bad csv header: {0}")]
    BadHeader(String),
    #[error("malformed row at line {line}: {message}")]
    MalformedRow { line: u64, message: String },
    #[error("group {group} appears in splits {first} and {second}")]
    GroupSplitViolation {
        group: u64,
        first: &'static str,
        second: &'static str,
    },
    #[error("duplicate instance {instance} in task {task}")]
    DuplicateInstance { task: TaskId, instance: InstanceId },
}

/// One labeled example: the unit of storage, replay, and weighting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub instance_id: InstanceId,
    /// Patient analogue; splits never share a group.
    pub group_id: u64,
    pub task_id: TaskId,
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub task_id: TaskId,
    pub name: String,
    pub train: Vec<Instance>,
    pub validation: Vec<Instance>,
    pub test: Vec<Instance>,
}

impl TaskDataset {
    pub fn split(&self, which: SplitKind) -> &[Instance] {
        match which {
            SplitKind::Train => &self.train,
            SplitKind::Validation => &self.validation,
            SplitKind::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Train,
    Validation,
    Test,
}

impl SplitKind {
    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Validation => "validation",
            SplitKind::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    ClassIl,
    TimeIl,
    DomainIl,
}

/// Full description of a synthetic scenario; generation is a pure
/// function of this value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub n_tasks: usize,
    /// Total class count across the scenario.
    pub classes: usize,
    pub feature_dim: usize,
    /// Instances generated per task, before the 60/20/20 group split.
    pub instances_per_task: usize,
    /// Cluster standard deviation.
    pub noise_scale: f64,
    pub seed: u64,
    /// Per-task multiplier on `noise_scale`; lets task difficulty vary.
    #[serde(default)]
    pub noise_per_task: Option<Vec<f64>>,
    /// Magnitude of the per-task covariate drift (time-incremental only).
    #[serde(default = "default_drift")]
    pub drift_scale: f64,
}

fn default_drift() -> f64 {
    1.0
}

const GROUP_SIZE: usize = 4;
const SPLIT_RATIOS: (f64, f64, f64) = (0.6, 0.2, 0.2);

impl ScenarioSpec {
    pub fn generate(&self) -> Result<Vec<TaskDataset>, ScenarioError> {
        match self.kind {
            ScenarioKind::ClassIl => gen_class_il(self),
            ScenarioKind::TimeIl => gen_time_il(self),
            ScenarioKind::DomainIl => gen_domain_il(self),
        }
    }

    pub fn with_seed(&self, seed: u64) -> ScenarioSpec {
        let mut spec = self.clone();
        spec.seed = seed;
        spec
    }

    fn task_noise(&self, task: usize) -> Result<f64, ScenarioError> {
        match &self.noise_per_task {
            None => Ok(self.noise_scale),
            Some(multipliers) => {
                if multipliers.len() != self.n_tasks {
                    return Err(ScenarioError::InvalidSpec(format!(
                        "noise_per_task has {} entries for {} tasks",
                        multipliers.len(),
                        self.n_tasks
                    )));
                }
                Ok(self.noise_scale * multipliers[task])
            }
        }
    }

    fn validate_common(&self) -> Result<(), ScenarioError> {
        if self.feature_dim < 2 {
            return Err(ScenarioError::InvalidSpec("feature_dim must be >= 2".into()));
        }
        if self.instances_per_task < 3 * GROUP_SIZE {
            return Err(ScenarioError::InvalidSpec(format!(
                "instances_per_task must be at least {} to allow a group split",
                3 * GROUP_SIZE
            )));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(ScenarioError::InvalidSpec("noise_scale must be >= 0".into()));
        }
        Ok(())
    }
}

/// Standard normal draw (Box-Muller).
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn normal_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| normal(rng)).collect()
}

/// Class-incremental scenario: task `j` owns the mutually-exclusive
/// class pair `{2j, 2j+1}` of a single shared label space.
pub fn gen_class_il(spec: &ScenarioSpec) -> Result<Vec<TaskDataset>, ScenarioError> {
    if spec.kind != ScenarioKind::ClassIl {
        return Err(ScenarioError::InvalidSpec("spec kind is not class_il".into()));
    }
    spec.validate_common()?;
    if spec.classes != 2 * spec.n_tasks {
        return Err(ScenarioError::InvalidSpec(format!(
            "class_il requires classes == 2 * n_tasks ({} != 2 * {})",
            spec.classes, spec.n_tasks
        )));
    }
    let mut mean_rng = derive_indexed(spec.seed, Stream::Scenario, 0);
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| normal_vec(&mut mean_rng, spec.feature_dim))
        .collect();

    let mut next_instance = 0u64;
    let mut next_group = 0u64;
    let mut tasks = Vec::new();
    for j in 0..spec.n_tasks {
        let class_pair = [2 * j, 2 * j + 1];
        let noise = spec.task_noise(j)?;
        let mut gen_rng = derive_indexed(spec.seed, Stream::Scenario, 1 + j as u64);
        let instances = sample_task_instances(
            TaskId(j as u32),
            &class_pair,
            &means,
            noise,
            spec.instances_per_task,
            &mut gen_rng,
            &mut next_instance,
            &mut next_group,
        );
        let mut split_rng = derive_indexed(mix(spec.seed, 0x5917), Stream::Split, j as u64);
        let (train, validation, test) = split_by_group(&instances, SPLIT_RATIOS, &mut split_rng)?;
        tasks.push(TaskDataset {
            task_id: TaskId(j as u32),
            name: format!("{}-{}", class_pair[0], class_pair[1]),
            train,
            validation,
            test,
        });
    }
    Ok(tasks)
}

/// Time-incremental scenario: every task shares the same classes, but
/// task `t` shifts every class mean by `t * drift_scale * d` for a
/// seeded drift direction `d`. Labels are untouched.
pub fn gen_time_il(spec: &ScenarioSpec) -> Result<Vec<TaskDataset>, ScenarioError> {
    if spec.kind != ScenarioKind::TimeIl {
        return Err(ScenarioError::InvalidSpec("spec kind is not time_il".into()));
    }
    spec.validate_common()?;
    if spec.n_tasks < 2 {
        return Err(ScenarioError::InvalidSpec("time_il needs n_tasks >= 2".into()));
    }
    if spec.classes < 2 {
        return Err(ScenarioError::InvalidSpec("time_il needs classes >= 2".into()));
    }
    let mut mean_rng = derive_indexed(spec.seed, Stream::Scenario, 0);
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| normal_vec(&mut mean_rng, spec.feature_dim))
        .collect();
    let drift = normal_vec(&mut mean_rng, spec.feature_dim);

    let all_classes: Vec<usize> = (0..spec.classes).collect();
    let mut next_instance = 0u64;
    let mut next_group = 0u64;
    let mut tasks = Vec::new();
    for t in 0..spec.n_tasks {
        let shifted: Vec<Vec<f64>> = means
            .iter()
            .map(|m| {
                m.iter()
                    .zip(&drift)
                    .map(|(mv, dv)| mv + spec.drift_scale * t as f64 * dv)
                    .collect()
            })
            .collect();
        let noise = spec.task_noise(t)?;
        let mut gen_rng = derive_indexed(spec.seed, Stream::Scenario, 1 + t as u64);
        let instances = sample_task_instances(
            TaskId(t as u32),
            &all_classes,
            &shifted,
            noise,
            spec.instances_per_task,
            &mut gen_rng,
            &mut next_instance,
            &mut next_group,
        );
        let mut split_rng = derive_indexed(mix(spec.seed, 0x5917), Stream::Split, t as u64);
        let (train, validation, test) = split_by_group(&instances, SPLIT_RATIOS, &mut split_rng)?;
        tasks.push(TaskDataset {
            task_id: TaskId(t as u32),
            name: format!("term{}", t + 1),
            train,
            validation,
            test,
        });
    }
    Ok(tasks)
}

/// Domain-incremental scenario: one latent dataset viewed through a
/// different projection per task. Odd-indexed views negate the previous
/// view's projection, giving near-opposing input representations.
pub fn gen_domain_il(spec: &ScenarioSpec) -> Result<Vec<TaskDataset>, ScenarioError> {
    let projections = seeded_projections(spec)?;
    gen_domain_il_with_projections(spec, &projections)
}

/// Seeded orthonormal projections for the domain-incremental scenario,
/// with each odd view the negation of its predecessor.
pub fn seeded_projections(spec: &ScenarioSpec) -> Result<Vec<Vec<Vec<f64>>>, ScenarioError> {
    if spec.n_tasks < 2 {
        return Err(ScenarioError::InvalidSpec("domain_il needs n_tasks >= 2".into()));
    }
    let m = spec.feature_dim;
    let mut proj_rng = derive_indexed(mix(spec.seed, 0x9e37), Stream::Scenario, 0);
    let mut projections: Vec<Vec<Vec<f64>>> = Vec::new();
    for v in 0..spec.n_tasks {
        if v % 2 == 1 {
            let prev = projections[v - 1].clone();
            projections.push(
                prev.into_iter()
                    .map(|row| row.into_iter().map(|x| -x).collect())
                    .collect(),
            );
        } else {
            projections.push(random_orthonormal(m, &mut proj_rng));
        }
    }
    Ok(projections)
}

/// Domain-incremental generation under explicit `m x m` projections.
pub fn gen_domain_il_with_projections(
    spec: &ScenarioSpec,
    projections: &[Vec<Vec<f64>>],
) -> Result<Vec<TaskDataset>, ScenarioError> {
    if spec.kind != ScenarioKind::DomainIl {
        return Err(ScenarioError::InvalidSpec("spec kind is not domain_il".into()));
    }
    spec.validate_common()?;
    if spec.n_tasks < 2 {
        return Err(ScenarioError::InvalidSpec("domain_il needs n_tasks >= 2".into()));
    }
    if spec.classes < 2 {
        return Err(ScenarioError::InvalidSpec("domain_il needs classes >= 2".into()));
    }
    if projections.len() != spec.n_tasks {
        return Err(ScenarioError::InvalidSpec(format!(
            "{} projections supplied for {} tasks",
            projections.len(),
            spec.n_tasks
        )));
    }

    // One latent dataset shared by every view.
    let mut mean_rng = derive_indexed(spec.seed, Stream::Scenario, 0);
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| normal_vec(&mut mean_rng, spec.feature_dim))
        .collect();
    let all_classes: Vec<usize> = (0..spec.classes).collect();
    let mut next_instance = 0u64;
    let mut next_group = 0u64;
    let mut gen_rng = derive_indexed(spec.seed, Stream::Scenario, 1);
    let latent = sample_task_instances(
        TaskId(0),
        &all_classes,
        &means,
        spec.noise_scale,
        spec.instances_per_task,
        &mut gen_rng,
        &mut next_instance,
        &mut next_group,
    );
    let mut split_rng = derive_indexed(mix(spec.seed, 0x5917), Stream::Split, 0);
    let (latent_train, latent_val, latent_test) =
        split_by_group(&latent, SPLIT_RATIOS, &mut split_rng)?;

    let project_all = |src: &[Instance], view: usize, proj: &[Vec<f64>]| -> Vec<Instance> {
        src.iter()
            .map(|inst| {
                let features: Vec<f64> = (0..spec.feature_dim)
                    .map(|row| {
                        proj[row]
                            .iter()
                            .zip(&inst.features)
                            .map(|(p, f)| p * f)
                            .sum()
                    })
                    .collect();
                Instance {
                    instance_id: InstanceId(
                        inst.instance_id.0 + (view as u64) * spec.instances_per_task as u64,
                    ),
                    group_id: inst.group_id,
                    task_id: TaskId(view as u32),
                    features,
                    label: inst.label,
                }
            })
            .collect()
    };

    let mut tasks = Vec::new();
    for (v, proj) in projections.iter().enumerate() {
        if proj.len() != spec.feature_dim
            || proj.iter().any(|row| row.len() != spec.feature_dim)
        {
            return Err(ScenarioError::InvalidSpec(format!(
                "projection {v} is not {m} x {m}",
                m = spec.feature_dim
            )));
        }
        tasks.push(TaskDataset {
            task_id: TaskId(v as u32),
            name: format!("view{}", v + 1),
            train: project_all(&latent_train, v, proj),
            validation: project_all(&latent_val, v, proj),
            test: project_all(&latent_test, v, proj),
        });
    }
    Ok(tasks)
}

/// Orthonormal `m x m` matrix by modified Gram-Schmidt on Gaussian rows.
fn random_orthonormal(m: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(m);
    while rows.len() < m {
        let mut candidate = normal_vec(rng, m);
        for prev in &rows {
            let dot: f64 = candidate.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (c, p) in candidate.iter_mut().zip(prev) {
                *c -= dot * p;
            }
        }
        let norm: f64 = candidate.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-8 {
            for c in candidate.iter_mut() {
                *c /= norm;
            }
            rows.push(candidate);
        }
    }
    rows
}

/// Draw `count` instances over `class_set` (balanced, remainder to the
/// earliest classes), assigning consecutive same-class instances to
/// groups of [`GROUP_SIZE`].
#[allow(clippy::too_many_arguments)]
fn sample_task_instances(
    task: TaskId,
    class_set: &[usize],
    means: &[Vec<f64>],
    noise: f64,
    count: usize,
    rng: &mut ChaCha8Rng,
    next_instance: &mut u64,
    next_group: &mut u64,
) -> Vec<Instance> {
    let per_class = count / class_set.len();
    let remainder = count % class_set.len();
    let mut instances = Vec::with_capacity(count);
    for (k, &class) in class_set.iter().enumerate() {
        let n = per_class + usize::from(k < remainder);
        for idx in 0..n {
            if idx % GROUP_SIZE == 0 {
                *next_group += 1;
            }
            let features: Vec<f64> = means[class]
                .iter()
                .map(|&mu| mu + noise * normal(rng))
                .collect();
            instances.push(Instance {
                instance_id: InstanceId(*next_instance),
                group_id: *next_group - 1,
                task_id: task,
                features,
                label: class,
            });
            *next_instance += 1;
        }
    }
    instances
}

/// Partition instances into train/validation/test so that groups stay
/// whole and instance counts approximate the ratios (greedy packing of
/// seeded-shuffled groups into the split with the largest deficit).
pub fn split_by_group(
    instances: &[Instance],
    ratios: (f64, f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Instance>, Vec<Instance>, Vec<Instance>), ScenarioError> {
    let mut by_group: BTreeMap<u64, Vec<&Instance>> = BTreeMap::new();
    for inst in instances {
        by_group.entry(inst.group_id).or_default().push(inst);
    }
    if by_group.len() < 3 {
        return Err(ScenarioError::TooFewGroups { need: 3, got: by_group.len() });
    }
    let mut group_ids: Vec<u64> = by_group.keys().copied().collect();
    group_ids.shuffle(rng);

    let total = instances.len() as f64;
    let targets = [ratios.0 * total, ratios.1 * total, ratios.2 * total];
    let mut assigned = [0.0f64; 3];
    let mut splits: [Vec<Instance>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for gid in group_ids {
        let members = &by_group[&gid];
        let deficit = |k: usize| targets[k] - assigned[k];
        let mut best = 0;
        for k in 1..3 {
            if deficit(k) > deficit(best) {
                best = k;
            }
        }
        assigned[best] += members.len() as f64;
        splits[best].extend(members.iter().map(|&inst| inst.clone()));
    }
    let [train, validation, test] = splits;
    Ok((train, validation, test))
}

// --- CSV ingestion and export ------------------------------------------

const CSV_FIXED_HEADER: [&str; 5] = ["instance_id", "group_id", "task_id", "split", "label"];

/// Write every task and split to one CSV document. Floats use 17
/// significant digits so a reload reproduces them bitwise.
pub fn save_csv(datasets: &[TaskDataset], path: &Path) -> Result<(), ScenarioError> {
    let feature_dim = datasets
        .iter()
        .flat_map(|d| d.train.iter().chain(&d.validation).chain(&d.test))
        .map(|inst| inst.features.len())
        .next()
        .unwrap_or(0);
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header: Vec<String> = CSV_FIXED_HEADER.iter().map(|s| s.to_string()).collect();
    for k in 0..feature_dim {
        header.push(format!("f{k}"));
    }
    writeln!(file, "{}", header.join(","))?;
    for dataset in datasets {
        for split in [SplitKind::Train, SplitKind::Validation, SplitKind::Test] {
            for inst in dataset.split(split) {
                let mut row = vec![
                    inst.instance_id.to_string(),
                    inst.group_id.to_string(),
                    inst.task_id.to_string(),
                    split.name().to_string(),
                    inst.label.to_string(),
                ];
                for &f in &inst.features {
                    row.push(format!("{f:.16e}"));
                }
                writeln!(file, "{}", row.join(","))?;
            }
        }
    }
    file.flush()?;
    Ok(())
}

/// Parse and validate the CSV schema written by [`save_csv`]: fixed
/// columns `instance_id, group_id, task_id, split, label` followed by
/// `f0..f{m-1}`. Group/split conflicts and duplicate instances are
/// rejected; malformed rows report their line number.
pub fn load_csv(path: &Path) -> Result<Vec<TaskDataset>, ScenarioError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| ScenarioError::BadHeader(e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| ScenarioError::BadHeader(e.to_string()))?
        .clone();
    if header.len() < CSV_FIXED_HEADER.len() + 1 {
        return Err(ScenarioError::BadHeader(format!(
            "expected at least {} columns, got {}",
            CSV_FIXED_HEADER.len() + 1,
            header.len()
        )));
    }
    for (k, expected) in CSV_FIXED_HEADER.iter().enumerate() {
        if header.get(k) != Some(expected) {
            return Err(ScenarioError::BadHeader(format!(
                "column {k} must be '{expected}', got '{}'",
                header.get(k).unwrap_or("")
            )));
        }
    }
    let feature_dim = header.len() - CSV_FIXED_HEADER.len();
    for k in 0..feature_dim {
        let expected = format!("f{k}");
        if header.get(CSV_FIXED_HEADER.len() + k) != Some(expected.as_str()) {
            return Err(ScenarioError::BadHeader(format!(
                "feature column {} must be '{expected}'",
                CSV_FIXED_HEADER.len() + k
            )));
        }
    }

    let mut tasks: BTreeMap<TaskId, TaskDataset> = BTreeMap::new();
    let mut group_split: BTreeMap<u64, &'static str> = BTreeMap::new();
    let mut seen: BTreeSet<(TaskId, InstanceId)> = BTreeSet::new();
    let mut rows = 0u64;

    for record in reader.records() {
        let record = record.map_err(|e| ScenarioError::MalformedRow {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |k: usize| -> Result<&str, ScenarioError> {
            record.get(k).ok_or(ScenarioError::MalformedRow {
                line,
                message: format!("missing column {k}"),
            })
        };
        let parse_err = |message: String| ScenarioError::MalformedRow { line, message };

        if record.len() != header.len() {
            return Err(parse_err(format!(
                "expected {} fields, got {}",
                header.len(),
                record.len()
            )));
        }
        let instance_id = InstanceId(
            field(0)?
                .parse()
                .map_err(|e| parse_err(format!("instance_id: {e}")))?,
        );
        let group_id: u64 = field(1)?
            .parse()
            .map_err(|e| parse_err(format!("group_id: {e}")))?;
        let task_id = TaskId(
            field(2)?
                .parse()
                .map_err(|e| parse_err(format!("task_id: {e}")))?,
        );
        let split = match field(3)? {
            "train" => SplitKind::Train,
            "validation" => SplitKind::Validation,
            "test" => SplitKind::Test,
            other => {
                return Err(parse_err(format!(
                    "split must be train/validation/test, got '{other}'"
                )))
            }
        };
        let label: usize = field(4)?
            .parse()
            .map_err(|e| parse_err(format!("label: {e}")))?;
        let mut features = Vec::with_capacity(feature_dim);
        for k in 0..feature_dim {
            let value: f64 = field(CSV_FIXED_HEADER.len() + k)?
                .parse()
                .map_err(|e| parse_err(format!("f{k}: {e}")))?;
            if !value.is_finite() {
                return Err(parse_err(format!("f{k}: non-finite value")));
            }
            features.push(value);
        }

        if !seen.insert((task_id, instance_id)) {
            return Err(ScenarioError::DuplicateInstance { task: task_id, instance: instance_id });
        }
        match group_split.get(&group_id) {
            None => {
                group_split.insert(group_id, split.name());
            }
            Some(&first) if first != split.name() => {
                return Err(ScenarioError::GroupSplitViolation {
                    group: group_id,
                    first,
                    second: split.name(),
                });
            }
            _ => {}
        }

        let dataset = tasks.entry(task_id).or_insert_with(|| TaskDataset {
            task_id,
            name: format!("task{}", task_id.0),
            train: Vec::new(),
            validation: Vec::new(),
            test: Vec::new(),
        });
        let instance = Instance { instance_id, group_id, task_id, features, label };
        match split {
            SplitKind::Train => dataset.train.push(instance),
            SplitKind::Validation => dataset.validation.push(instance),
            SplitKind::Test => dataset.test.push(instance),
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(ScenarioError::NoDataRows);
    }
    Ok(tasks.into_values().collect())
}
