//! Synthetic task workloads: the overlapping dataset, non-IID client shards
//! and the client task schedules.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FclError, Result};
use crate::model::{Batch, Matrix};
use crate::rng::{stream, Purpose};

/// Upper bound on the number of classes a generated dataset may have.
pub const MAX_CLASSES: usize = 100_000;

/// Redraws allowed per task before giving up on the minimum-shard requirement.
pub const MAX_PARTITION_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub class_ids: Vec<usize>,
}

impl TaskSpec {
    pub fn classes_per_task(&self) -> usize {
        self.class_ids.len()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.class_ids.contains(&class)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Superclass (equivalently task) of every class.
    pub class_to_superclass: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Indices of all examples of `class`, ascending.
    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|&(_, &y)| y == class)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        Batch::new(
            self.inputs.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// Shape of the synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetParams {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub examples_per_class: usize,
    pub input_dim: usize,
    pub noise_sigma: f64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            num_tasks: 10,
            classes_per_task: 5,
            examples_per_class: 60,
            input_dim: 32,
            noise_sigma: 0.3,
        }
    }
}

impl DatasetParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0
            || self.classes_per_task == 0
            || self.examples_per_class == 0
            || self.input_dim == 0
        {
            return Err(FclError::config("dataset sizes must be positive"));
        }
        match self.num_tasks.checked_mul(self.classes_per_task) {
            Some(n) if n <= MAX_CLASSES => {}
            _ => {
                return Err(FclError::config(format!(
                    "dataset.num_tasks * dataset.classes_per_task exceeds {MAX_CLASSES} classes"
                )))
            }
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(FclError::config("dataset.noise_sigma must be positive"));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_tasks * self.classes_per_task
    }
}

/// Gaussian blobs where the classes of one task share a superclass mean.
///
/// Superclass means are `N(0, I)`, class means add `0.5 * N(0, I)`, and each
/// example adds `noise_sigma * N(0, I)`. Task `t` owns classes
/// `t * classes_per_task .. (t + 1) * classes_per_task`. Examples are stored
/// grouped by class.
pub fn generate_overlapping_dataset(
    params: &DatasetParams,
    seed: u64,
) -> Result<(Dataset, Vec<TaskSpec>)> {
    params.validate()?;
    let dim = params.input_dim;
    let num_classes = params.num_classes();
    let mut rng = stream(seed, Purpose::Dataset, 0);
    let normal = |rng: &mut crate::rng::SimRng| -> f64 { StandardNormal.sample(rng) };

    let mut data = Vec::with_capacity(num_classes * params.examples_per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * params.examples_per_class);
    let mut class_to_superclass = Vec::with_capacity(num_classes);
    let mut tasks = Vec::with_capacity(params.num_tasks);

    for task in 0..params.num_tasks {
        let super_mean: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
        let first = task * params.classes_per_task;
        for class in first..first + params.classes_per_task {
            let mean: Vec<f64> = super_mean
                .iter()
                .map(|&m| m + 0.5 * normal(&mut rng))
                .collect();
            for _ in 0..params.examples_per_class {
                data.extend(mean.iter().map(|&m| m + params.noise_sigma * normal(&mut rng)));
                labels.push(class);
            }
            class_to_superclass.push(task);
        }
        tasks.push(TaskSpec {
            task_id: task,
            class_ids: (first..first + params.classes_per_task).collect(),
        });
    }

    let dataset = Dataset {
        inputs: Matrix::new(labels.len(), dim, data)?,
        labels,
        num_classes,
        class_to_superclass,
    };
    Ok((dataset, tasks))
}

/// One client's slice of the dataset, grouped by task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardSpec {
    pub client_id: usize,
    pub indices_per_task: BTreeMap<usize, Vec<usize>>,
}

impl ShardSpec {
    pub fn indices(&self, task_id: usize) -> &[usize] {
        self.indices_per_task
            .get(&task_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

/// Splits every class of every task across clients with Dirichlet(`alpha`)
/// proportions.
///
/// A task is redrawn whenever some client would end up with no example of
/// it, up to [`MAX_PARTITION_ATTEMPTS`] times.
pub fn partition_noniid(
    dataset: &Dataset,
    tasks: &[TaskSpec],
    num_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<ShardSpec>> {
    if num_clients == 0 {
        return Err(FclError::config("partition.num_clients must be at least 1"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(FclError::config(format!(
            "partition.alpha must be positive, got {alpha}"
        )));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| FclError::config(e.to_string()))?;
    let mut shards: Vec<ShardSpec> = (0..num_clients)
        .map(|client_id| ShardSpec {
            client_id,
            indices_per_task: BTreeMap::new(),
        })
        .collect();

    for task in tasks {
        let mut rng = stream(seed, Purpose::Partition, task.task_id as u64);
        let class_indices: Vec<Vec<usize>> = task
            .class_ids
            .iter()
            .map(|&c| dataset.indices_of_class(c))
            .collect();

        let mut assignment = None;
        for _ in 0..MAX_PARTITION_ATTEMPTS {
            let mut per_client: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
            for indices in &class_indices {
                let mut indices = indices.clone();
                indices.shuffle(&mut rng);
                let cuts = dirichlet_cuts(&gamma, num_clients, indices.len(), &mut rng);
                for (client, window) in cuts.windows(2).enumerate() {
                    per_client[client].extend_from_slice(&indices[window[0]..window[1]]);
                }
            }
            if per_client.iter().all(|v| !v.is_empty()) {
                assignment = Some(per_client);
                break;
            }
        }
        let per_client = assignment.ok_or_else(|| {
            FclError::config(format!(
                "could not give every client an example of task {} (classes {:?}) after {} draws",
                task.task_id, task.class_ids, MAX_PARTITION_ATTEMPTS
            ))
        })?;
        for (shard, indices) in shards.iter_mut().zip(per_client) {
            shard.indices_per_task.insert(task.task_id, indices);
        }
    }
    Ok(shards)
}

/// Cut points `0 = c_0 <= c_1 <= ... <= c_k = n` from Dirichlet proportions.
fn dirichlet_cuts<R: Rng>(gamma: &Gamma<f64>, k: usize, n: usize, rng: &mut R) -> Vec<usize> {
    let draws: Vec<f64> = loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        if draws.iter().sum::<f64>() > 0.0 {
            break draws;
        }
    };
    let total: f64 = draws.iter().sum();
    let mut cuts = Vec::with_capacity(k + 1);
    cuts.push(0);
    let mut acc = 0.0;
    for d in &draws[..k - 1] {
        acc += d;
        let cut = ((acc / total) * n as f64).round() as usize;
        cuts.push(cut.clamp(*cuts.last().unwrap(), n));
    }
    cuts.push(n);
    cuts
}

/// Holds out `floor(test_fraction * n)` examples of every (client, task) shard.
///
/// The held-out examples are the tail of each shard's index list.
pub fn split_train_test(shards: &[ShardSpec], test_fraction: f64) -> Result<(Vec<ShardSpec>, Vec<ShardSpec>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(FclError::config(format!(
            "partition.test_fraction must be in [0, 1), got {test_fraction}"
        )));
    }
    let mut train = Vec::with_capacity(shards.len());
    let mut test = Vec::with_capacity(shards.len());
    for shard in shards {
        let mut tr = BTreeMap::new();
        let mut te = BTreeMap::new();
        for (&task, indices) in &shard.indices_per_task {
            let n_test = (indices.len() as f64 * test_fraction).floor() as usize;
            let (a, b) = indices.split_at(indices.len() - n_test);
            tr.insert(task, a.to_vec());
            te.insert(task, b.to_vec());
        }
        train.push(ShardSpec {
            client_id: shard.client_id,
            indices_per_task: tr,
        });
        test.push(ShardSpec {
            client_id: shard.client_id,
            indices_per_task: te,
        });
    }
    Ok((train, test))
}

/// Clients x steps grid of task IDs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMatrix {
    entries: Vec<Vec<usize>>,
}

impl TaskMatrix {
    pub fn new(entries: Vec<Vec<usize>>, num_tasks: usize) -> Result<Self> {
        let steps = entries.first().map_or(0, Vec::len);
        if entries.iter().any(|r| r.len() != steps) {
            return Err(FclError::config("task matrix rows differ in length"));
        }
        if let Some(bad) = entries.iter().flatten().find(|&&t| t >= num_tasks) {
            return Err(FclError::config(format!("task id {bad} out of range")));
        }
        Ok(TaskMatrix { entries })
    }

    pub fn num_clients(&self) -> usize {
        self.entries.len()
    }

    pub fn num_steps(&self) -> usize {
        self.entries.first().map_or(0, Vec::len)
    }

    pub fn task(&self, client: usize, step: usize) -> usize {
        self.entries[client][step]
    }

    pub fn row(&self, client: usize) -> &[usize] {
        &self.entries[client]
    }

    pub fn column(&self, step: usize) -> Vec<usize> {
        self.entries.iter().map(|r| r[step]).collect()
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.entries
    }
}

/// Which task-schedule generator to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Column,
    Balanced,
    Shuffled,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Column, Scheme::Balanced, Scheme::Shuffled];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Column => "column",
            Scheme::Balanced => "balanced",
            Scheme::Shuffled => "shuffled",
        }
    }
}

pub fn build_schedule(scheme: Scheme, num_clients: usize, num_tasks: usize, seed: u64) -> Result<TaskMatrix> {
    match scheme {
        Scheme::Column => schedule_column(num_clients, num_tasks),
        Scheme::Balanced => schedule_balanced(num_clients, num_tasks, seed),
        Scheme::Shuffled => schedule_shuffled(num_clients, num_tasks, seed),
    }
}

fn check_sizes(num_clients: usize, num_tasks: usize) -> Result<()> {
    if num_clients == 0 || num_tasks == 0 {
        return Err(FclError::config("schedule needs at least one client and one task"));
    }
    Ok(())
}

/// Every client trains the tasks in the same order.
pub fn schedule_column(num_clients: usize, num_tasks: usize) -> Result<TaskMatrix> {
    check_sizes(num_clients, num_tasks)?;
    TaskMatrix::new(vec![(0..num_tasks).collect(); num_clients], num_tasks)
}

/// Rotated rows over a seeded task permutation: at every step each task is
/// trained by at most one client.
pub fn schedule_balanced(num_clients: usize, num_tasks: usize, seed: u64) -> Result<TaskMatrix> {
    check_sizes(num_clients, num_tasks)?;
    let mut order: Vec<usize> = (0..num_tasks).collect();
    order.shuffle(&mut stream(seed, Purpose::Schedule, 0));
    schedule_balanced_with_order(num_clients, &order)
}

/// Balanced schedule over an explicit task order: `row i, step s = order[(i + s) mod T]`.
pub fn schedule_balanced_with_order(num_clients: usize, order: &[usize]) -> Result<TaskMatrix> {
    let num_tasks = order.len();
    check_sizes(num_clients, num_tasks)?;
    if num_clients > num_tasks {
        return Err(FclError::config(format!(
            "balanced schedule needs num_clients ({num_clients}) <= num_tasks ({num_tasks})"
        )));
    }
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (0..num_tasks).collect::<Vec<_>>() {
        return Err(FclError::config("task order must be a permutation"));
    }
    let entries = (0..num_clients)
        .map(|i| (0..num_tasks).map(|s| order[(i + s) % num_tasks]).collect())
        .collect();
    TaskMatrix::new(entries, num_tasks)
}

/// Independent seeded permutation per client.
pub fn schedule_shuffled(num_clients: usize, num_tasks: usize, seed: u64) -> Result<TaskMatrix> {
    check_sizes(num_clients, num_tasks)?;
    let mut rng = stream(seed, Purpose::Schedule, 1);
    let entries = (0..num_clients)
        .map(|_| {
            let mut row: Vec<usize> = (0..num_tasks).collect();
            row.shuffle(&mut rng);
            row
        })
        .collect();
    TaskMatrix::new(entries, num_tasks)
}

/// Writes one example per line: features, label, task id, comma separated.
pub fn export_dataset<W: Write>(dataset: &Dataset, mut out: W) -> std::io::Result<()> {
    let mut line = String::new();
    for (i, &label) in dataset.labels.iter().enumerate() {
        line.clear();
        for x in dataset.inputs.row(i) {
            let _ = write!(line, "{x:?},");
        }
        let _ = writeln!(line, "{label},{}", dataset.class_to_superclass[label]);
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}

/// One parsed line of an exported dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportedExample {
    pub features: Vec<f64>,
    pub label: usize,
    pub task_id: usize,
}

/// Parses the text written by [`export_dataset`]. All lines must have the
/// same number of features.
pub fn parse_exported_dataset(text: &str) -> Result<Vec<ExportedExample>> {
    let mut out: Vec<ExportedExample> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(FclError::workload(format!("line {}: too few fields", n + 1)));
        }
        let (features, tail) = fields.split_at(fields.len() - 2);
        let features = features
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| FclError::workload(format!("line {}: {e}", n + 1)))?;
        let ints = tail
            .iter()
            .map(|f| f.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| FclError::workload(format!("line {}: {e}", n + 1)))?;
        if out.first().is_some_and(|e| e.features.len() != features.len()) {
            return Err(FclError::workload(format!("line {}: feature count changed", n + 1)));
        }
        out.push(ExportedExample {
            features,
            label: ints[0],
            task_id: ints[1],
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small() -> DatasetParams {
        DatasetParams {
            num_tasks: 3,
            classes_per_task: 2,
            examples_per_class: 20,
            input_dim: 4,
            noise_sigma: 0.3,
        }
    }

    #[test]
    fn ten_tasks_of_five_classes() {
        let (ds, tasks) = generate_overlapping_dataset(&DatasetParams::default(), 0).unwrap();
        assert_eq!(ds.num_classes, 50);
        assert_eq!(tasks.len(), 10);
        for (t, task) in tasks.iter().enumerate() {
            assert_eq!(task.class_ids, (5 * t..5 * t + 5).collect::<Vec<_>>());
        }
        assert!(ds.labels.iter().all(|&y| y < 50));
        for c in 0..50 {
            assert_eq!(ds.indices_of_class(c).len(), 60);
        }
    }

    #[test]
    fn twenty_tasks_give_hundred_classes() {
        let params = DatasetParams {
            num_tasks: 20,
            examples_per_class: 2,
            ..DatasetParams::default()
        };
        let (ds, tasks) = generate_overlapping_dataset(&params, 1).unwrap();
        assert_eq!(ds.num_classes, 100);
        let all: BTreeSet<usize> = tasks.iter().flat_map(|t| t.class_ids.clone()).collect();
        assert_eq!(all.len(), 100);
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate_overlapping_dataset(&small(), 5).unwrap();
        let b = generate_overlapping_dataset(&small(), 5).unwrap();
        let c = generate_overlapping_dataset(&small(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn classes_of_a_task_overlap() {
        // Same-task class means sit closer together than cross-task means.
        let params = DatasetParams {
            num_tasks: 4,
            classes_per_task: 2,
            examples_per_class: 50,
            input_dim: 32,
            noise_sigma: 0.3,
        };
        let (ds, _) = generate_overlapping_dataset(&params, 3).unwrap();
        let mean = |c: usize| -> Vec<f64> {
            let idx = ds.indices_of_class(c);
            (0..32)
                .map(|j| idx.iter().map(|&i| ds.inputs.get(i, j)).sum::<f64>() / idx.len() as f64)
                .collect()
        };
        let dist = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        };
        let means: Vec<Vec<f64>> = (0..8).map(mean).collect();
        let within: f64 = (0..4).map(|t| dist(&means[2 * t], &means[2 * t + 1])).sum::<f64>() / 4.0;
        let across = dist(&means[0], &means[2]) + dist(&means[2], &means[4]) + dist(&means[4], &means[6]);
        assert!(within < across / 3.0);
    }

    #[test]
    fn bad_sizes_rejected() {
        let mut p = small();
        p.num_tasks = 0;
        assert!(matches!(generate_overlapping_dataset(&p, 0), Err(FclError::Config(_))));
        let mut p = small();
        p.noise_sigma = 0.0;
        assert!(generate_overlapping_dataset(&p, 0).is_err());
        let mut p = small();
        p.num_tasks = usize::MAX;
        assert!(generate_overlapping_dataset(&p, 0).is_err());
    }

    #[test]
    fn single_client_gets_everything() {
        let (ds, tasks) = generate_overlapping_dataset(&small(), 0).unwrap();
        let shards = partition_noniid(&ds, &tasks, 1, 0.5, 0).unwrap();
        let mut all: Vec<usize> = shards[0].indices_per_task.values().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
    }

    #[test]
    fn shards_partition_each_class() {
        let (ds, tasks) = generate_overlapping_dataset(&small(), 0).unwrap();
        let shards = partition_noniid(&ds, &tasks, 4, 0.3, 9).unwrap();
        for task in &tasks {
            for &c in &task.class_ids {
                let mut union: Vec<usize> = shards
                    .iter()
                    .flat_map(|s| s.indices(task.task_id).iter().copied())
                    .filter(|&i| ds.labels[i] == c)
                    .collect();
                union.sort_unstable();
                let before = union.len();
                union.dedup();
                assert_eq!(before, union.len(), "duplicate index");
                assert_eq!(union, ds.indices_of_class(c));
            }
            for s in &shards {
                assert!(!s.indices(task.task_id).is_empty());
                assert!(s.indices(task.task_id).iter().all(|&i| task.contains(ds.labels[i])));
            }
        }
    }

    #[test]
    fn huge_alpha_splits_evenly() {
        // Law of large numbers: Dirichlet(1e6) proportions are ~1/2 each.
        let params = DatasetParams {
            examples_per_class: 100,
            ..small()
        };
        let (ds, tasks) = generate_overlapping_dataset(&params, 0).unwrap();
        for seed in 0..10 {
            let shards = partition_noniid(&ds, &tasks, 2, 1e6, seed).unwrap();
            for c in 0..ds.num_classes {
                let task = ds.class_to_superclass[c];
                let count = |s: &ShardSpec| s.indices(task).iter().filter(|&&i| ds.labels[i] == c).count();
                let diff = count(&shards[0]).abs_diff(count(&shards[1]));
                assert!(diff as f64 <= 0.05 * 100.0, "class {c} seed {seed}: diff {diff}");
            }
        }
    }

    #[test]
    fn impossible_minimum_is_config_error() {
        let params = DatasetParams {
            examples_per_class: 1,
            ..small()
        };
        let (ds, tasks) = generate_overlapping_dataset(&params, 0).unwrap();
        let err = partition_noniid(&ds, &tasks, 5, 0.5, 0).unwrap_err();
        assert!(matches!(err, FclError::Config(ref m) if m.contains("task 0")));
        assert!(partition_noniid(&ds, &tasks, 0, 0.5, 0).is_err());
        assert!(partition_noniid(&ds, &tasks, 1, 0.0, 0).is_err());
    }

    #[test]
    fn holdout_takes_floor_fraction() {
        let shard = ShardSpec {
            client_id: 0,
            indices_per_task: BTreeMap::from([(0, (0..10).collect()), (1, vec![7])]),
        };
        let (train, test) = split_train_test(&[shard], 0.2).unwrap();
        assert_eq!(train[0].indices(0), &[0, 1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(test[0].indices(0), &[8, 9]);
        assert_eq!(train[0].indices(1), &[7]);
        assert!(test[0].indices(1).is_empty());
        assert!(split_train_test(&[], 1.0).is_err());
    }

    #[test]
    fn column_rows_are_identical() {
        let m = schedule_column(3, 3).unwrap();
        assert_eq!(m.rows(), &[vec![0, 1, 2], vec![0, 1, 2], vec![0, 1, 2]]);
        assert_eq!(schedule_column(1, 4).unwrap().rows(), &[vec![0, 1, 2, 3]]);
    }

    #[test]
    fn balanced_identity_is_latin_square() {
        let m = schedule_balanced_with_order(3, &[0, 1, 2]).unwrap();
        assert_eq!(m.rows(), &[vec![0, 1, 2], vec![1, 2, 0], vec![2, 0, 1]]);
    }

    #[test]
    fn balanced_needs_enough_tasks() {
        assert!(matches!(schedule_balanced(4, 3, 0), Err(FclError::Config(_))));
        assert!(schedule_balanced_with_order(2, &[0, 0, 1]).is_err());
    }

    #[test]
    fn shuffled_is_seeded() {
        assert_eq!(schedule_shuffled(4, 6, 11).unwrap(), schedule_shuffled(4, 6, 11).unwrap());
    }

    #[test]
    fn shuffled_covers_all_row_pairs() {
        // 3! * 3! = 36 possible (row0, row1) combinations.
        let mut seen = BTreeSet::new();
        for seed in 0..1000 {
            let m = schedule_shuffled(2, 3, seed).unwrap();
            seen.insert((m.row(0).to_vec(), m.row(1).to_vec()));
        }
        assert_eq!(seen.len(), 36);
    }

    #[test]
    fn export_round_trips() {
        let (ds, _) = generate_overlapping_dataset(&small(), 2).unwrap();
        let mut buf = Vec::new();
        export_dataset(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), ds.len());
        let parsed = parse_exported_dataset(&text).unwrap();
        for (i, ex) in parsed.iter().enumerate() {
            assert_eq!(ex.features, ds.inputs.row(i));
            assert_eq!(ex.label, ds.labels[i]);
            assert_eq!(ex.task_id, ds.class_to_superclass[ex.label]);
        }
        assert!(parse_exported_dataset("1.0,2\n").is_err());
        assert!(parse_exported_dataset("1.0,2,0\n1.0,3.0,2,0\n").is_err());
    }
}
