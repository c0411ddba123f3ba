//! The federator/client round loop.
//!
//! Each round the federator samples clients, every selected client trains the
//! current global model on the task its schedule row assigns for the current
//! step, and the results are merged with FedAvg. Client work is simulated on a
//! duration model instead of wall-clock time, so a run is a pure function of
//! its configuration.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::continual::{
    estimate_fisher, ewc_penalty_grad, gem_project, make_window_mask, update_memory,
    ContinualStrategy, EpisodicMemory, EwcAnchor, WindowMode,
};
use crate::error::{FclError, Result};
use crate::model::{loss_and_grad, predict, sgd_step_in_place, Batch, ClassMask, ModelParams};
use crate::rng::{pair, stream, Purpose};
use crate::workload::{Dataset, ShardSpec, TaskMatrix, TaskSpec};

/// Bytes per parameter on the wire.
pub const BYTES_PER_PARAM: u64 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientProfile {
    pub client_id: usize,
    /// Training throughput in examples per second.
    pub speed_factor: f64,
    /// Machine the client runs on; clients sharing a node contend for it.
    pub node_id: usize,
    pub link_latency_s: f64,
    #[serde(rename = "link_throughput_Bps")]
    pub link_throughput_bps: f64,
}

impl ClientProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.speed_factor > 0.0 && self.speed_factor.is_finite()) {
            return Err(FclError::config(format!(
                "client {}: speed_factor must be positive",
                self.client_id
            )));
        }
        if !(self.link_throughput_bps > 0.0 && self.link_throughput_bps.is_finite()) {
            return Err(FclError::config(format!(
                "client {}: link_throughput_Bps must be positive",
                self.client_id
            )));
        }
        if !(self.link_latency_s >= 0.0 && self.link_latency_s.is_finite()) {
            return Err(FclError::config(format!(
                "client {}: link_latency_s must be >= 0",
                self.client_id
            )));
        }
        Ok(())
    }
}

/// A trained local model as reported back to the federator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: Vec<f64>,
    pub num_samples: usize,
    /// Simulated time at which the client finished, relative to round start.
    pub sim_duration_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    FedAvg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub rounds_per_task: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub aggregation: Aggregation,
    pub window: WindowMode,
    pub strategy: ContinualStrategy,
    pub seed: u64,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(FclError::config("num_clients must be at least 1"));
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.num_clients {
            return Err(FclError::config(format!(
                "clients_per_round must be in 1..={}, got {}",
                self.num_clients, self.clients_per_round
            )));
        }
        if self.batch_size == 0 {
            return Err(FclError::config("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(FclError::config("lr must be positive"));
        }
        self.strategy.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round_id: usize,
    pub step: usize,
    pub selected: Vec<usize>,
    /// Selected clients with no training data for their scheduled task.
    pub skipped: Vec<usize>,
    pub federator_duration_s: f64,
    pub client_durations_s: BTreeMap<usize, f64>,
    pub avg_accuracy: f64,
    pub per_task_accuracy: BTreeMap<usize, f64>,
}

/// Samples `k` distinct clients, returned in ascending order.
pub fn select_clients<R: Rng>(num_clients: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k == 0 || k > num_clients {
        return Err(FclError::config(format!(
            "cannot select {k} of {num_clients} clients"
        )));
    }
    if k == num_clients {
        return Ok((0..num_clients).collect());
    }
    let mut ids = index::sample(rng, num_clients, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// The selection rng for a round.
pub fn selection_rng(seed: u64, round_id: usize) -> crate::rng::SimRng {
    stream(seed, Purpose::Selection, round_id as u64)
}

/// The local-training rng for one client in one round.
pub fn training_rng(seed: u64, round_id: usize, client: usize) -> crate::rng::SimRng {
    stream(seed, Purpose::LocalTraining, pair(round_id as u64, client as u64))
}

/// Strategy state a client carries across tasks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub anchors: BTreeMap<usize, EwcAnchor>,
    pub memory: EpisodicMemory,
}

/// Minibatch SGD over `train` for `cfg.local_epochs` epochs, starting from `global`.
///
/// EWC adds its penalty gradient to every minibatch gradient; GEM projects
/// every minibatch gradient against the gradients of the stored memories of
/// other tasks, evaluated with all classes active.
pub fn local_train<R: Rng>(
    global: &ModelParams,
    train: &Batch,
    task: &TaskSpec,
    mask: &ClassMask,
    cfg: &FederationConfig,
    state: &ClientState,
    rng: &mut R,
) -> Result<ModelParams> {
    let mut params = global.clone();
    let anchors: Vec<EwcAnchor> = state.anchors.values().cloned().collect();
    let full = ClassMask::all(global.num_classes());
    let mut order: Vec<usize> = (0..train.len()).collect();

    for _ in 0..cfg.local_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.select(chunk)?;
            let (_, mut grad) = loss_and_grad(&params, &batch, mask)?;
            match cfg.strategy {
                ContinualStrategy::Naive => {}
                ContinualStrategy::Ewc { lambda, .. } => {
                    let penalty = ewc_penalty_grad(&params.values, &anchors, lambda)?;
                    for (g, p) in grad.iter_mut().zip(penalty) {
                        *g += p;
                    }
                }
                ContinualStrategy::Gem { margin, .. } => {
                    let memory_grads = state
                        .memory
                        .per_task
                        .iter()
                        .filter(|&(&t, _)| t != task.task_id)
                        .map(|(_, mem)| loss_and_grad(&params, mem, &full).map(|(_, g)| g))
                        .collect::<Result<Vec<_>>>()?;
                    grad = gem_project(&grad, &memory_grads, margin)?;
                }
            }
            sgd_step_in_place(&mut params, &grad, cfg.lr)?;
        }
    }
    Ok(params)
}

/// Sample-weighted mean of the update vectors, accumulated in client-ID order.
///
/// The weighted sum is carried in double-double precision, so the result is
/// within one rounding of the exact mean and identical inputs come back
/// unchanged.
pub fn fedavg(updates: &[ClientUpdate]) -> Result<Vec<f64>> {
    let first = updates
        .first()
        .ok_or_else(|| FclError::Protocol("fedavg needs at least one update".into()))?;
    let len = first.params.len();
    if updates.iter().any(|u| u.params.len() != len) {
        return Err(FclError::Protocol("client updates differ in length".into()));
    }
    if updates.iter().any(|u| u.num_samples == 0) {
        return Err(FclError::Protocol("client update with zero samples".into()));
    }
    let mut ordered: Vec<&ClientUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client_id);

    let total: f64 = ordered.iter().map(|u| u.num_samples as f64).sum();
    let mut out = Vec::with_capacity(len);
    for j in 0..len {
        let (mut hi, mut lo) = (0.0f64, 0.0f64);
        for u in &ordered {
            let n = u.num_samples as f64;
            let x = u.params[j];
            let p = n * x;
            let p_err = n.mul_add(x, -p);
            let (s, s_err) = two_sum(hi, p);
            hi = s;
            lo += s_err + p_err;
        }
        let (hi, lo) = two_sum(hi, lo);
        let q = hi / total;
        let r = (-q).mul_add(total, hi) + lo;
        out.push(q + r / total);
    }
    Ok(out)
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Simulated client and federator round durations.
///
/// A client's time is `contention * work / speed + 2 * latency + 2 * bytes / throughput`,
/// where contention is the number of selected clients on its node. The
/// federator waits for the slowest client and then receives every model
/// sequentially.
pub fn simulate_durations(
    profiles: &[ClientProfile],
    selected: &[usize],
    work_units: &BTreeMap<usize, f64>,
    model_bytes: u64,
) -> Result<(BTreeMap<usize, f64>, f64)> {
    let by_id: BTreeMap<usize, &ClientProfile> = profiles.iter().map(|p| (p.client_id, p)).collect();
    let chosen = selected
        .iter()
        .map(|c| {
            by_id
                .get(c)
                .copied()
                .ok_or_else(|| FclError::config(format!("no resource profile for client {c}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut per_node: BTreeMap<usize, usize> = BTreeMap::new();
    for p in &chosen {
        *per_node.entry(p.node_id).or_default() += 1;
    }
    let bytes = model_bytes as f64;
    let mut durations = BTreeMap::new();
    let mut slowest = 0.0f64;
    let mut receive = 0.0;
    for p in chosen {
        let contention = per_node[&p.node_id] as f64;
        let work = work_units.get(&p.client_id).copied().unwrap_or(0.0);
        let d = contention * work / p.speed_factor
            + 2.0 * p.link_latency_s
            + 2.0 * bytes / p.link_throughput_bps;
        slowest = slowest.max(d);
        receive += bytes / p.link_throughput_bps;
        durations.insert(p.client_id, d);
    }
    Ok((durations, slowest + receive))
}

/// Everything a run needs besides its configuration.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub dataset: Dataset,
    pub tasks: Vec<TaskSpec>,
    pub train_shards: Vec<ShardSpec>,
    pub test_shards: Vec<ShardSpec>,
    pub schedule: TaskMatrix,
    pub profiles: Vec<ClientProfile>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub records: Vec<RoundRecord>,
    pub final_params: ModelParams,
}

fn check_inputs(cfg: &FederationConfig, data: &ExperimentData, initial: &ModelParams) -> Result<()> {
    cfg.validate()?;
    let n = cfg.num_clients;
    if data.schedule.num_clients() != n
        || data.train_shards.len() != n
        || data.test_shards.len() != n
    {
        return Err(FclError::config(format!(
            "schedule and shards must cover exactly {n} clients"
        )));
    }
    if initial.input_dim() != data.dataset.input_dim()
        || initial.num_classes() != data.dataset.num_classes
    {
        return Err(FclError::config("model shape does not match the dataset"));
    }
    for (i, t) in data.tasks.iter().enumerate() {
        if t.task_id != i {
            return Err(FclError::config("task ids must be 0..num_tasks in order"));
        }
    }
    if data.schedule.rows().iter().flatten().any(|&t| t >= data.tasks.len()) {
        return Err(FclError::config("schedule references an unknown task"));
    }
    for c in 0..n {
        if !data.profiles.iter().any(|p| p.client_id == c) {
            return Err(FclError::config(format!("no resource profile for client {c}")));
        }
    }
    data.profiles.iter().try_for_each(ClientProfile::validate)
}

/// Accuracy of `params` on the pooled held-out data of every task in `seen`.
pub fn evaluate(
    params: &ModelParams,
    data: &ExperimentData,
    seen: &[usize],
    window: WindowMode,
) -> Result<BTreeMap<usize, f64>> {
    let seen_specs: Vec<&TaskSpec> = seen.iter().map(|&t| &data.tasks[t]).collect();
    let mut out = BTreeMap::new();
    for &t in seen {
        let task = &data.tasks[t];
        let indices: Vec<usize> = data
            .test_shards
            .iter()
            .flat_map(|s| s.indices(t).iter().copied())
            .collect();
        if indices.is_empty() {
            return Err(FclError::workload(format!("task {t} has no held-out examples")));
        }
        let mask = make_window_mask(window, task, &seen_specs, params.num_classes())?;
        let batch = data.dataset.batch(&indices)?;
        let predicted = predict(params, &batch.inputs, &mask)?;
        let correct = predicted.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
        out.insert(t, correct as f64 / indices.len() as f64);
    }
    Ok(out)
}

/// The mean of the per-task accuracies.
pub fn average_accuracy(per_task: &BTreeMap<usize, f64>) -> f64 {
    if per_task.is_empty() {
        return 0.0;
    }
    per_task.values().sum::<f64>() / per_task.len() as f64
}

struct Trained {
    client: usize,
    params: Option<ModelParams>,
    num_samples: usize,
}

/// Runs every step of the schedule for `rounds_per_task` rounds each.
pub fn run_experiment(
    cfg: &FederationConfig,
    data: &ExperimentData,
    initial: &ModelParams,
) -> Result<ExperimentOutcome> {
    check_inputs(cfg, data, initial)?;
    let num_classes = initial.num_classes();
    let model_bytes = BYTES_PER_PARAM * initial.len() as u64;
    let mut global = initial.clone();
    let mut states = vec![ClientState::default(); cfg.num_clients];
    let mut records = Vec::new();
    let mut round_id = 0;
    let mut seen_union: BTreeSet<usize> = BTreeSet::new();

    for step in 0..data.schedule.num_steps() {
        seen_union.extend(data.schedule.column(step));
        let seen: Vec<usize> = seen_union.iter().copied().collect();

        // Per-client view of the step: the task, its training data and window.
        let client_ctx = (0..cfg.num_clients)
            .map(|c| {
                let task = &data.tasks[data.schedule.task(c, step)];
                let indices = data.train_shards[c].indices(task.task_id);
                if indices.is_empty() {
                    return Ok(None);
                }
                let own_seen: Vec<&TaskSpec> = data.schedule.row(c)[..=step]
                    .iter()
                    .map(|&t| &data.tasks[t])
                    .collect();
                let mask = make_window_mask(cfg.window, task, &own_seen, num_classes)?;
                Ok(Some((task, data.dataset.batch(indices)?, mask)))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut trained_this_step = BTreeSet::new();

        for _ in 0..cfg.rounds_per_task {
            let selected = select_clients(
                cfg.num_clients,
                cfg.clients_per_round,
                &mut selection_rng(cfg.seed, round_id),
            )?;

            let results: Vec<Result<Trained>> = selected
                .par_iter()
                .map(|&c| {
                    let Some((task, train, mask)) = &client_ctx[c] else {
                        return Ok(Trained {
                            client: c,
                            params: None,
                            num_samples: 0,
                        });
                    };
                    let mut rng = training_rng(cfg.seed, round_id, c);
                    let params = local_train(&global, train, task, mask, cfg, &states[c], &mut rng)
                        .map_err(|e| FclError::Round {
                            round: round_id,
                            client: c,
                            source: Box::new(e),
                        })?;
                    Ok(Trained {
                        client: c,
                        params: Some(params),
                        num_samples: train.len(),
                    })
                })
                .collect();

            let mut updates = Vec::with_capacity(selected.len());
            let mut skipped = Vec::new();
            for r in results {
                let t = r?;
                match t.params {
                    Some(p) => updates.push(ClientUpdate {
                        client_id: t.client,
                        params: p.values,
                        num_samples: t.num_samples,
                        sim_duration_s: 0.0,
                    }),
                    None => skipped.push(t.client),
                }
            }

            let participants: Vec<usize> = updates.iter().map(|u| u.client_id).collect();
            let work: BTreeMap<usize, f64> = updates
                .iter()
                .map(|u| (u.client_id, (u.num_samples * cfg.local_epochs) as f64))
                .collect();
            let (client_durations, federator_duration) =
                simulate_durations(&data.profiles, &participants, &work, model_bytes)?;
            for u in &mut updates {
                u.sim_duration_s = client_durations[&u.client_id];
            }

            if !updates.is_empty() {
                global = global.with_values(fedavg(&updates)?)?;
            }
            trained_this_step.extend(participants);

            let per_task = evaluate(&global, data, &seen, cfg.window)?;
            records.push(RoundRecord {
                round_id,
                step,
                selected,
                skipped,
                federator_duration_s: federator_duration,
                client_durations_s: client_durations,
                avg_accuracy: average_accuracy(&per_task),
                per_task_accuracy: per_task,
            });
            round_id += 1;
        }

        for &c in &trained_this_step {
            let Some((task, train, mask)) = &client_ctx[c] else {
                continue;
            };
            match cfg.strategy {
                ContinualStrategy::Naive => {}
                ContinualStrategy::Ewc { fisher_samples, .. } => {
                    let mut rng = stream(cfg.seed, Purpose::Fisher, pair(step as u64, c as u64));
                    let fisher = estimate_fisher(&global, train, mask, fisher_samples, &mut rng)?;
                    states[c].anchors.insert(
                        task.task_id,
                        EwcAnchor {
                            anchor_params: global.values.clone(),
                            fisher_diag: fisher,
                        },
                    );
                }
                ContinualStrategy::Gem {
                    memory_per_task, ..
                } => {
                    let mut rng = stream(cfg.seed, Purpose::Memory, pair(step as u64, c as u64));
                    update_memory(&mut states[c].memory, task, train, memory_per_task, &mut rng)?;
                }
            }
        }
    }

    Ok(ExperimentOutcome {
        records,
        final_params: global,
    })
}
