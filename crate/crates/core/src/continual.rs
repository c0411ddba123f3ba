//! Continual-learning strategies and output-window masks.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FclError, Result};
use crate::model::{loss_and_grad, Batch, ClassMask, ModelParams};
use crate::workload::TaskSpec;

/// Sweep cap for the GEM dual solver.
pub const GEM_MAX_SWEEPS: usize = 1_000;
/// Stationarity tolerance for the GEM dual solver.
pub const GEM_TOLERANCE: f64 = 1e-9;
/// Largest constraint violation accepted from coordinate ascent.
pub const GEM_FEASIBILITY: f64 = 1e-7;

/// Which output classes are live while training or evaluating a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowMode {
    /// Only the current task's classes (Task-IL).
    Sliding,
    /// Every class of every task seen so far (Domain-IL).
    Expanding,
    /// All classes, as in plain federated learning.
    Full,
}

impl WindowMode {
    pub fn name(self) -> &'static str {
        match self {
            WindowMode::Sliding => "sliding",
            WindowMode::Expanding => "expanding",
            WindowMode::Full => "full",
        }
    }
}

pub fn make_window_mask(
    mode: WindowMode,
    current: &TaskSpec,
    tasks_seen: &[&TaskSpec],
    num_classes: usize,
) -> Result<ClassMask> {
    match mode {
        WindowMode::Full => Ok(ClassMask::all(num_classes)),
        WindowMode::Sliding => ClassMask::from_classes(num_classes, current.class_ids.iter().copied()),
        WindowMode::Expanding => {
            if tasks_seen.is_empty() {
                return Err(FclError::config("expanding window needs at least one seen task"));
            }
            ClassMask::from_classes(
                num_classes,
                tasks_seen.iter().flat_map(|t| t.class_ids.iter().copied()),
            )
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ContinualStrategy {
    Naive,
    Ewc { lambda: f64, fisher_samples: usize },
    Gem { memory_per_task: usize, margin: f64 },
}

impl ContinualStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            ContinualStrategy::Naive => "naive",
            ContinualStrategy::Ewc { .. } => "ewc",
            ContinualStrategy::Gem { .. } => "gem",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ContinualStrategy::Naive => Ok(()),
            ContinualStrategy::Ewc {
                lambda,
                fisher_samples,
            } => {
                if !(lambda >= 0.0 && lambda.is_finite()) {
                    return Err(FclError::config("ewc lambda must be finite and >= 0"));
                }
                if fisher_samples == 0 {
                    return Err(FclError::config("ewc fisher_samples must be positive"));
                }
                Ok(())
            }
            ContinualStrategy::Gem {
                memory_per_task,
                margin,
            } => {
                if memory_per_task == 0 {
                    return Err(FclError::config("gem memory_per_task must be positive"));
                }
                if !(margin >= 0.0 && margin.is_finite()) {
                    return Err(FclError::config("gem margin must be finite and >= 0"));
                }
                Ok(())
            }
        }
    }
}

/// Post-task parameter snapshot with its diagonal Fisher weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EwcAnchor {
    pub anchor_params: Vec<f64>,
    pub fisher_diag: Vec<f64>,
}

/// Empirical diagonal Fisher: mean of squared per-example gradients of the
/// masked log-likelihood at the observed labels.
///
/// Draws `min(fisher_samples, |data|)` examples without replacement and
/// accumulates them in ascending index order.
pub fn estimate_fisher<R: Rng>(
    params: &ModelParams,
    data: &Batch,
    mask: &ClassMask,
    fisher_samples: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(FclError::workload("cannot estimate Fisher information on empty data"));
    }
    let take = fisher_samples.min(data.len()).max(1);
    let mut picked = index::sample(rng, data.len(), take).into_vec();
    picked.sort_unstable();

    let mut fisher = vec![0.0; params.len()];
    for &i in &picked {
        let (_, grad) = loss_and_grad(params, &data.select(&[i])?, mask)?;
        for (f, g) in fisher.iter_mut().zip(&grad) {
            *f += g * g;
        }
    }
    let n = picked.len() as f64;
    for f in &mut fisher {
        *f /= n;
    }
    Ok(fisher)
}

/// `lambda * sum_k F_k * (theta - theta*_k)`, elementwise.
pub fn ewc_penalty_grad(params: &[f64], anchors: &[EwcAnchor], lambda: f64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; params.len()];
    for anchor in anchors {
        if anchor.anchor_params.len() != params.len() || anchor.fisher_diag.len() != params.len() {
            return Err(FclError::config("EWC anchor length does not match the model"));
        }
        for (((o, &theta), &star), &f) in out
            .iter_mut()
            .zip(params)
            .zip(&anchor.anchor_params)
            .zip(&anchor.fisher_diag)
        {
            *o += f * (theta - star);
        }
    }
    for o in &mut out {
        *o *= lambda;
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Projects `grad` onto `{g : <g, g_k> >= 0 for every memory gradient g_k}`.
///
/// Returns `grad` untouched when no constraint is violated. Otherwise solves
/// the dual `min_v 1/2 v'GG'v + (Gg)'v, v >= margin` by projected coordinate
/// descent and returns `g + G'v`. A zero `margin` gives the exact Euclidean
/// projection; a positive one biases the result further into the cone.
pub fn gem_project(grad: &[f64], memory_grads: &[Vec<f64>], margin: f64) -> Result<Vec<f64>> {
    if grad.iter().chain(memory_grads.iter().flatten()).any(|v| !v.is_finite()) {
        return Err(FclError::numeric("non-finite input to GEM projection"));
    }
    if memory_grads.iter().any(|m| m.len() != grad.len()) {
        return Err(FclError::config("memory gradient length does not match the model"));
    }
    let q: Vec<f64> = memory_grads.iter().map(|m| dot(m, grad)).collect();
    if q.iter().all(|&c| c >= 0.0) {
        return Ok(grad.to_vec());
    }

    let k = memory_grads.len();
    let gram: Vec<Vec<f64>> = memory_grads
        .iter()
        .map(|a| memory_grads.iter().map(|b| dot(a, b)).collect())
        .collect();
    let mut v = vec![margin; k];
    // Gradient of the dual objective, kept up to date incrementally.
    let mut r: Vec<f64> = (0..k)
        .map(|i| q[i] + (0..k).map(|j| gram[i][j] * v[j]).sum::<f64>())
        .collect();

    let mut converged = false;
    for _ in 0..GEM_MAX_SWEEPS {
        let mut largest_step = 0.0f64;
        for i in 0..k {
            if gram[i][i] <= 0.0 {
                continue;
            }
            let next = (v[i] - r[i] / gram[i][i]).max(margin);
            let step = next - v[i];
            if step != 0.0 {
                v[i] = next;
                for (j, rj) in r.iter_mut().enumerate() {
                    *rj += gram[j][i] * step;
                }
                largest_step = largest_step.max(step.abs() * gram[i][i].sqrt());
            }
        }
        if largest_step < GEM_TOLERANCE {
            converged = true;
            break;
        }
    }

    let combine = |v: &[f64]| {
        let mut out = grad.to_vec();
        for (m, &vi) in memory_grads.iter().zip(v) {
            if vi != 0.0 {
                for (o, &mj) in out.iter_mut().zip(m) {
                    *o += vi * mj;
                }
            }
        }
        out
    };
    let out = combine(&v);
    if converged && memory_grads.iter().all(|m| dot(m, &out) >= -GEM_FEASIBILITY) {
        return Ok(out);
    }
    // Coordinate ascent stalls on ill-conditioned or linearly dependent
    // memory gradients; finish with an exact active-set solve of the same dual.
    let shift: Vec<f64> = (0..k).map(|i| q[i] + margin * gram[i].iter().sum::<f64>()).collect();
    let u = nnls_normal(&gram, &shift);
    let v: Vec<f64> = u.iter().map(|ui| ui + margin).collect();
    Ok(combine(&v))
}

/// Lawson-Hanson active set for `min 1/2 u'Hu + c'u, u >= 0` with `H` a Gram matrix.
fn nnls_normal(h: &[Vec<f64>], c: &[f64]) -> Vec<f64> {
    let k = c.len();
    let scale = h.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    let tol = 1e-12 * scale;
    let mut u = vec![0.0; k];
    let mut passive = vec![false; k];
    let neg_grad = |u: &[f64]| -> Vec<f64> {
        (0..k).map(|i| -c[i] - (0..k).map(|j| h[i][j] * u[j]).sum::<f64>()).collect()
    };
    for _ in 0..3 * k + 3 {
        let w = neg_grad(&u);
        let Some(j) = (0..k)
            .filter(|&i| !passive[i] && w[i] > tol)
            .max_by(|&a, &b| w[a].total_cmp(&w[b]))
        else {
            break;
        };
        passive[j] = true;
        loop {
            let set: Vec<usize> = (0..k).filter(|&i| passive[i]).collect();
            let sub: Vec<Vec<f64>> = set.iter().map(|&a| set.iter().map(|&b| h[a][b]).collect()).collect();
            let rhs: Vec<f64> = set.iter().map(|&a| -c[a]).collect();
            let Some(sol) = solve_dense(sub, rhs, tol) else {
                passive[j] = false;
                return u;
            };
            let mut s = vec![0.0; k];
            for (&i, &x) in set.iter().zip(&sol) {
                s[i] = x;
            }
            if set.iter().all(|&i| s[i] > 0.0) {
                u = s;
                break;
            }
            let alpha = set
                .iter()
                .filter(|&&i| s[i] <= 0.0)
                .map(|&i| u[i] / (u[i] - s[i]))
                .fold(f64::INFINITY, f64::min);
            for i in 0..k {
                u[i] += alpha * (s[i] - u[i]);
                if passive[i] && u[i] <= tol {
                    u[i] = 0.0;
                    passive[i] = false;
                }
            }
        }
    }
    u
}

/// Gaussian elimination with partial pivoting; `None` for a (near) singular system.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>, tol: f64) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let p = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[p][col].abs() <= tol {
            return None;
        }
        a.swap(col, p);
        b.swap(col, p);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            let (top, rest) = a.split_at_mut(r);
            for (x, p) in rest[0][col..].iter_mut().zip(&top[col][col..]) {
                *x -= f * p;
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// Stored examples of past tasks, one batch per task.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodicMemory {
    pub per_task: BTreeMap<usize, Batch>,
}

impl EpisodicMemory {
    pub fn is_empty(&self) -> bool {
        self.per_task.is_empty()
    }
}

/// Stores up to `memory_per_task` examples of `task_data` under `task`,
/// picked by reservoir sampling.
pub fn update_memory<R: Rng>(
    memory: &mut EpisodicMemory,
    task: &TaskSpec,
    task_data: &Batch,
    memory_per_task: usize,
    rng: &mut R,
) -> Result<()> {
    if let Some(&bad) = task_data.labels.iter().find(|&&y| !task.contains(y)) {
        return Err(FclError::workload(format!(
            "label {bad} does not belong to task {}",
            task.task_id
        )));
    }
    let cap = memory_per_task.max(1);
    let mut reservoir: Vec<usize> = Vec::with_capacity(cap);
    for i in 0..task_data.len() {
        if reservoir.len() < cap {
            reservoir.push(i);
        } else {
            let j = rng.random_range(0..=i);
            if j < cap {
                reservoir[j] = i;
            }
        }
    }
    memory.per_task.insert(task.task_id, task_data.select(&reservoir)?);
    Ok(())
}
