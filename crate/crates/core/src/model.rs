//! A small dense classifier with exact gradients.
//!
//! Parameters live in one flat `Vec<f64>`. Each layer contributes a row-major
//! weight block of shape `(out, in)` followed by a bias block of length `out`.
//! Hidden layers use ReLU; the last layer produces raw logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FclError, Result};

/// Value written over inactive logits before the softmax.
pub const MASKED_LOGIT: f64 = -1e9;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(FclError::config(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(FclError::config("ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Matrix::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// New matrix made of the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Shape of one parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamShape {
    Weight { rows: usize, cols: usize },
    Bias { len: usize },
}

impl ParamShape {
    pub fn len(&self) -> usize {
        match *self {
            ParamShape::Weight { rows, cols } => rows * cols,
            ParamShape::Bias { len } => len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub values: Vec<f64>,
    shapes: Vec<ParamShape>,
    input_dim: usize,
    num_classes: usize,
}

impl ModelParams {
    /// All-zero parameters for an MLP with the given hidden widths.
    pub fn zeros(input_dim: usize, hidden: &[usize], num_classes: usize) -> Result<Self> {
        let shapes = mlp_shapes(input_dim, hidden, num_classes)?;
        let n = shapes.iter().map(ParamShape::len).sum();
        Ok(ModelParams {
            values: vec![0.0; n],
            shapes,
            input_dim,
            num_classes,
        })
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init<R: Rng>(
        input_dim: usize,
        hidden: &[usize],
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut params = ModelParams::zeros(input_dim, hidden, num_classes)?;
        let mut offset = 0;
        for shape in &params.shapes {
            if let ParamShape::Weight { rows, cols } = *shape {
                let limit = (6.0 / (rows + cols) as f64).sqrt();
                for v in &mut params.values[offset..offset + rows * cols] {
                    *v = rng.random_range(-limit..=limit);
                }
            }
            offset += shape.len();
        }
        Ok(params)
    }

    /// Wraps an existing value vector, checking it against the layer layout.
    pub fn from_values(
        input_dim: usize,
        hidden: &[usize],
        num_classes: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        let mut params = ModelParams::zeros(input_dim, hidden, num_classes)?;
        if values.len() != params.values.len() {
            return Err(FclError::config(format!(
                "parameter vector has {} entries, layout needs {}",
                values.len(),
                params.values.len()
            )));
        }
        params.values = values;
        Ok(params)
    }

    /// Same layout, different values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(FclError::config(format!(
                "parameter vector has {} entries, layout needs {}",
                values.len(),
                self.values.len()
            )));
        }
        Ok(ModelParams {
            values,
            shapes: self.shapes.clone(),
            input_dim: self.input_dim,
            num_classes: self.num_classes,
        })
    }

    pub fn shapes(&self) -> &[ParamShape] {
        &self.shapes
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `(fan_in, fan_out, weight_offset, bias_offset)` per layer.
    fn layers(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut out = Vec::with_capacity(self.shapes.len() / 2);
        let mut offset = 0;
        for pair in self.shapes.chunks(2) {
            if let [ParamShape::Weight { rows, cols }, ParamShape::Bias { .. }] = *pair {
                out.push((cols, rows, offset, offset + rows * cols));
                offset += rows * cols + rows;
            }
        }
        out
    }
}

fn mlp_shapes(input_dim: usize, hidden: &[usize], num_classes: usize) -> Result<Vec<ParamShape>> {
    if input_dim == 0 || num_classes == 0 || hidden.contains(&0) {
        return Err(FclError::config("layer widths must be positive"));
    }
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(input_dim);
    dims.extend_from_slice(hidden);
    dims.push(num_classes);
    Ok(dims
        .windows(2)
        .flat_map(|w| {
            [
                ParamShape::Weight {
                    rows: w[1],
                    cols: w[0],
                },
                ParamShape::Bias { len: w[1] },
            ]
        })
        .collect())
}

/// Inputs with their class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(FclError::config(format!(
                "batch has {} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(FclError::config("batch must not be empty"));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Result<Batch> {
        Batch::new(
            self.inputs.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// The set of output classes the softmax may assign mass to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassMask {
    active: Vec<bool>,
}

impl ClassMask {
    pub fn new(active: Vec<bool>) -> Result<Self> {
        if !active.iter().any(|&a| a) {
            return Err(FclError::config("class mask has no active class"));
        }
        Ok(ClassMask { active })
    }

    pub fn all(num_classes: usize) -> Self {
        ClassMask {
            active: vec![true; num_classes],
        }
    }

    pub fn from_classes(
        num_classes: usize,
        classes: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        let mut active = vec![false; num_classes];
        for c in classes {
            *active.get_mut(c).ok_or_else(|| {
                FclError::config(format!("class {c} out of range for {num_classes} classes"))
            })? = true;
        }
        ClassMask::new(active)
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn is_active(&self, class: usize) -> bool {
        self.active.get(class).copied().unwrap_or(false)
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.active
    }
}

fn check_input(params: &ModelParams, inputs: &Matrix) -> Result<()> {
    if inputs.cols() != params.input_dim {
        return Err(FclError::config(format!(
            "input has {} columns, model expects {}",
            inputs.cols(),
            params.input_dim
        )));
    }
    Ok(())
}

/// Pre-activations of every layer for one example.
fn forward_example(params: &ModelParams, x: &[f64]) -> Vec<Vec<f64>> {
    let layers = params.layers();
    let last = layers.len() - 1;
    let mut pre = Vec::with_capacity(layers.len());
    let mut act: Vec<f64> = x.to_vec();
    for (l, &(fan_in, fan_out, w_off, b_off)) in layers.iter().enumerate() {
        let w = &params.values[w_off..w_off + fan_in * fan_out];
        let b = &params.values[b_off..b_off + fan_out];
        let z: Vec<f64> = (0..fan_out)
            .map(|o| {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                row.iter().zip(&act).fold(b[o], |acc, (wi, ai)| acc + wi * ai)
            })
            .collect();
        if l != last {
            act = z.iter().map(|&v| v.max(0.0)).collect();
        }
        pre.push(z);
    }
    pre
}

/// Logits for every input row.
pub fn forward(params: &ModelParams, inputs: &Matrix) -> Result<Matrix> {
    check_input(params, inputs)?;
    let mut data = Vec::with_capacity(inputs.rows() * params.num_classes);
    for i in 0..inputs.rows() {
        let mut pre = forward_example(params, inputs.row(i));
        data.extend(pre.pop().expect("at least one layer"));
    }
    let out = Matrix::new(inputs.rows(), params.num_classes, data)?;
    if out.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(FclError::numeric("non-finite logits"));
    }
    Ok(out)
}

/// Softmax over the logits with inactive classes pinned to [`MASKED_LOGIT`].
pub fn masked_softmax(logits: &[f64], mask: &ClassMask) -> Vec<f64> {
    let masked = apply_mask(logits, Some(mask));
    let max = masked.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = masked.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn apply_mask(logits: &[f64], mask: Option<&ClassMask>) -> Vec<f64> {
    match mask {
        None => logits.to_vec(),
        Some(mask) => logits
            .iter()
            .zip(mask.as_slice())
            .map(|(&z, &on)| if on { z } else { MASKED_LOGIT })
            .collect(),
    }
}

/// Mean masked softmax cross-entropy and its gradient.
pub fn loss_and_grad(
    params: &ModelParams,
    batch: &Batch,
    mask: &ClassMask,
) -> Result<(f64, Vec<f64>)> {
    if mask.len() != params.num_classes {
        return Err(FclError::config(format!(
            "mask covers {} classes, model has {}",
            mask.len(),
            params.num_classes
        )));
    }
    if let Some(&bad) = batch.labels.iter().find(|&&y| !mask.is_active(y)) {
        return Err(FclError::workload(format!(
            "label {bad} is not active in the training window"
        )));
    }
    cross_entropy(params, batch, Some(mask))
}

/// Cross-entropy over all classes with no masking step at all.
pub fn unmasked_loss_and_grad(params: &ModelParams, batch: &Batch) -> Result<(f64, Vec<f64>)> {
    cross_entropy(params, batch, None)
}

fn cross_entropy(
    params: &ModelParams,
    batch: &Batch,
    mask: Option<&ClassMask>,
) -> Result<(f64, Vec<f64>)> {
    check_input(params, &batch.inputs)?;
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= params.num_classes) {
        return Err(FclError::workload(format!(
            "label {bad} out of range for {} classes",
            params.num_classes
        )));
    }
    let layers = params.layers();
    let mut grad = vec![0.0; params.values.len()];
    let mut total_loss = 0.0;

    for (i, &label) in batch.labels.iter().enumerate() {
        let x = batch.inputs.row(i);
        let pre = forward_example(params, x);
        let logits = apply_mask(pre.last().expect("at least one layer"), mask);

        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        total_loss += max + sum.ln() - logits[label];

        // dL/dz for the output layer; masked entries are constants.
        let mut delta: Vec<f64> = exps
            .iter()
            .enumerate()
            .map(|(j, &e)| {
                if mask.is_some_and(|m| !m.is_active(j)) {
                    0.0
                } else {
                    e / sum - if j == label { 1.0 } else { 0.0 }
                }
            })
            .collect();

        for l in (0..layers.len()).rev() {
            let (fan_in, fan_out, w_off, b_off) = layers[l];
            let input: Vec<f64> = if l == 0 {
                x.to_vec()
            } else {
                pre[l - 1].iter().map(|&v| v.max(0.0)).collect()
            };
            for o in 0..fan_out {
                let d = delta[o];
                grad[b_off + o] += d;
                let row = &mut grad[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                for (g, &a) in row.iter_mut().zip(&input) {
                    *g += d * a;
                }
            }
            if l > 0 {
                let w = &params.values[w_off..w_off + fan_in * fan_out];
                delta = (0..fan_in)
                    .map(|k| {
                        if pre[l - 1][k] > 0.0 {
                            (0..fan_out).fold(0.0, |acc, o| acc + w[o * fan_in + k] * delta[o])
                        } else {
                            0.0
                        }
                    })
                    .collect();
            }
        }
    }

    let n = batch.len() as f64;
    let loss = total_loss / n;
    for g in &mut grad {
        *g /= n;
    }
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(FclError::numeric("non-finite loss or gradient"));
    }
    Ok((loss, grad))
}

/// Index of the largest active logit per row; ties go to the lowest index.
pub fn predict(params: &ModelParams, inputs: &Matrix, mask: &ClassMask) -> Result<Vec<usize>> {
    let logits = forward(params, inputs)?;
    Ok((0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = None;
            for (j, &z) in row.iter().enumerate() {
                if !mask.is_active(j) {
                    continue;
                }
                match best {
                    Some((_, bz)) if z <= bz => {}
                    _ => best = Some((j, z)),
                }
            }
            best.map_or(0, |(j, _)| j)
        })
        .collect())
}

/// `values - lr * grad`.
pub fn sgd_step(params: &ModelParams, grad: &[f64], lr: f64) -> Result<ModelParams> {
    let mut next = params.clone();
    sgd_step_in_place(&mut next, grad, lr)?;
    Ok(next)
}

pub fn sgd_step_in_place(params: &mut ModelParams, grad: &[f64], lr: f64) -> Result<()> {
    if grad.len() != params.values.len() {
        return Err(FclError::config(format!(
            "gradient has {} entries, model has {}",
            grad.len(),
            params.values.len()
        )));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(FclError::config(format!("learning rate must be positive, got {lr}")));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(FclError::numeric("non-finite gradient entry"));
    }
    for (v, g) in params.values.iter_mut().zip(grad) {
        *v -= lr * g;
    }
    Ok(())
}
