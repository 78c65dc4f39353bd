//! Synthetic Gaussian-mixture tasks and a small deterministic SGD trainer.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::eval::{Dataset, TaskLabels};
use crate::model::{Activation, Head, Layer, LayerKind, LayerSpec, ModelBundle};
use crate::probe::CalibrationBatch;
use crate::tensor::{matmul, matmul_bt, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    /// Classes in each task; task `t` owns the next `classes[t]` global labels.
    pub classes: Vec<usize>,
    pub input_dim: usize,
    /// Gaussian blobs making up each class.
    pub clusters_per_class: usize,
    /// Typical distance of a blob centre from the origin, in noise units.
    pub separation: f64,
    pub samples_per_class: usize,
    /// Fraction of each class held out for testing.
    pub test_fraction: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            classes: vec![5, 5],
            input_dim: 16,
            clusters_per_class: 2,
            separation: 4.0,
            samples_per_class: 600,
            test_fraction: 1.0 / 3.0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.classes.contains(&0) {
            return Err(Error::validation("every task needs at least one class"));
        }
        if self.input_dim == 0 || self.clusters_per_class == 0 {
            return Err(Error::validation("input_dim and clusters_per_class must be positive"));
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return Err(Error::validation("separation must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::validation("test_fraction must lie in [0, 1)"));
        }
        if self.samples_per_class < 2 {
            return Err(Error::validation("need at least 2 samples per class"));
        }
        Ok(())
    }

    /// Label ranges per task.
    pub fn partition(&self) -> Vec<TaskLabels> {
        let mut next = 0u32;
        self.classes
            .iter()
            .enumerate()
            .map(|(t, &n)| {
                let labels = (next..next + n as u32).collect();
                next += n as u32;
                TaskLabels { task: t as u32, labels }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSplit {
    pub task: TaskLabels,
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub tasks: Vec<TaskSplit>,
    pub joint_train: Dataset,
    pub joint_test: Dataset,
}

impl TaskData {
    pub fn partition(&self) -> Vec<TaskLabels> {
        self.tasks.iter().map(|t| t.task.clone()).collect()
    }
}

/// Draws every class as a mixture of Gaussian blobs in a shared input space.
pub fn gen_tasks(spec: &TaskSpec, seed: u64) -> Result<TaskData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.input_dim;
    let scale = spec.separation / (d as f64).sqrt();
    let n_test = ((spec.samples_per_class as f64) * spec.test_fraction).round() as usize;
    let n_train = spec.samples_per_class - n_test;
    let mut splits = Vec::new();
    for task in spec.partition() {
        let (mut tr_x, mut tr_y, mut te_x, mut te_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for &label in &task.labels {
            let blobs: Vec<(Vec<f64>, Vec<f64>)> = (0..spec.clusters_per_class)
                .map(|_| {
                    let mean = (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
                    let std = (0..d).map(|_| rng.random_range(0.6..1.2)).collect();
                    (mean, std)
                })
                .collect();
            for s in 0..spec.samples_per_class {
                let (mean, std) = &blobs[rng.random_range(0..blobs.len())];
                let (xs, ys) = if s < n_train {
                    (&mut tr_x, &mut tr_y)
                } else {
                    (&mut te_x, &mut te_y)
                };
                for j in 0..d {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    xs.push(mean[j] + std[j] * z);
                }
                ys.push(label);
            }
        }
        let train = Dataset::new(Matrix::new(tr_y.len(), d, tr_x)?, tr_y)?;
        let test = Dataset::new(Matrix::new(te_y.len(), d, te_x)?, te_y)?;
        splits.push(TaskSplit { task, train, test });
    }
    let mut joint_train = splits[0].train.clone();
    let mut joint_test = splits[0].test.clone();
    for s in &splits[1..] {
        joint_train = joint_train.concat(&s.train)?;
        joint_test = joint_test.concat(&s.test)?;
    }
    Ok(TaskData {
        tasks: splits,
        joint_train,
        joint_test,
    })
}

/// A seeded random subset of `data` (without replacement) for probing.
pub fn calibration_batch(data: &Dataset, size: usize, seed: u64) -> Result<CalibrationBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(size.min(data.len()));
    let picked = data.select(&idx);
    CalibrationBatch::new(picked.x, Some(picked.y), seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 12,
            lr: 0.05,
            batch_size: 64,
            momentum: 0.9,
        }
    }
}

/// `n` equally wide hidden layers after an input projection, all ReLU. With
/// `residual` every layer after the first is a residual block.
pub fn mlp_arch(input_dim: usize, width: usize, depth: usize, residual: bool) -> Vec<LayerSpec> {
    (0..depth)
        .map(|i| {
            if i == 0 {
                LayerSpec::dense(input_dim, width, Activation::Relu)
            } else if residual {
                LayerSpec::residual(width, Activation::Relu)
            } else {
                LayerSpec::dense(width, width, Activation::Relu)
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelBundle,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

fn init_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        if bound > 0.0 {
            rng.random_range(-bound..bound)
        } else {
            0.0
        }
    })
}

/// Parameters in a flat, index-stable layout for the optimizer.
struct Params {
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
}

impl Params {
    fn zeros_like(&self) -> Self {
        Self {
            weights: self.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }
}

fn softmax_ce_grad(logits: &Matrix, targets: &[usize]) -> (f64, Matrix) {
    let n = logits.rows();
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = grad.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        loss += sum.ln() - (logits.get(r, t) - max);
        for v in row.iter_mut() {
            *v /= sum * n as f64;
        }
        row[t] -= 1.0 / n as f64;
    }
    (loss / n as f64, grad)
}

fn forward_cache(specs: &[LayerSpec], p: &Params, x: &Matrix) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    // inputs[k] feeds layer k; pre[k] is its pre-activation
    let mut inputs = vec![x.clone()];
    let mut pre = Vec::with_capacity(specs.len());
    for (k, spec) in specs.iter().enumerate() {
        let input = &inputs[k];
        let mut z = matmul_bt(input, &p.weights[k])?;
        for r in 0..z.rows() {
            let xr = input.row(r);
            for (c, v) in z.row_mut(r).iter_mut().enumerate() {
                *v += p.biases[k][c];
                if spec.kind == LayerKind::ResidualDense {
                    *v += xr[c];
                }
            }
        }
        let mut h = z.clone();
        for r in 0..h.rows() {
            for v in h.row_mut(r) {
                *v = spec.activation.apply(*v);
            }
        }
        pre.push(z);
        inputs.push(h);
    }
    Ok((inputs, pre))
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

/// Loss and gradients for one minibatch. The head is the last parameter slot.
fn backprop(specs: &[LayerSpec], p: &Params, x: &Matrix, targets: &[usize]) -> Result<(f64, Params)> {
    let depth = specs.len();
    let (inputs, pre) = forward_cache(specs, p, x)?;
    let hidden = &inputs[depth];
    let mut logits = matmul_bt(hidden, &p.weights[depth])?;
    for r in 0..logits.rows() {
        for (v, b) in logits.row_mut(r).iter_mut().zip(&p.biases[depth]) {
            *v += b;
        }
    }
    let (loss, dlogits) = softmax_ce_grad(&logits, targets);
    let mut grads = p.zeros_like();
    grads.weights[depth] = matmul(&dlogits.transpose(), hidden)?;
    grads.biases[depth] = column_sums(&dlogits);
    let mut dh = matmul(&dlogits, &p.weights[depth])?;
    for k in (0..depth).rev() {
        let mut dz = dh;
        if specs[k].activation == Activation::Relu {
            for r in 0..dz.rows() {
                let zr = pre[k].row(r).to_vec();
                for (g, z) in dz.row_mut(r).iter_mut().zip(zr) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
        }
        grads.weights[k] = matmul(&dz.transpose(), &inputs[k])?;
        grads.biases[k] = column_sums(&dz);
        let mut dx = matmul(&dz, &p.weights[k])?;
        if specs[k].kind == LayerKind::ResidualDense {
            dx = dx.add(&dz)?;
        }
        dh = dx;
    }
    Ok((loss, grads))
}

/// Minibatch SGD with momentum on softmax cross-entropy. `labels` lists the
/// global labels the single head predicts, in column order.
pub fn train_mlp(
    arch: &[LayerSpec],
    task: u32,
    labels: &[u32],
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if arch.is_empty() {
        return Err(Error::validation("architecture has no layers"));
    }
    if arch[0].in_dim != data.x.cols() {
        return Err(Error::validation(format!(
            "first layer reads {} features, data has {}",
            arch[0].in_dim,
            data.x.cols()
        )));
    }
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(Error::validation("training needs data and a positive batch size"));
    }
    let targets = data
        .y
        .iter()
        .map(|y| {
            labels
                .iter()
                .position(|l| l == y)
                .ok_or_else(|| Error::validation(format!("label {y} is not predicted by the head")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = Params {
        weights: Vec::new(),
        biases: Vec::new(),
    };
    for spec in arch {
        spec.validate()?;
        let mut bound = (6.0 / spec.in_dim as f64).sqrt();
        if spec.kind == LayerKind::ResidualDense {
            bound *= 0.25;
        }
        params.weights.push(init_matrix(&mut rng, spec.out_dim, spec.in_dim, bound));
        params.biases.push(vec![0.0; spec.out_dim]);
    }
    let hidden = arch.last().expect("non-empty").out_dim;
    params
        .weights
        .push(init_matrix(&mut rng, labels.len(), hidden, (3.0 / hidden as f64).sqrt()));
    params.biases.push(vec![0.0; labels.len()]);

    let mut velocity = params.zeros_like();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = data.select(chunk);
            let t: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            let (loss, grads) = backprop(arch, &params, &batch.x, &t)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "loss became {loss} at epoch {epoch}, batch {b} (lr {})",
                    cfg.lr
                )));
            }
            total += loss * chunk.len() as f64;
            for (k, g) in grads.weights.iter().enumerate() {
                let v = velocity.weights[k].lerp(g, cfg.momentum, 1.0)?;
                params.weights[k] = params.weights[k].lerp(&v, 1.0, -cfg.lr)?;
                velocity.weights[k] = v;
            }
            for (k, g) in grads.biases.iter().enumerate() {
                for ((p, v), g) in params.biases[k].iter_mut().zip(&mut velocity.biases[k]).zip(g) {
                    *v = cfg.momentum * *v + g;
                    *p -= cfg.lr * *v;
                }
            }
        }
        epoch_losses.push(total / data.len() as f64);
    }

    let head_w = params.weights.pop().expect("head weights");
    let head_b = params.biases.pop().expect("head bias");
    let layers = arch
        .iter()
        .zip(params.weights.into_iter().zip(params.biases))
        .map(|(spec, (w, b))| Layer::new(*spec, w, b))
        .collect::<Result<Vec<_>>>()?;
    let head = Head {
        task,
        labels: labels.to_vec(),
        weight: head_w,
        bias: head_b,
    };
    let mut metadata = Map::new();
    metadata.insert("trainer".into(), Value::from("sgd-momentum"));
    metadata.insert("train_config".into(), serde_json::to_value(cfg)?);
    metadata.insert("task".into(), Value::from(task));
    let model = ModelBundle::new(layers, vec![head], metadata)?;
    Ok(TrainOutcome {
        model,
        epoch_losses,
    })
}
