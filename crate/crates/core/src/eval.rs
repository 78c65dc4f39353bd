//! Accuracy reports, interpolation curves and the loss barrier.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::container::{Container, NamedTensor};
use crate::error::{Error, Result};
use crate::merger::interpolate;
use crate::model::{HeadSelect, ModelBundle};
use crate::par;
use crate::tensor::Matrix;

/// Number of evenly spaced interpolation points, endpoints included.
pub const BARRIER_POINTS: usize = 21;

/// Inputs (`samples × dim`) with one global label per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<u32>,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<u32>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::validation(format!(
                "dataset has {} inputs but {} labels",
                x.rows(),
                y.len()
            )));
        }
        x.ensure_finite("dataset inputs")?;
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Samples whose label is in `labels`, in their original order.
    pub fn filter_labels(&self, labels: &[u32]) -> Dataset {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| labels.contains(&self.y[i])).collect();
        self.select(&keep)
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        let mut data = Vec::with_capacity(rows.len() * self.x.cols());
        for &r in rows {
            data.extend_from_slice(self.x.row(r));
        }
        Dataset {
            x: Matrix::new(rows.len(), self.x.cols(), data).expect("row count matches"),
            y: rows.iter().map(|&r| self.y[r]).collect(),
        }
    }

    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        let mut y = self.y.clone();
        y.extend_from_slice(&other.y);
        Dataset::new(self.x.vstack(&other.x)?, y)
    }

    pub fn to_container(&self) -> Container {
        let labels: Vec<f64> = self.y.iter().map(|&l| f64::from(l)).collect();
        let mut metadata = serde_json::Map::new();
        metadata.insert("kind".into(), "dataset".into());
        Container {
            metadata,
            tensors: vec![
                NamedTensor::from_matrix("x", &self.x),
                NamedTensor::from_vec("y", &labels),
            ],
            ..Container::default()
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let x = c.tensor("x")?.to_matrix()?;
        let y = c
            .tensor("y")?
            .to_vec()
            .into_iter()
            .map(|v| {
                if v >= 0.0 && v.fract() == 0.0 && v <= f64::from(u32::MAX) {
                    Ok(v as u32)
                } else {
                    Err(Error::validation(format!("label {v} is not a class index")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(x, y)
    }
}

/// Which global labels belong to which task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskLabels {
    pub task: u32,
    pub labels: Vec<u32>,
}

/// How to treat a task the model has no head for.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadPolicy {
    /// Refuse with a missing-head error.
    #[default]
    Strict,
    /// Score every sample of that task as wrong.
    MissAsWrong,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub joint_acc: f64,
    pub per_task_acc: BTreeMap<u32, f64>,
    pub avg_acc: f64,
    pub samples: usize,
    pub per_task_samples: BTreeMap<u32, usize>,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:>8} {:>8}", "metric", "acc", "samples");
        let _ = writeln!(out, "{:<10} {:>8.4} {:>8}", "joint", self.joint_acc, self.samples);
        let _ = writeln!(out, "{:<10} {:>8.4} {:>8}", "avg", self.avg_acc, "");
        for (task, acc) in &self.per_task_acc {
            let n = self.per_task_samples.get(task).copied().unwrap_or(0);
            let _ = writeln!(out, "{:<10} {:>8.4} {:>8}", format!("task {task}"), acc, n);
        }
        out
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Joint accuracy over all heads plus per-task accuracy with each task's own
/// head on its own samples.
pub fn evaluate(
    model: &ModelBundle,
    data: &Dataset,
    tasks: &[TaskLabels],
    policy: HeadPolicy,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::validation("cannot evaluate on an empty dataset"));
    }
    for (i, &label) in data.y.iter().enumerate() {
        if !tasks.iter().any(|t| t.labels.contains(&label)) {
            return Err(Error::validation(format!(
                "sample {i} has label {label}, which no task covers"
            )));
        }
    }
    let hidden = model.hidden_states(&data.x)?;
    let last = hidden.last().expect("validated model has layers");
    let joint = model.apply_heads(last, HeadSelect::All)?;
    let joint_labels = model.joint_labels();
    let correct = (0..data.len())
        .filter(|&i| joint_labels[argmax(joint.row(i))] == data.y[i])
        .count();
    let mut per_task_acc = BTreeMap::new();
    let mut per_task_samples = BTreeMap::new();
    for t in tasks {
        let rows: Vec<usize> = (0..data.len()).filter(|&i| t.labels.contains(&data.y[i])).collect();
        per_task_samples.insert(t.task, rows.len());
        if rows.is_empty() {
            continue;
        }
        let acc = match model.head(t.task) {
            Ok(head) => {
                let logits = head.apply(last)?;
                let hits = rows
                    .iter()
                    .filter(|&&i| head.labels[argmax(logits.row(i))] == data.y[i])
                    .count();
                hits as f64 / rows.len() as f64
            }
            Err(e) => match policy {
                HeadPolicy::Strict => return Err(e),
                HeadPolicy::MissAsWrong => 0.0,
            },
        };
        per_task_acc.insert(t.task, acc);
    }
    let avg_acc = if per_task_acc.is_empty() {
        0.0
    } else {
        per_task_acc.values().sum::<f64>() / per_task_acc.len() as f64
    };
    Ok(EvalReport {
        joint_acc: correct as f64 / data.len() as f64,
        per_task_acc,
        avg_acc,
        samples: data.len(),
        per_task_samples,
    })
}

/// Mean softmax cross-entropy of the concatenated heads.
pub fn joint_loss(model: &ModelBundle, data: &Dataset) -> Result<f64> {
    let logits = model.forward(&data.x, HeadSelect::All)?;
    let labels = model.joint_labels();
    let mut total = 0.0;
    for (i, &y) in data.y.iter().enumerate() {
        let col = labels
            .iter()
            .position(|&l| l == y)
            .ok_or_else(|| Error::validation(format!("label {y} has no output column")))?;
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[col];
    }
    Ok(total / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarrierReport {
    pub lambdas: Vec<f64>,
    pub losses: Vec<f64>,
    /// Loss at `λ = 1`, i.e. model A.
    pub loss_a: f64,
    /// Loss at `λ = 0`, i.e. model B.
    pub loss_b: f64,
    pub barrier: f64,
}

impl BarrierReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,loss\n");
        for (l, v) in self.lambdas.iter().zip(&self.losses) {
            let _ = writeln!(out, "{l},{v}");
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:>7} {:>12}", "lambda", "loss");
        for (l, v) in self.lambdas.iter().zip(&self.losses) {
            let _ = writeln!(out, "{l:>7.2} {v:>12.6}");
        }
        let _ = writeln!(out, "barrier {:.6}", self.barrier);
        out
    }
}

/// The interpolation grid `0, 0.05, …, 1`.
pub fn barrier_grid() -> Vec<f64> {
    (0..BARRIER_POINTS)
        .map(|i| i as f64 / (BARRIER_POINTS - 1) as f64)
        .collect()
}

/// Highest loss along the straight line between two models minus the mean of
/// the endpoint losses.
pub fn loss_barrier(a: &ModelBundle, b: &ModelBundle, data: &Dataset) -> Result<BarrierReport> {
    if !a.same_architecture(b) {
        return Err(Error::validation(
            "loss barrier needs models with identical architectures",
        ));
    }
    let lambdas = barrier_grid();
    let losses = par::map_slice(&lambdas, |&l| joint_loss(&interpolate(a, b, l)?, data))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let loss_a = losses[BARRIER_POINTS - 1];
    let loss_b = losses[0];
    let max = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(BarrierReport {
        barrier: max - 0.5 * (loss_a + loss_b),
        lambdas,
        losses,
        loss_a,
        loss_b,
    })
}
