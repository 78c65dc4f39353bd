//! Representation similarity: linear CKA between whole layers and Pearson
//! correlation between individual neurons.
//!
//! Feature matrices are `neurons × samples` throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::probe::FeatureCache;
use crate::tensor::{matmul_bt, Matrix};

/// Subtracts each row's mean.
pub fn center_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    let m = x.cols() as f64;
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / m;
        for v in row.iter_mut() {
            *v -= mean;
        }
    }
    out
}

/// A layer's centered features with the Frobenius norm of their Gram matrix.
struct Centered {
    features: Matrix,
    gram_norm: f64,
}

impl Centered {
    fn new(x: &Matrix) -> Result<Self> {
        let features = center_rows(x);
        let gram = matmul_bt(&features, &features)?;
        Ok(Self {
            gram_norm: gram.frobenius_sq().sqrt(),
            features,
        })
    }
}

fn cka_centered(x: &Centered, y: &Centered) -> Result<f64> {
    if x.gram_norm == 0.0 || y.gram_norm == 0.0 {
        return Ok(0.0);
    }
    let cross = matmul_bt(&y.features, &x.features)?;
    let v = cross.frobenius_sq() / (x.gram_norm * y.gram_norm);
    Ok(v.clamp(0.0, 1.0))
}

fn check_samples(x: &Matrix, y: &Matrix) -> Result<()> {
    if x.cols() != y.cols() {
        return Err(Error::validation(format!(
            "sample counts differ: {} vs {}",
            x.cols(),
            y.cols()
        )));
    }
    if x.cols() < 2 {
        return Err(Error::validation("similarity needs at least 2 samples"));
    }
    Ok(())
}

/// Linear CKA between two feature matrices sharing a sample axis. Returns 0
/// when either side has no variance.
pub fn linear_cka(x: &Matrix, y: &Matrix) -> Result<f64> {
    check_samples(x, y)?;
    cka_centered(&Centered::new(x)?, &Centered::new(y)?)
}

/// `values[i][j]` is the CKA between layer `i` of model A and layer `j` of
/// model B.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSimMatrix {
    pub values: Matrix,
    pub row_model: String,
    pub col_model: String,
}

impl LayerSimMatrix {
    /// Wraps a raw matrix (rows = deep-model layers, cols = shallow-model layers).
    pub fn from_values(values: Matrix) -> Self {
        Self {
            values,
            row_model: String::new(),
            col_model: String::new(),
        }
    }

    pub fn deep_layers(&self) -> usize {
        self.values.rows()
    }

    pub fn shallow_layers(&self) -> usize {
        self.values.cols()
    }
}

pub fn layer_similarity_matrix(a: &FeatureCache, b: &FeatureCache) -> Result<LayerSimMatrix> {
    if a.batch_fingerprint != b.batch_fingerprint {
        return Err(Error::validation(format!(
            "feature caches come from different calibration batches ({} vs {})",
            a.batch_fingerprint, b.batch_fingerprint
        )));
    }
    for f in a.features.iter().chain(&b.features) {
        check_samples(&a.features[0], f)?;
    }
    let ca = par::map_slice(&a.features, Centered::new)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let cb = par::map_slice(&b.features, Centered::new)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let (n, m) = (ca.len(), cb.len());
    let flat = par::map_indexed(n * m, |k| cka_centered(&ca[k / m], &cb[k % m]))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerSimMatrix {
        values: Matrix::new(n, m, flat)?,
        row_model: a.model_fingerprint.clone(),
        col_model: b.model_fingerprint.clone(),
    })
}

/// Pairwise Pearson correlation over the stacked neuron set `[A; B]`. The
/// diagonal holds `-inf` so a neuron never pairs with itself.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronCorrMatrix {
    pub values: Matrix,
    pub n_a: usize,
    pub n_b: usize,
}

/// Pearson correlation between every pair of rows. Zero-variance rows
/// correlate 0 with everything, including themselves.
pub fn pearson_rows(x: &Matrix) -> Result<Matrix> {
    let mut c = center_rows(x);
    let n = c.rows();
    let mut live = vec![false; n];
    for (r, alive) in live.iter_mut().enumerate() {
        let row = c.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            *alive = true;
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    let mut corr = matmul_bt(&c, &c)?;
    for i in 0..n {
        for j in i..n {
            let v = if live[i] && live[j] {
                // dot products of identical unit rows can land an ulp off 1
                if i != j && c.row(i) == c.row(j) {
                    1.0
                } else {
                    corr.get(i, j).clamp(-1.0, 1.0)
                }
            } else {
                0.0
            };
            corr.set(i, j, v);
            corr.set(j, i, v);
        }
    }
    Ok(corr)
}

pub fn neuron_correlation(feat_a: &Matrix, feat_b: &Matrix) -> Result<NeuronCorrMatrix> {
    check_samples(feat_a, feat_b)?;
    let mut values = pearson_rows(&feat_a.vstack(feat_b)?)?;
    for i in 0..values.rows() {
        values.set(i, i, f64::NEG_INFINITY);
    }
    Ok(NeuronCorrMatrix {
        values,
        n_a: feat_a.rows(),
        n_b: feat_b.rows(),
    })
}
