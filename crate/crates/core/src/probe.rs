//! Captures per-layer activations of a model on a calibration batch.

use serde_json::{Map, Value};

use crate::container::{Container, NamedTensor};
use crate::error::{Error, Result};
use crate::fingerprint;
use crate::model::ModelBundle;
use crate::par;
use crate::tensor::Matrix;

/// Samples per work item when capturing in parallel.
pub const CAPTURE_CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationBatch {
    /// `samples × input_dim`.
    pub inputs: Matrix,
    pub labels: Option<Vec<u32>>,
    pub seed: u64,
}

impl CalibrationBatch {
    pub fn new(inputs: Matrix, labels: Option<Vec<u32>>, seed: u64) -> Result<Self> {
        if inputs.rows() < 2 {
            return Err(Error::validation(
                "calibration batch needs at least 2 samples",
            ));
        }
        inputs.ensure_finite("calibration batch")?;
        if let Some(l) = &labels {
            if l.len() != inputs.rows() {
                return Err(Error::validation("label count does not match sample count"));
            }
        }
        Ok(Self {
            inputs,
            labels,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    pub fn fingerprint(&self) -> String {
        fingerprint::of_matrix(&self.inputs)
    }
}

/// Per-layer activations, each stored `neurons × samples`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCache {
    pub features: Vec<Matrix>,
    pub model_fingerprint: String,
    pub batch_fingerprint: String,
}

impl FeatureCache {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn samples(&self) -> usize {
        self.features.first().map_or(0, Matrix::cols)
    }

    pub fn to_container(&self) -> Container {
        let mut metadata = Map::new();
        metadata.insert("kind".into(), Value::from("features"));
        metadata.insert("model_fingerprint".into(), Value::from(self.model_fingerprint.clone()));
        metadata.insert("batch_fingerprint".into(), Value::from(self.batch_fingerprint.clone()));
        Container {
            metadata,
            tensors: self
                .features
                .iter()
                .enumerate()
                .map(|(i, f)| NamedTensor::from_matrix(format!("feat.layer{i}"), f))
                .collect(),
            ..Default::default()
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = |key: &str| -> Result<String> {
            c.metadata
                .get(key)
                .and_then(Value::as_str)
                .map(str::to_owned)
                .ok_or_else(|| Error::validation(format!("feature cache lacks {key}")))
        };
        let mut features = Vec::new();
        for i in 0.. {
            match c.tensors.iter().find(|t| t.name == format!("feat.layer{i}")) {
                Some(t) => features.push(t.to_matrix()?),
                None => break,
            }
        }
        if features.is_empty() {
            return Err(Error::validation("feature cache has no feat.layer0"));
        }
        Ok(Self {
            features,
            model_fingerprint: meta("model_fingerprint")?,
            batch_fingerprint: meta("batch_fingerprint")?,
        })
    }
}

/// Runs the batch through the model and records every layer's post-activation
/// output (post-shortcut for residual blocks).
pub fn capture_features(bundle: &ModelBundle, batch: &CalibrationBatch) -> Result<FeatureCache> {
    let x = &batch.inputs;
    if x.cols() != bundle.input_dim() {
        return Err(Error::shape(
            "capture_features",
            x.shape(),
            (bundle.input_dim(), bundle.layers[0].spec.out_dim),
        ));
    }
    let chunks = x.rows().div_ceil(CAPTURE_CHUNK);
    let per_chunk = par::map_indexed(chunks, |c| {
        let start = c * CAPTURE_CHUNK;
        let end = (start + CAPTURE_CHUNK).min(x.rows());
        bundle.hidden_states(&x.slice_rows(start, end))
    });
    let mut stacked: Vec<Option<Matrix>> = vec![None; bundle.depth()];
    for chunk in per_chunk {
        for (slot, state) in stacked.iter_mut().zip(chunk?) {
            *slot = Some(match slot.take() {
                None => state,
                Some(acc) => acc.vstack(&state)?,
            });
        }
    }
    Ok(FeatureCache {
        features: stacked
            .into_iter()
            .map(|s| s.expect("every layer captured").transpose())
            .collect(),
        model_fingerprint: fingerprint::of_model(bundle),
        batch_fingerprint: batch.fingerprint(),
    })
}
