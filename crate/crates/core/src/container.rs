//! The HMM1 tensor container.
//!
//! Layout:
//!
//! ```text
//! 0..8     magic 48 4D 4D 31 00 00 00 01
//! 8..16    header length, u64 little-endian
//! 16..     UTF-8 JSON header (space-padded so the payload starts 64-byte aligned)
//! ...      payload: f32 little-endian row-major tensors at 64-byte aligned offsets
//! ```
//!
//! Offsets in the header are relative to the start of the payload. Models,
//! datasets and feature caches all use this container; they differ only in
//! which tensors they carry.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::{Head, Layer, LayerSpec, ModelBundle};
use crate::tensor::Matrix;

pub const MAGIC: [u8; 8] = [0x48, 0x4D, 0x4D, 0x31, 0x00, 0x00, 0x00, 0x01];
pub const ALIGN: usize = 64;
const PREAMBLE: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadEntry {
    pub task: u32,
    pub labels: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub layers: Vec<LayerSpec>,
    pub heads: Vec<HeadEntry>,
    pub tensors: Vec<TensorEntry>,
    pub metadata: Map<String, Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn from_matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Self {
            name: name.into(),
            shape: vec![m.rows(), m.cols()],
            data: m.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_vec(name: impl Into<String>, v: &[f64]) -> Self {
        Self {
            name: name.into(),
            shape: vec![v.len()],
            data: v.iter().map(|&x| x as f32).collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        let (r, c) = match self.shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            other => {
                return Err(Error::validation(format!(
                    "tensor {} has shape {other:?}, expected a matrix",
                    self.name
                )))
            }
        };
        Matrix::new(r, c, self.data.iter().map(|&v| v as f64).collect())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// In-memory view of an HMM1 file.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Container {
    pub layers: Vec<LayerSpec>,
    pub heads: Vec<HeadEntry>,
    pub metadata: Map<String, Value>,
    pub tensors: Vec<NamedTensor>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl Container {
    pub fn tensor(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::validation(format!("missing tensor {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0usize;
        for t in &self.tensors {
            let expected: usize = t.shape.iter().product();
            if expected != t.data.len() {
                return Err(Error::validation(format!(
                    "tensor {} declares {:?} but holds {} values",
                    t.name,
                    t.shape,
                    t.data.len()
                )));
            }
            entries.push(TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                dtype: "f32".into(),
                offset,
            });
            offset = align_up(offset + 4 * t.data.len());
        }
        let header = Header {
            layers: self.layers.clone(),
            heads: self.heads.clone(),
            tensors: entries,
            metadata: self.metadata.clone(),
        };
        let mut json = serde_json::to_vec(&header)?;
        let padded = align_up(PREAMBLE + json.len()) - PREAMBLE;
        json.resize(padded, b' ');

        let mut out = Vec::with_capacity(PREAMBLE + json.len() + offset);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let payload_start = out.len();
        for (t, e) in self.tensors.iter().zip(&header.tensors) {
            out.resize(payload_start + e.offset, 0);
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.resize(payload_start + offset, 0);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::parse(bytes, Path::new("<memory>"))
    }

    fn parse(bytes: &[u8], path: &Path) -> Result<Self> {
        let (header, payload) = split_header(bytes, path)?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            if e.dtype != "f32" {
                return Err(Error::validation(format!(
                    "tensor {} has unsupported dtype {}",
                    e.name, e.dtype
                )));
            }
            if e.offset % ALIGN != 0 {
                return Err(Error::validation(format!(
                    "tensor {} offset {} is not {ALIGN}-byte aligned",
                    e.name, e.offset
                )));
            }
            let count: usize = e.shape.iter().product();
            let end = e.offset + 4 * count;
            if end > payload.len() {
                return Err(Error::validation(format!(
                    "tensor {} ({:?}) needs bytes {}..{} but payload has {}",
                    e.name,
                    e.shape,
                    e.offset,
                    end,
                    payload.len()
                )));
            }
            let data = payload[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(NamedTensor {
                name: e.name.clone(),
                shape: e.shape.clone(),
                data,
            });
        }
        Ok(Self {
            layers: header.layers,
            heads: header.heads,
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes, path)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

fn split_header<'a>(bytes: &'a [u8], path: &Path) -> Result<(Header, &'a [u8])> {
    let eof = |what: &str| {
        Error::io(
            PathBuf::from(path),
            std::io::Error::new(std::io::ErrorKind::UnexpectedEof, what.to_string()),
        )
    };
    if bytes.len() < 8 {
        return Err(eof("file shorter than magic"));
    }
    if bytes[..8] != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {:02X?}",
            path.display(),
            &bytes[..8]
        )));
    }
    if bytes.len() < PREAMBLE {
        return Err(eof("file shorter than preamble"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = PREAMBLE
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| eof("truncated header"))?;
    let text = std::str::from_utf8(&bytes[PREAMBLE..end])
        .map_err(|e| Error::Format(format!("header is not UTF-8: {e}")))?;
    let header: Header =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    Ok((header, &bytes[end..]))
}

/// Reads only the JSON header of a container.
pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    split_header(&bytes, path).map(|(h, _)| h)
}

pub fn model_to_container(bundle: &ModelBundle) -> Result<Container> {
    bundle.validate()?;
    let mut tensors = Vec::new();
    for (i, l) in bundle.layers.iter().enumerate() {
        tensors.push(NamedTensor::from_matrix(format!("layer{i}.weight"), &l.weight));
        tensors.push(NamedTensor::from_vec(format!("layer{i}.bias"), &l.bias));
    }
    for h in &bundle.heads {
        tensors.push(NamedTensor::from_matrix(format!("head{}.weight", h.task), &h.weight));
        tensors.push(NamedTensor::from_vec(format!("head{}.bias", h.task), &h.bias));
    }
    Ok(Container {
        layers: bundle.specs(),
        heads: bundle
            .heads
            .iter()
            .map(|h| HeadEntry {
                task: h.task,
                labels: h.labels.clone(),
            })
            .collect(),
        metadata: bundle.metadata.clone(),
        tensors,
    })
}

fn checked_matrix(c: &Container, name: &str, shape: (usize, usize)) -> Result<Matrix> {
    let t = c.tensor(name)?;
    if t.shape != [shape.0, shape.1] {
        return Err(Error::validation(format!(
            "tensor {name} has shape {:?}, expected [{}, {}]",
            t.shape, shape.0, shape.1
        )));
    }
    let m = t.to_matrix()?;
    m.ensure_finite(name)?;
    Ok(m)
}

fn checked_vec(c: &Container, name: &str, len: usize) -> Result<Vec<f64>> {
    let t = c.tensor(name)?;
    if t.shape != [len] {
        return Err(Error::validation(format!(
            "tensor {name} has shape {:?}, expected [{len}]",
            t.shape
        )));
    }
    let v = t.to_vec();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::validation(format!("{name} contains non-finite values")));
    }
    Ok(v)
}

pub fn model_from_container(c: &Container) -> Result<ModelBundle> {
    let mut layers = Vec::with_capacity(c.layers.len());
    for (i, spec) in c.layers.iter().enumerate() {
        spec.validate()
            .map_err(|e| Error::validation(format!("layer{i}: {e}")))?;
        let w = checked_matrix(c, &format!("layer{i}.weight"), (spec.out_dim, spec.in_dim))?;
        let b = checked_vec(c, &format!("layer{i}.bias"), spec.out_dim)?;
        layers.push(Layer::new(*spec, w, b)?);
    }
    let hidden = c.layers.last().map_or(0, |l| l.out_dim);
    let mut heads = Vec::with_capacity(c.heads.len());
    for h in &c.heads {
        let n = h.labels.len();
        let w = checked_matrix(c, &format!("head{}.weight", h.task), (n, hidden))?;
        let b = checked_vec(c, &format!("head{}.bias", h.task), n)?;
        heads.push(Head {
            task: h.task,
            labels: h.labels.clone(),
            weight: w,
            bias: b,
        });
    }
    ModelBundle::new(layers, heads, c.metadata.clone())
}

pub fn save_model(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    model_to_container(bundle)?.write(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelBundle> {
    model_from_container(&Container::read(path)?)
}
