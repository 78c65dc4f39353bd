//! Stable content hashes used to check that caches, plans and recipes refer
//! to the same models and calibration batch.

use sha2::{Digest, Sha256};

use crate::model::ModelBundle;
use crate::tensor::Matrix;

fn finish(h: Sha256) -> String {
    let out = h.finalize();
    out[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn feed_matrix(h: &mut Sha256, m: &Matrix) {
    h.update((m.rows() as u64).to_le_bytes());
    h.update((m.cols() as u64).to_le_bytes());
    for v in m.data() {
        h.update(v.to_bits().to_le_bytes());
    }
}

pub fn of_matrix(m: &Matrix) -> String {
    let mut h = Sha256::new();
    feed_matrix(&mut h, m);
    finish(h)
}

/// Hash of a model's parameters and head layout (metadata excluded).
pub fn of_model(bundle: &ModelBundle) -> String {
    let mut h = Sha256::new();
    for l in &bundle.layers {
        h.update(format!("{:?}", l.spec).as_bytes());
        feed_matrix(&mut h, &l.weight);
        for b in &l.bias {
            h.update(b.to_bits().to_le_bytes());
        }
    }
    for head in &bundle.heads {
        h.update(head.task.to_le_bytes());
        for l in &head.labels {
            h.update(l.to_le_bytes());
        }
        feed_matrix(&mut h, &head.weight);
        for b in &head.bias {
            h.update(b.to_bits().to_le_bytes());
        }
    }
    finish(h)
}
