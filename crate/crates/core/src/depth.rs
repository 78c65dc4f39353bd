//! Depth alignment: split the deeper model into as many consecutive segments
//! as the shallower model has layers.
//!
//! Both dynamic programs fill a table `T` of shape `n × m` (shallow layers ×
//! deep layers, 1-indexed, with an implicit zero row 0) from the layer
//! similarity matrix `C` (`m × n`, deep × shallow):
//!
//! * segment-wise (SMA): `T[i][j] = max(T[i][j-1], T[i-1][j-1] + C[j][i])`
//! * layer-wise (LMA):   `T[i][j] = max(T[i][j-1] + C[j][i-1], T[i-1][j-1] + C[j][i])`
//!
//! with `T[i][i] = Σ_{k≤i} C[k][k]` and `C[j][0] = 0`. The reported score is
//! `T[n][m]`. Backtracking pins `g[1] = 1` and `g[n] = m`, then walks from
//! `(n-1, m-1)` preferring the skip branch whenever it attains the maximum.

use std::fmt;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ExtensionMode, ExtensionPlan};
use crate::similarity::LayerSimMatrix;
use crate::tensor::Matrix;

/// Largest deep-model depth [`brute_force_align`] will enumerate.
pub const ORACLE_MAX_DEPTH: usize = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Objective {
    #[serde(rename = "SMA")]
    Sma,
    #[serde(rename = "LMA")]
    Lma,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Sma => "SMA",
            Objective::Lma => "LMA",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AlignMethod {
    #[serde(rename = "SMA")]
    Sma,
    #[serde(rename = "LMA")]
    Lma,
    Oracle,
}

impl From<Objective> for AlignMethod {
    fn from(o: Objective) -> Self {
        match o {
            Objective::Sma => AlignMethod::Sma,
            Objective::Lma => AlignMethod::Lma,
        }
    }
}

/// Monotone segmentation of the deep model. `g[i]` (1-indexed values, stored
/// 0-indexed in the vector) is the deep layer that ends segment `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentPlan {
    pub method: AlignMethod,
    pub g: Vec<usize>,
    pub score: f64,
}

impl SegmentPlan {
    /// Identity plan for equal depths.
    pub fn identity(depth: usize) -> Self {
        Self {
            method: AlignMethod::Oracle,
            g: (1..=depth).collect(),
            score: 0.0,
        }
    }

    pub fn shallow_depth(&self) -> usize {
        self.g.len()
    }

    pub fn deep_depth(&self) -> usize {
        self.g.last().copied().unwrap_or(0)
    }

    /// Checks strict monotonicity, `g[i] ≥ i` and `g[n] == m`.
    pub fn validate(&self, deep_depth: usize) -> Result<()> {
        if self.g.is_empty() {
            return Err(Error::validation("segment plan is empty"));
        }
        for (idx, &v) in self.g.iter().enumerate() {
            if v < idx + 1 {
                return Err(Error::validation(format!(
                    "g[{}] = {v} is below its index",
                    idx + 1
                )));
            }
        }
        if self.g.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::validation(format!("g = {:?} is not strictly increasing", self.g)));
        }
        if self.deep_depth() != deep_depth {
            return Err(Error::validation(format!(
                "g ends at {} but the deep model has {deep_depth} layers",
                self.deep_depth()
            )));
        }
        Ok(())
    }

    /// Deep-layer range (1-indexed, inclusive) of each segment.
    pub fn segments(&self) -> Vec<RangeInclusive<usize>> {
        let mut prev = 0;
        self.g
            .iter()
            .map(|&end| {
                let r = prev + 1..=end;
                prev = end;
                r
            })
            .collect()
    }

    pub fn segment_lengths(&self) -> Vec<usize> {
        self.segments().iter().map(|r| r.end() + 1 - r.start()).collect()
    }

    /// 0-indexed shallow layer paired with each 0-indexed deep layer.
    pub fn shallow_index_per_deep_layer(&self) -> Vec<usize> {
        self.segment_lengths()
            .iter()
            .enumerate()
            .flat_map(|(i, &len)| std::iter::repeat_n(i, len))
            .collect()
    }

    /// True for deep layers (0-indexed) that open a segment.
    pub fn is_segment_start(&self) -> Vec<bool> {
        self.segment_lengths()
            .iter()
            .flat_map(|&len| (0..len).map(|k| k == 0))
            .collect()
    }

    pub fn extension_plan(&self, mode: ExtensionMode) -> Result<ExtensionPlan> {
        ExtensionPlan::from_segment_lengths(&self.segment_lengths(), mode)
    }

    /// Mean of `C[k][seg(k)]` over all deep layers: the diagonal of the
    /// similarity between the deep model and the extended shallow model.
    pub fn diagonal_similarity(&self, c: &LayerSimMatrix) -> f64 {
        let pairs = self.shallow_index_per_deep_layer();
        let total: f64 = pairs
            .iter()
            .enumerate()
            .map(|(k, &i)| c.values.get(k, i))
            .sum();
        total / pairs.len() as f64
    }
}

/// The filled DP table. Indices are 1-based; row 0 is the implicit zero row.
#[derive(Clone, Debug, PartialEq)]
pub struct DpTable {
    t: Matrix,
}

impl DpTable {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.t.get(i, j)
    }

    pub fn shallow_depth(&self) -> usize {
        self.t.rows() - 1
    }

    pub fn deep_depth(&self) -> usize {
        self.t.cols() - 1
    }
}

/// `C[j][i]` with 1-based indices and the `C[j][0] = 0` convention.
#[inline]
fn sim(c: &Matrix, j: usize, i: usize) -> f64 {
    if i == 0 {
        0.0
    } else {
        c.get(j - 1, i - 1)
    }
}

fn check_input(c: &LayerSimMatrix) -> Result<(usize, usize)> {
    let (m, n) = c.values.shape();
    if n == 0 {
        return Err(Error::validation("similarity matrix has no shallow layers"));
    }
    if m < n {
        return Err(Error::Infeasible(format!(
            "deep model has {m} layers, fewer than the shallow model's {n}"
        )));
    }
    c.values.ensure_finite("similarity matrix")?;
    Ok((m, n))
}

pub fn fill_table(c: &LayerSimMatrix, objective: Objective) -> Result<DpTable> {
    let (m, n) = check_input(c)?;
    let cv = &c.values;
    let mut t = Matrix::zeros(n + 1, m + 1);
    let mut diag = 0.0;
    for i in 1..=n {
        diag += sim(cv, i, i);
        t.set(i, i, diag);
    }
    for i in 1..=n {
        for j in i + 1..=m {
            let take = t.get(i - 1, j - 1) + sim(cv, j, i);
            let skip = match objective {
                Objective::Sma => t.get(i, j - 1),
                Objective::Lma => t.get(i, j - 1) + sim(cv, j, i - 1),
            };
            t.set(i, j, skip.max(take));
        }
    }
    Ok(DpTable { t })
}

fn backtrack(table: &DpTable, c: &Matrix, objective: Objective) -> Vec<usize> {
    let n = table.shallow_depth();
    let m = table.deep_depth();
    let mut g = vec![0usize; n + 1];
    g[1] = 1;
    g[n] = m;
    if n >= 3 {
        let mut i = n - 1;
        let mut j = m - 1;
        while i >= 2 {
            while j > i {
                let skip = match objective {
                    Objective::Sma => table.get(i, j - 1),
                    Objective::Lma => table.get(i, j - 1) + sim(c, j, i - 1),
                };
                if table.get(i, j) != skip {
                    break;
                }
                j -= 1;
            }
            g[i] = j;
            i -= 1;
            j -= 1;
        }
    }
    g.remove(0);
    g
}

pub fn align(c: &LayerSimMatrix, objective: Objective) -> Result<SegmentPlan> {
    let table = fill_table(c, objective)?;
    let (n, m) = (table.shallow_depth(), table.deep_depth());
    Ok(SegmentPlan {
        method: objective.into(),
        g: backtrack(&table, &c.values, objective),
        score: table.get(n, m),
    })
}

/// Segment-wise model alignment.
pub fn sma_align(c: &LayerSimMatrix) -> Result<SegmentPlan> {
    align(c, Objective::Sma)
}

/// Layer-wise model alignment.
pub fn lma_align(c: &LayerSimMatrix) -> Result<SegmentPlan> {
    align(c, Objective::Lma)
}

/// Score of one lattice path through the DP table: diagonal steps land on
/// `seq` (1-based deep layers for shallow layers 1..), horizontal steps run up
/// to `end`. Terms are added in path order, matching the table's accumulation.
pub fn path_score(c: &Matrix, seq: &[usize], end: usize, objective: Objective) -> f64 {
    let mut s = 0.0;
    for (k, &col) in seq.iter().enumerate() {
        s += sim(c, col, k + 1);
        let until = seq.get(k + 1).map_or(end, |next| next - 1);
        if objective == Objective::Lma {
            for j in col + 1..=until {
                s += sim(c, j, k);
            }
        }
    }
    s
}

/// Calls `visit` on every strictly increasing sequence of `len` values drawn
/// from `1..=hi`.
fn for_each_increasing(len: usize, hi: usize, mut visit: impl FnMut(&[usize])) {
    if len > hi {
        return;
    }
    let mut seq: Vec<usize> = (1..=len).collect();
    loop {
        visit(&seq);
        // advance to the next combination in lexicographic order
        let mut k = len;
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            if seq[k] < hi - (len - 1 - k) {
                break;
            }
            if k == 0 {
                return;
            }
        }
        seq[k] += 1;
        for t in k + 1..len {
            seq[t] = seq[t - 1] + 1;
        }
    }
}

/// Returns the best path and its score, breaking ties toward the smallest
/// last element, then second-to-last, and so on.
fn best_path(c: &Matrix, len: usize, hi: usize, objective: Objective) -> (Vec<usize>, f64) {
    let mut best: Option<(Vec<usize>, f64)> = None;
    for_each_increasing(len, hi, |seq| {
        let s = path_score(c, seq, hi, objective);
        let better = match &best {
            None => true,
            Some((bseq, bs)) => {
                s > *bs || (s == *bs && seq.iter().rev().lt(bseq.iter().rev()))
            }
        };
        if better {
            best = Some((seq.to_vec(), s));
        }
    });
    best.unwrap_or((Vec::new(), 0.0))
}

/// Exhaustive reference for [`align`]: enumerates every lattice path to score
/// the alignment, and every path into `(n-1, m-1)` to recover the plan the
/// backtrack would emit.
pub fn brute_force_align(c: &LayerSimMatrix, objective: Objective) -> Result<SegmentPlan> {
    let (m, n) = check_input(c)?;
    if m > ORACLE_MAX_DEPTH {
        return Err(Error::validation(format!(
            "exhaustive alignment is limited to {ORACLE_MAX_DEPTH} deep layers, got {m}"
        )));
    }
    let (_, score) = best_path(&c.values, n, m, objective);
    let g = match n {
        1 => vec![m],
        2 => vec![1, m],
        _ => {
            let (prefix, _) = best_path(&c.values, n - 1, m - 1, objective);
            let mut g = prefix;
            g[0] = 1;
            g.push(m);
            g
        }
    };
    Ok(SegmentPlan {
        method: AlignMethod::Oracle,
        g,
        score,
    })
}
