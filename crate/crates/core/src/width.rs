//! Width alignment: maps that project the concatenated neurons of two models
//! into a shared space of `r` neurons and back.

use serde::{Deserialize, Serialize};

use crate::depth::SegmentPlan;
use crate::error::{Error, Result};
use crate::fingerprint;
use crate::model::{LayerKind, LayerSpec};
use crate::par;
use crate::probe::FeatureCache;
use crate::similarity::{center_rows, neuron_correlation};
use crate::tensor::{matmul, matmul_bt, pseudo_inverse, Matrix, PINV_RTOL};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnmergeMode {
    /// 0/1 group membership; `merge · unmerge = I` exactly.
    #[default]
    Membership,
    /// Moore–Penrose pseudo-inverse of the merge matrix.
    PseudoInverse,
}

/// Projection of `n_a + n_b` concatenated neurons onto `r` shared neurons.
///
/// Row `g` of `merge` averages the members of group `g`, weighting model A
/// members by `scale_a` and model B members by `scale_b`. Column `g` of
/// `unmerge` (membership mode) is 1 at every member.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "MergeMapRepr", try_from = "MergeMapRepr")]
pub struct MergeMap {
    pub merge: Matrix,
    pub unmerge: Matrix,
    pub scale_a: f64,
    pub scale_b: f64,
    pub r: usize,
    pub n_a: usize,
    pub n_b: usize,
    /// Members of each shared neuron, in concatenated indexing (B offset by
    /// `n_a`). Groups are sorted and ordered by their smallest member.
    pub groups: Vec<Vec<usize>>,
    pub unmerge_mode: UnmergeMode,
}

#[derive(Serialize, Deserialize)]
struct MergeMapRepr {
    r: usize,
    n_a: usize,
    n_b: usize,
    scale_a: f64,
    scale_b: f64,
    groups: Vec<Vec<usize>>,
    #[serde(default)]
    unmerge_mode: UnmergeMode,
}

impl From<MergeMap> for MergeMapRepr {
    fn from(m: MergeMap) -> Self {
        Self {
            r: m.r,
            n_a: m.n_a,
            n_b: m.n_b,
            scale_a: m.scale_a,
            scale_b: m.scale_b,
            groups: m.groups,
            unmerge_mode: m.unmerge_mode,
        }
    }
}

impl TryFrom<MergeMapRepr> for MergeMap {
    type Error = Error;

    fn try_from(r: MergeMapRepr) -> Result<Self> {
        let m = MergeMap::from_groups(r.groups, r.n_a, r.n_b, (r.scale_a, r.scale_b), r.unmerge_mode)?;
        if m.r != r.r {
            return Err(Error::validation(format!(
                "merge map declares r = {} but has {} groups",
                r.r, m.r
            )));
        }
        Ok(m)
    }
}

impl MergeMap {
    /// Builds the map for a partition of `0..n_a + n_b`.
    pub fn from_groups(
        mut groups: Vec<Vec<usize>>,
        n_a: usize,
        n_b: usize,
        (scale_a, scale_b): (f64, f64),
        unmerge_mode: UnmergeMode,
    ) -> Result<Self> {
        let n = n_a + n_b;
        if !(scale_a.is_finite() && scale_b.is_finite()) || scale_a < 0.0 || scale_b < 0.0 {
            return Err(Error::validation(format!(
                "scales must be finite and non-negative, got ({scale_a}, {scale_b})"
            )));
        }
        let mut seen = vec![false; n];
        for g in groups.iter_mut() {
            if g.is_empty() {
                return Err(Error::validation("merge group is empty"));
            }
            g.sort_unstable();
            for &k in g.iter() {
                if k >= n || seen[k] {
                    return Err(Error::validation(format!(
                        "neuron {k} is out of range or in more than one group"
                    )));
                }
                seen[k] = true;
            }
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(Error::validation(format!("neuron {k} is in no group")));
        }
        groups.sort_by_key(|g| g[0]);
        let r = groups.len();
        let mut merge = Matrix::zeros(r, n);
        let mut unmerge = Matrix::zeros(n, r);
        for (gi, g) in groups.iter().enumerate() {
            let weight = |k: usize| if k < n_a { scale_a } else { scale_b };
            let total: f64 = g.iter().map(|&k| weight(k)).sum();
            // the last member takes the remainder so each row sums to exactly 1
            let mut running = 0.0;
            for (pos, &k) in g.iter().enumerate() {
                let w = if pos + 1 == g.len() {
                    1.0 - running
                } else if total > 0.0 {
                    weight(k) / total
                } else {
                    1.0 / g.len() as f64
                };
                running += w;
                merge.set(gi, k, w);
                unmerge.set(k, gi, 1.0);
            }
        }
        if unmerge_mode == UnmergeMode::PseudoInverse {
            unmerge = pseudo_inverse(&merge, PINV_RTOL)?;
        }
        Ok(Self {
            merge,
            unmerge,
            scale_a,
            scale_b,
            r,
            n_a,
            n_b,
            groups,
            unmerge_mode,
        })
    }

    /// Pairs neuron `i` of A with neuron `i` of B for a shared input of width
    /// `dim`.
    pub fn identity_pairs(dim: usize, scales: (f64, f64)) -> Result<Self> {
        let groups = (0..dim).map(|i| vec![i, dim + i]).collect();
        Self::from_groups(groups, dim, dim, scales, UnmergeMode::Membership)
    }

    /// Rows of `unmerge` belonging to model A.
    pub fn unmerge_a(&self) -> Matrix {
        self.unmerge.slice_rows(0, self.n_a)
    }

    /// Rows of `unmerge` belonging to model B.
    pub fn unmerge_b(&self) -> Matrix {
        self.unmerge.slice_rows(self.n_a, self.n_a + self.n_b)
    }

    /// Max-abs deviation of `merge · unmerge` from the identity.
    pub fn identity_error(&self) -> Result<f64> {
        let p = matmul(&self.merge, &self.unmerge)?;
        Ok(p.max_abs_diff(&Matrix::identity(self.r)))
    }

    /// For a one-to-one map, the B neuron paired with each A neuron.
    pub fn pairing(&self) -> Option<Vec<usize>> {
        if self.n_a != self.n_b || self.r != self.n_a {
            return None;
        }
        self.groups
            .iter()
            .map(|g| match g.as_slice() {
                [a, b] if *a < self.n_a && *b >= self.n_a => Some(b - self.n_a),
                _ => None,
            })
            .collect()
    }
}

/// Maximum-weight perfect matching on a square score matrix. Returns the
/// column assigned to each row.
pub fn max_weight_assignment(scores: &Matrix) -> Result<Vec<usize>> {
    let n = scores.rows();
    if scores.cols() != n {
        return Err(Error::validation(format!(
            "assignment needs a square matrix, got {}x{}",
            n,
            scores.cols()
        )));
    }
    scores.ensure_finite("assignment scores")?;
    // Shortest augmenting paths with potentials, minimising the negated score.
    // Index 0 is a virtual column; rows and columns are 1-based below.
    let cost = |i: usize, j: usize| -scores.get(i - 1, j - 1);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    Ok(assignment)
}

/// Rows centered and scaled to unit norm; constant rows become zero.
fn unit_rows(x: &Matrix) -> Matrix {
    let mut c = center_rows(x);
    for r in 0..c.rows() {
        let row = c.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    c
}

/// Cosine similarity of centered activations between every A and B neuron.
pub fn cross_cosine(feat_a: &Matrix, feat_b: &Matrix) -> Result<Matrix> {
    if feat_a.cols() != feat_b.cols() {
        return Err(Error::validation(format!(
            "sample counts differ: {} vs {}",
            feat_a.cols(),
            feat_b.cols()
        )));
    }
    matmul_bt(&unit_rows(feat_a), &unit_rows(feat_b))
}

/// One-to-one matching of equally wide layers by maximum total cosine
/// similarity.
pub fn permutation_match(feat_a: &Matrix, feat_b: &Matrix, scales: (f64, f64)) -> Result<MergeMap> {
    let n = feat_a.rows();
    if n != feat_b.rows() {
        return Err(Error::validation(format!(
            "permutation matching needs equal widths ({} vs {}); use zip for unequal layers",
            n,
            feat_b.rows()
        )));
    }
    if n == 0 {
        return Err(Error::validation("cannot match empty layers"));
    }
    let sim = cross_cosine(feat_a, feat_b)?;
    let assignment = max_weight_assignment(&sim)?;
    let groups = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| vec![i, n + j])
        .collect();
    MergeMap::from_groups(groups, n, n, scales, UnmergeMode::Membership)
}

/// How group similarities evolve during zipping.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZipLinkage {
    /// Correlate the mean features of merged groups afresh after each merge.
    #[default]
    Recompute,
    /// Average the initial pairwise correlations between group members.
    Average,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZipOptions {
    pub linkage: ZipLinkage,
    pub scales: (f64, f64),
    pub unmerge_mode: UnmergeMode,
}

impl Default for ZipOptions {
    fn default() -> Self {
        Self {
            linkage: ZipLinkage::Recompute,
            scales: (0.5, 0.5),
            unmerge_mode: UnmergeMode::Membership,
        }
    }
}

/// Index `(i, j)`, `i < j`, of the largest entry above the diagonal of
/// `corr`. Ties go to the smallest pair.
fn best_pair(corr: &[Vec<f64>]) -> (usize, usize) {
    let mut best = (0, 1);
    let mut best_v = f64::NEG_INFINITY;
    for (i, row) in corr.iter().enumerate() {
        for (j, &v) in row.iter().enumerate().skip(i + 1) {
            if v > best_v {
                best_v = v;
                best = (i, j);
            }
        }
    }
    best
}

/// Greedy agglomeration of a pre-computed similarity matrix with average
/// linkage, down to `r` groups.
pub fn zip_groups_average(corr: &Matrix, r: usize) -> Vec<Vec<usize>> {
    average_from(corr, (0..corr.rows()).map(|k| vec![k]).collect(), r)
}

fn average_from(corr: &Matrix, mut groups: Vec<Vec<usize>>, r: usize) -> Vec<Vec<usize>> {
    let g = groups.len();
    let mut sim = vec![vec![f64::NEG_INFINITY; g]; g];
    for i in 0..g {
        for k in i + 1..g {
            let total: f64 = groups[i]
                .iter()
                .flat_map(|&a| groups[k].iter().map(move |&b| corr.get(a, b)))
                .sum();
            let v = total / (groups[i].len() * groups[k].len()) as f64;
            sim[i][k] = v;
            sim[k][i] = v;
        }
    }
    while groups.len() > r.max(1) {
        let (i, j) = best_pair(&sim);
        let (wi, wj) = (groups[i].len() as f64, groups[j].len() as f64);
        let moved = groups.remove(j);
        groups[i].extend(moved);
        let row_j = sim.remove(j);
        for row in sim.iter_mut() {
            row.remove(j);
        }
        for k in 0..groups.len() {
            if k == i {
                continue;
            }
            let kk = if k < j { k } else { k + 1 };
            let v = (sim[i][k] * wi + row_j[kk] * wj) / (wi + wj);
            sim[i][k] = v;
            sim[k][i] = v;
        }
    }
    groups
}

/// Pearson correlation of two already centered and normalized rows.
fn unit_dot(a: &[f64], b: &[f64]) -> f64 {
    let live = |x: &[f64]| x.iter().any(|&v| v != 0.0);
    if !live(a) || !live(b) {
        return 0.0;
    }
    if a == b {
        return 1.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0)
}

fn zip_groups_recompute(
    stacked: &Matrix,
    initial: &Matrix,
    mut groups: Vec<Vec<usize>>,
    r: usize,
) -> Result<Vec<Vec<usize>>> {
    let samples = stacked.cols();
    // running unnormalized member sums, for the group means
    let mut sums: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            let mut acc = vec![0.0; samples];
            for &k in g {
                acc.iter_mut().zip(stacked.row(k)).for_each(|(a, v)| *a += v);
            }
            acc
        })
        .collect();
    let mut units: Vec<Vec<f64>> = groups
        .iter()
        .zip(&sums)
        .map(|(g, sum)| {
            let mean = Matrix::new(1, samples, sum.iter().map(|v| v / g.len() as f64).collect())?;
            Ok(unit_rows(&mean).into_data())
        })
        .collect::<Result<_>>()?;
    let n = groups.len();
    let mut sim = vec![vec![f64::NEG_INFINITY; n]; n];
    for i in 0..n {
        for k in i + 1..n {
            let v = match (groups[i].as_slice(), groups[k].as_slice()) {
                ([a], [b]) => initial.get(*a, *b),
                _ => unit_dot(&units[i], &units[k]),
            };
            sim[i][k] = v;
            sim[k][i] = v;
        }
    }
    while groups.len() > r.max(1) {
        let (i, j) = best_pair(&sim);
        let moved = groups.remove(j);
        groups[i].extend(moved);
        let sum_j = sums.remove(j);
        for (a, b) in sums[i].iter_mut().zip(&sum_j) {
            *a += b;
        }
        units.remove(j);
        sim.remove(j);
        for row in sim.iter_mut() {
            row.remove(j);
        }
        let count = groups[i].len() as f64;
        let mean = Matrix::new(1, samples, sums[i].iter().map(|v| v / count).collect())?;
        units[i] = unit_rows(&mean).into_data();
        for k in 0..groups.len() {
            if k != i {
                let v = unit_dot(&units[i], &units[k]);
                sim[i][k] = v;
                sim[k][i] = v;
            }
        }
    }
    Ok(groups)
}

/// Singleton groups, except that constant A neurons are paired with constant
/// B neurons in index order (at most `budget` pairs). A constant neuron has no
/// correlation with anything, so without this the greedy pass spends its merge
/// budget on live neurons first and strands the constant ones.
fn pair_constant_neurons(stacked: &Matrix, n_a: usize, budget: usize) -> Vec<Vec<usize>> {
    let constant = |k: usize| {
        let row = stacked.row(k);
        row.iter().all(|&v| v == row[0])
    };
    let dead_b: Vec<usize> = (n_a..stacked.rows()).filter(|&k| constant(k)).collect();
    let mut partner = vec![None; stacked.rows()];
    for (a, &b) in (0..n_a).filter(|&k| constant(k)).zip(&dead_b).take(budget) {
        partner[a] = Some(b);
        partner[b] = Some(a);
    }
    (0..stacked.rows())
        .filter_map(|k| match partner[k] {
            Some(b) if k < n_a => Some(vec![k, b]),
            Some(_) => None,
            None => Some(vec![k]),
        })
        .collect()
}

/// Merges the most correlated neurons (within or across models) until `r`
/// shared neurons remain.
pub fn elastic_zip(feat_a: &Matrix, feat_b: &Matrix, r: usize, opts: &ZipOptions) -> Result<MergeMap> {
    let (n_a, n_b) = (feat_a.rows(), feat_b.rows());
    let n = n_a + n_b;
    if r == 0 || r > n {
        return Err(Error::validation(format!(
            "zip width r = {r} must lie in 1..={n}"
        )));
    }
    if r < n_a.max(n_b) {
        log::info!("zip width {r} is below the wider layer ({})", n_a.max(n_b));
    }
    let corr = neuron_correlation(feat_a, feat_b)?;
    let degenerate = (0..n).all(|i| (0..n).all(|j| i == j || corr.values.get(i, j) == 0.0));
    if degenerate && r < n {
        log::warn!("all neuron correlations are zero; zip falls back to index order");
    }
    let stacked = feat_a.vstack(feat_b)?;
    let seeded = pair_constant_neurons(&stacked, n_a, n - r);
    let groups = match opts.linkage {
        ZipLinkage::Average => average_from(&corr.values, seeded, r),
        ZipLinkage::Recompute => zip_groups_recompute(&stacked, &corr.values, seeded, r)?,
    };
    MergeMap::from_groups(groups, n_a, n_b, opts.scales, opts.unmerge_mode)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Permute,
    Zip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignOptions {
    pub strategy: Strategy,
    /// Shared width for every boundary; `None` uses the wider layer.
    pub r: Option<usize>,
    pub zip: ZipOptions,
}

impl AlignOptions {
    pub fn permute() -> Self {
        Self {
            strategy: Strategy::Permute,
            r: None,
            zip: ZipOptions::default(),
        }
    }

    pub fn zip(r: Option<usize>) -> Self {
        Self {
            strategy: Strategy::Zip,
            r,
            zip: ZipOptions::default(),
        }
    }
}

/// Merge maps for every layer output of the (extended) model pair. The input
/// boundary is implicit: both models read the raw input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPlan {
    pub strategy: Strategy,
    pub input_dim: usize,
    /// `maps[k]` aligns the outputs of layer `k`.
    pub maps: Vec<MergeMap>,
    /// Fingerprints of the feature matrices each boundary was aligned on.
    pub a_features: Vec<String>,
    pub b_features: Vec<String>,
    pub model_a: String,
    pub model_b: String,
    pub batch: String,
}

impl AlignmentPlan {
    pub fn depth(&self) -> usize {
        self.maps.len()
    }

    pub fn scales(&self) -> (f64, f64) {
        self.maps
            .first()
            .map_or((0.5, 0.5), |m| (m.scale_a, m.scale_b))
    }

    /// `unmerge` feeding layer `k`: the stacked input identities for `k = 0`.
    pub fn unmerge_before(&self, k: usize) -> Matrix {
        if k == 0 {
            let eye = Matrix::identity(self.input_dim);
            eye.vstack(&eye).expect("equal widths")
        } else {
            self.maps[k - 1].unmerge.clone()
        }
    }

    /// Largest `merge · unmerge` deviation from the identity over all maps.
    pub fn identity_error(&self) -> Result<f64> {
        self.maps
            .iter()
            .map(MergeMap::identity_error)
            .try_fold(0.0, |acc, e| Ok(f64::max(acc, e?)))
    }
}

/// Boundaries whose maps must coincide so residual shortcuts stay identities.
/// Boundary `k` is the output of layer `k - 1`; boundary 0 is the input. A run
/// of residual layers ties its input boundary with all of its outputs.
pub fn residual_streams(specs: &[LayerSpec]) -> Vec<Vec<usize>> {
    let mut streams: Vec<Vec<usize>> = Vec::new();
    let mut current: Option<Vec<usize>> = None;
    for (k, spec) in specs.iter().enumerate() {
        if spec.kind == LayerKind::ResidualDense {
            current.get_or_insert_with(|| vec![k]).push(k + 1);
        } else if let Some(s) = current.take() {
            streams.push(s);
        }
    }
    streams.extend(current);
    streams
}

fn boundary_map(fa: &Matrix, fb: &Matrix, opts: &AlignOptions) -> Result<MergeMap> {
    match opts.strategy {
        Strategy::Permute => permutation_match(fa, fb, opts.zip.scales),
        Strategy::Zip => {
            let r = opts.r.unwrap_or(fa.rows().max(fb.rows()));
            elastic_zip(fa, fb, r, &opts.zip)
        }
    }
}

/// Aligns the deep model A with the extended shallow model B layer by layer.
/// `specs` are A's layer specs; runs of residual layers share one map so the
/// merged shortcuts remain exact identities.
pub fn build_alignment_plan(
    depth_plan: &SegmentPlan,
    cache_a: &FeatureCache,
    cache_b_ext: &FeatureCache,
    specs: &[LayerSpec],
    opts: &AlignOptions,
) -> Result<AlignmentPlan> {
    let depth = cache_a.len();
    if cache_b_ext.len() != depth || specs.len() != depth {
        return Err(Error::validation(format!(
            "depth mismatch: A has {} cached layers and {} specs, extended B has {}",
            depth,
            specs.len(),
            cache_b_ext.len()
        )));
    }
    depth_plan.validate(depth)?;
    if cache_a.batch_fingerprint != cache_b_ext.batch_fingerprint {
        return Err(Error::validation(
            "feature caches come from different calibration batches",
        ));
    }
    let input_dim = specs[0].in_dim;
    let mut owner: Vec<Option<usize>> = vec![None; depth + 1];
    let streams = residual_streams(specs);
    for (s, stream) in streams.iter().enumerate() {
        for &b in stream {
            owner[b] = Some(s);
        }
    }
    // one job per untied boundary plus one per residual stream
    enum Job<'a> {
        Single(usize),
        Stream(&'a [usize]),
    }
    let mut jobs = Vec::new();
    for (k, o) in owner.iter().enumerate().skip(1) {
        match *o {
            None => jobs.push(Job::Single(k)),
            Some(s) if streams[s].iter().find(|&&b| b > 0) == Some(&k) => {
                jobs.push(Job::Stream(&streams[s]))
            }
            Some(_) => {}
        }
    }
    let results = par::map_slice(&jobs, |job| -> Result<(Vec<usize>, MergeMap)> {
        match job {
            Job::Single(k) => Ok((
                vec![*k],
                boundary_map(&cache_a.features[k - 1], &cache_b_ext.features[k - 1], opts)?,
            )),
            Job::Stream(bounds) if bounds[0] == 0 => {
                Ok((bounds.to_vec(), MergeMap::identity_pairs(input_dim, opts.zip.scales)?))
            }
            Job::Stream(bounds) => {
                let stack = |cache: &FeatureCache| -> Result<Matrix> {
                    let mut acc = cache.features[bounds[0] - 1].clone();
                    for &b in &bounds[1..] {
                        acc = acc.hstack(&cache.features[b - 1])?;
                    }
                    Ok(acc)
                };
                let map = boundary_map(&stack(cache_a)?, &stack(cache_b_ext)?, opts)?;
                Ok((bounds.to_vec(), map))
            }
        }
    });
    let mut maps: Vec<Option<MergeMap>> = vec![None; depth];
    for res in results {
        let (bounds, map) = res?;
        for b in bounds.into_iter().filter(|&b| b > 0) {
            maps[b - 1] = Some(map.clone());
        }
    }
    let maps: Vec<MergeMap> = maps
        .into_iter()
        .map(|m| m.expect("every boundary is covered"))
        .collect();
    if let Some(s) = streams.iter().find(|s| s[0] == 0) {
        for &b in s.iter().filter(|&&b| b > 0) {
            if cache_b_ext.features[b - 1].rows() != input_dim {
                return Err(Error::validation("residual stream width differs between models"));
            }
        }
    }
    Ok(AlignmentPlan {
        strategy: opts.strategy,
        input_dim,
        maps,
        a_features: cache_a.features.iter().map(fingerprint::of_matrix).collect(),
        b_features: cache_b_ext.features.iter().map(fingerprint::of_matrix).collect(),
        model_a: cache_a.model_fingerprint.clone(),
        model_b: cache_b_ext.model_fingerprint.clone(),
        batch: cache_a.batch_fingerprint.clone(),
    })
}
