//! Folds two aligned models into one set of weights.
//!
//! For every layer `k` the merged weight is `merge_k · [[W_A, 0], [0, W_B]] ·
//! unmerge_{k-1}` and the merged bias `merge_k · [b_A; b_B]`. The input
//! boundary's unmerge is two stacked identities, so each model reads the raw
//! input. Heads are never combined: each keeps reading its own model's slice
//! of the last unmerge.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::depth::{self, Objective, SegmentPlan};
use crate::error::{Error, Result};
use crate::fingerprint;
use crate::model::{extend_model, ExtensionMode, Head, Layer, LayerKind, LayerSpec, ModelBundle};
use crate::probe::{capture_features, CalibrationBatch};
use crate::similarity::layer_similarity_matrix;
use crate::tensor::{block_diag, matmul, IndexPermutation, Matrix};
use crate::width::{build_alignment_plan, AlignOptions, AlignmentPlan, Strategy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeStrategy {
    VanillaAvg,
    AlignedAvg,
    Zip,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DepthTag {
    #[serde(rename = "SMA")]
    Sma,
    #[serde(rename = "LMA")]
    Lma,
    Oracle,
    Homo,
}

/// Everything needed to reproduce a merge of one model pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeRecipe {
    pub strategy: MergeStrategy,
    pub depth_method: DepthTag,
    pub depth: SegmentPlan,
    /// Absent for vanilla averaging.
    pub alignment: Option<AlignmentPlan>,
    pub extension: ExtensionMode,
    pub scales: (f64, f64),
    pub model_a: String,
    pub model_b: String,
    pub batch: String,
}

fn check_scales((sa, sb): (f64, f64)) -> Result<()> {
    if !(sa.is_finite() && sb.is_finite()) || sa < 0.0 || sb < 0.0 {
        return Err(Error::validation(format!(
            "scales must be finite and non-negative, got ({sa}, {sb})"
        )));
    }
    Ok(())
}

fn zip_vec(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn zip_matrix(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(Error::shape("combine", a.shape(), b.shape()));
    }
    Matrix::new(a.rows(), a.cols(), zip_vec(a.data(), b.data(), f))
}

fn average(x: f64, y: f64) -> f64 {
    0.5 * x + 0.5 * y
}

/// Applies `f` entrywise over every layer and head of two same-shaped models.
fn combine(a: &ModelBundle, b: &ModelBundle, f: impl Fn(f64, f64) -> f64 + Copy) -> Result<ModelBundle> {
    if !a.same_architecture(b) {
        return Err(Error::validation(
            "models differ in architecture or head layout",
        ));
    }
    let layers = a
        .layers
        .iter()
        .zip(&b.layers)
        .map(|(la, lb)| {
            Layer::new(
                la.spec,
                zip_matrix(&la.weight, &lb.weight, f)?,
                zip_vec(&la.bias, &lb.bias, f),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let heads = a
        .heads
        .iter()
        .zip(&b.heads)
        .map(|(ha, hb)| {
            Ok(Head {
                task: ha.task,
                labels: ha.labels.clone(),
                weight: zip_matrix(&ha.weight, &hb.weight, f)?,
                bias: zip_vec(&ha.bias, &hb.bias, f),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ModelBundle::new(layers, heads, a.metadata.clone())
}

/// Entrywise convex combination `λ·a + (1-λ)·b`, computed as `b + λ(a - b)`
/// so that equal parameters stay bit-identical along the path.
pub fn interpolate(a: &ModelBundle, b: &ModelBundle, lambda: f64) -> Result<ModelBundle> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::validation(format!("lambda {lambda} is outside [0, 1]")));
    }
    if lambda == 1.0 {
        return combine(a, b, |x, _| x);
    }
    combine(a, b, |x, y| y + lambda * (x - y))
}

/// Plain parameter averaging of two models with identical layer specs. Heads
/// are averaged when both models carry the same tasks and carried over side
/// by side when the task sets are disjoint.
pub fn average_weights(a: &ModelBundle, b: &ModelBundle) -> Result<ModelBundle> {
    if a.specs() != b.specs() {
        return Err(Error::validation("models differ in layer specs"));
    }
    if a.same_architecture(b) {
        let mut m = combine(a, b, average)?;
        m.metadata = merged_metadata(a, b, None);
        return Ok(m);
    }
    if a.heads.iter().any(|ha| b.heads.iter().any(|hb| hb.task == ha.task)) {
        return Err(Error::validation(
            "models share a task id but disagree on its head",
        ));
    }
    let layers = a
        .layers
        .iter()
        .zip(&b.layers)
        .map(|(la, lb)| {
            Layer::new(
                la.spec,
                zip_matrix(&la.weight, &lb.weight, average)?,
                zip_vec(&la.bias, &lb.bias, average),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let heads = a.heads.iter().chain(&b.heads).cloned().collect();
    ModelBundle::new(layers, heads, merged_metadata(a, b, None))
}

fn merged_metadata(a: &ModelBundle, b: &ModelBundle, recipe: Option<&MergeRecipe>) -> Map<String, Value> {
    let mut meta = Map::new();
    meta.insert(
        "merged_from".into(),
        Value::from(vec![fingerprint::of_model(a), fingerprint::of_model(b)]),
    );
    if let Some(r) = recipe {
        meta.insert(
            "recipe".into(),
            serde_json::to_value(r).expect("recipe serializes"),
        );
    }
    meta
}

/// Core fold shared by every aligned merge. `b_side[k]` is the B-model
/// weight and bias paired with A's layer `k`.
fn fold(
    a: &ModelBundle,
    b_side: &[(Matrix, Vec<f64>)],
    b_heads: &[Head],
    plan: &AlignmentPlan,
) -> Result<(Vec<Layer>, Vec<Head>)> {
    if plan.depth() != a.depth() || b_side.len() != a.depth() {
        return Err(Error::validation(format!(
            "alignment covers {} boundaries, A has {} layers, B side has {}",
            plan.depth(),
            a.depth(),
            b_side.len()
        )));
    }
    if plan.input_dim != a.input_dim() {
        return Err(Error::validation("alignment input width differs from model A"));
    }
    let mut layers = Vec::with_capacity(a.depth());
    for (k, (la, (wb, bb))) in a.layers.iter().zip(b_side).enumerate() {
        let unmerge = plan.unmerge_before(k);
        let map = &plan.maps[k];
        if map.n_a != la.spec.out_dim || map.n_b != wb.rows() {
            return Err(Error::validation(format!(
                "layer{k}: merge map expects {}+{} neurons, models give {}+{}",
                map.n_a,
                map.n_b,
                la.spec.out_dim,
                wb.rows()
            )));
        }
        let stacked = block_diag(&la.weight, wb);
        let weight = matmul(&matmul(&map.merge, &stacked)?, &unmerge)?;
        let bias = map.merge.mul_vec(&[la.bias.as_slice(), bb.as_slice()].concat())?;
        let spec = LayerSpec {
            kind: la.spec.kind,
            in_dim: weight.cols(),
            out_dim: weight.rows(),
            activation: la.spec.activation,
        };
        let layer = Layer::new(spec, weight, bias)
            .map_err(|e| Error::validation(format!("merged layer{k}: {e}")))?;
        layers.push(layer);
    }
    let last = plan.maps.last().expect("non-empty plan");
    let (ua, ub) = (last.unmerge_a(), last.unmerge_b());
    let mut heads = Vec::with_capacity(a.heads.len() + b_heads.len());
    for (h, u) in a.heads.iter().map(|h| (h, &ua)).chain(b_heads.iter().map(|h| (h, &ub))) {
        if heads.iter().any(|x: &Head| x.task == h.task) {
            return Err(Error::validation(format!(
                "both models have a head for task {}",
                h.task
            )));
        }
        heads.push(Head {
            task: h.task,
            labels: h.labels.clone(),
            weight: matmul(&h.weight, u)?,
            bias: h.bias.clone(),
        });
    }
    Ok((layers, heads))
}

fn check_fingerprint(expected: &str, model: &ModelBundle, which: &str) -> Result<()> {
    if !expected.is_empty() && expected != fingerprint::of_model(model) {
        return Err(Error::validation(format!(
            "plan was built for a different model {which} ({expected})"
        )));
    }
    Ok(())
}

/// Merges two equally deep models through a per-boundary alignment.
pub fn aligned_average(a: &ModelBundle, b: &ModelBundle, plan: &AlignmentPlan) -> Result<ModelBundle> {
    check_fingerprint(&plan.model_a, a, "A")?;
    check_fingerprint(&plan.model_b, b, "B")?;
    if a.depth() != b.depth() {
        return Err(Error::validation(format!(
            "aligned averaging needs equal depths, got {} and {}",
            a.depth(),
            b.depth()
        )));
    }
    for (k, (la, lb)) in a.layers.iter().zip(&b.layers).enumerate() {
        if la.spec.kind != lb.spec.kind {
            return Err(Error::validation(format!(
                "layer{k} kinds differ: {:?} vs {:?}",
                la.spec.kind, lb.spec.kind
            )));
        }
    }
    let b_side: Vec<_> = b.layers.iter().map(|l| (l.weight.clone(), l.bias.clone())).collect();
    let (layers, heads) = fold(a, &b_side, &b.heads, plan)?;
    ModelBundle::new(layers, heads, merged_metadata(a, b, None))
}

fn merge_segmented(
    a: &ModelBundle,
    b: &ModelBundle,
    recipe: &MergeRecipe,
    mode: ExtensionMode,
) -> Result<ModelBundle> {
    if recipe.extension != mode {
        return Err(Error::validation(format!(
            "recipe extends with {:?}, this merge needs {:?}",
            recipe.extension, mode
        )));
    }
    let plan = recipe
        .alignment
        .as_ref()
        .ok_or_else(|| Error::validation("recipe has no alignment plan"))?;
    check_fingerprint(&recipe.model_a, a, "A")?;
    check_fingerprint(&recipe.model_b, b, "B")?;
    check_fingerprint(&plan.model_a, a, "A")?;
    let seg = &recipe.depth;
    seg.validate(a.depth())?;
    if seg.shallow_depth() != b.depth() {
        return Err(Error::validation(format!(
            "segment plan has {} segments, B has {} layers",
            seg.shallow_depth(),
            b.depth()
        )));
    }
    let owner = seg.shallow_index_per_deep_layer();
    let starts = seg.is_segment_start();
    let mut b_side = Vec::with_capacity(a.depth());
    for (k, la) in a.layers.iter().enumerate() {
        let lb = &b.layers[owner[k]];
        if starts[k] {
            if la.spec.kind != lb.spec.kind {
                return Err(Error::validation(format!(
                    "layer{k} kinds differ: {:?} vs {:?}",
                    la.spec.kind, lb.spec.kind
                )));
            }
            b_side.push((lb.weight.clone(), lb.bias.clone()));
            continue;
        }
        let dim = lb.spec.out_dim;
        match mode {
            ExtensionMode::IdentityDense => {
                if la.spec.kind != LayerKind::Dense {
                    return Err(Error::validation(format!(
                        "layer{k} of A is residual; use the residual merge"
                    )));
                }
                b_side.push((Matrix::identity(dim), vec![0.0; dim]));
            }
            ExtensionMode::ZeroResidual => {
                if la.spec.kind != LayerKind::ResidualDense {
                    return Err(Error::validation(format!(
                        "layer{k} of A is not residual but sits inside a residual segment"
                    )));
                }
                b_side.push((Matrix::zeros(dim, dim), vec![0.0; dim]));
            }
        }
    }
    let (layers, heads) = fold(a, &b_side, &b.heads, plan)?;
    ModelBundle::new(layers, heads, merged_metadata(a, b, Some(recipe)))
}

/// Depth-heterogeneous merge: B's layer `i` pairs with the first layer of A's
/// segment `i`; the remaining layers of the segment pair with identity maps.
pub fn merge_depth_hetero(a: &ModelBundle, b: &ModelBundle, recipe: &MergeRecipe) -> Result<ModelBundle> {
    merge_segmented(a, b, recipe, ExtensionMode::IdentityDense)
}

/// Residual variant: the pass-through blocks carry zero weights, so internal
/// segment layers keep only A's contribution.
pub fn merge_depth_hetero_residual(
    a: &ModelBundle,
    b: &ModelBundle,
    recipe: &MergeRecipe,
) -> Result<ModelBundle> {
    merge_segmented(a, b, recipe, ExtensionMode::ZeroResidual)
}

/// Applies a recipe with the merge its strategy and extension mode call for.
pub fn merge_models(a: &ModelBundle, b: &ModelBundle, recipe: &MergeRecipe) -> Result<ModelBundle> {
    match (recipe.strategy, recipe.extension) {
        (MergeStrategy::VanillaAvg, _) => {
            let mut m = average_weights(a, b)?;
            m.metadata = merged_metadata(a, b, Some(recipe));
            Ok(m)
        }
        (_, ExtensionMode::IdentityDense) => merge_depth_hetero(a, b, recipe),
        (_, ExtensionMode::ZeroResidual) => merge_depth_hetero_residual(a, b, recipe),
    }
}

/// Inputs to [`prepare_recipe`].
#[derive(Clone, Debug, PartialEq)]
pub struct RecipeOptions {
    pub strategy: MergeStrategy,
    /// `None` requires equal depths.
    pub depth_objective: Option<Objective>,
    pub oracle: bool,
    pub extension: ExtensionMode,
    pub align: AlignOptions,
}

impl RecipeOptions {
    pub fn new(strategy: MergeStrategy, depth_objective: Option<Objective>, extension: ExtensionMode) -> Self {
        let align = match strategy {
            MergeStrategy::Zip => AlignOptions::zip(None),
            _ => AlignOptions::permute(),
        };
        Self {
            strategy,
            depth_objective,
            oracle: false,
            extension,
            align,
        }
    }
}

/// Runs the whole planning pipeline: capture, layer similarity, depth
/// alignment, extension of B and per-boundary width alignment.
pub fn prepare_recipe(
    a: &ModelBundle,
    b: &ModelBundle,
    batch: &CalibrationBatch,
    opts: &RecipeOptions,
) -> Result<MergeRecipe> {
    if a.depth() < b.depth() {
        return Err(Error::validation(format!(
            "model A ({} layers) must be at least as deep as model B ({} layers); swap them",
            a.depth(),
            b.depth()
        )));
    }
    let scales = opts.align.zip.scales;
    check_scales(scales)?;
    let cache_a = capture_features(a, batch)?;
    let cache_b = capture_features(b, batch)?;
    let (depth, depth_method) = match opts.depth_objective {
        None if a.depth() != b.depth() => {
            return Err(Error::validation(
                "models differ in depth; choose a depth alignment method",
            ))
        }
        None => (SegmentPlan::identity(a.depth()), DepthTag::Homo),
        Some(obj) => {
            let sim = layer_similarity_matrix(&cache_a, &cache_b)?;
            if opts.oracle {
                (depth::brute_force_align(&sim, obj)?, DepthTag::Oracle)
            } else {
                let tag = match obj {
                    Objective::Sma => DepthTag::Sma,
                    Objective::Lma => DepthTag::Lma,
                };
                (depth::align(&sim, obj)?, tag)
            }
        }
    };
    let alignment = if opts.strategy == MergeStrategy::VanillaAvg {
        if !a.specs().iter().eq(b.specs().iter()) {
            return Err(Error::validation(
                "vanilla averaging needs identical architectures",
            ));
        }
        None
    } else {
        let ext = extend_model(b, &depth.extension_plan(opts.extension)?)?;
        let cache_ext = capture_features(&ext, batch)?;
        let mut align = opts.align.clone();
        align.strategy = match opts.strategy {
            MergeStrategy::Zip => Strategy::Zip,
            _ => Strategy::Permute,
        };
        Some(build_alignment_plan(&depth, &cache_a, &cache_ext, &a.specs(), &align)?)
    };
    Ok(MergeRecipe {
        strategy: opts.strategy,
        depth_method,
        depth,
        alignment,
        extension: opts.extension,
        scales,
        model_a: fingerprint::of_model(a),
        model_b: fingerprint::of_model(b),
        batch: batch.fingerprint(),
    })
}

/// Rewrites B in A's neuron order using a one-to-one alignment, leaving B's
/// function unchanged. Used to interpolate aligned parameters.
pub fn reexpress_in_a_basis(b: &ModelBundle, plan: &AlignmentPlan) -> Result<ModelBundle> {
    check_fingerprint(&plan.model_b, b, "B")?;
    if plan.depth() != b.depth() {
        return Err(Error::validation("alignment depth differs from model B"));
    }
    let perms = plan
        .maps
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let pairing = m.pairing().ok_or_else(|| {
                Error::validation(format!("boundary {k} is not a one-to-one pairing"))
            })?;
            IndexPermutation::new(pairing)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::with_capacity(b.depth());
    for (k, l) in b.layers.iter().enumerate() {
        let mut w = perms[k].apply_rows(&l.weight)?;
        if k > 0 {
            w = perms[k - 1].apply_cols(&w)?;
        }
        layers.push(Layer::new(l.spec, w, perms[k].apply_vec(&l.bias))?);
    }
    let last = perms.last().expect("non-empty");
    let heads = b
        .heads
        .iter()
        .map(|h| {
            Ok(Head {
                task: h.task,
                labels: h.labels.clone(),
                weight: last.apply_cols(&h.weight)?,
                bias: h.bias.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ModelBundle::new(layers, heads, b.metadata.clone())
}

impl AlignmentPlan {
    /// A plan assembled from explicit maps, with no fingerprints attached.
    pub fn from_maps(strategy: Strategy, input_dim: usize, maps: Vec<crate::width::MergeMap>) -> Self {
        Self {
            strategy,
            input_dim,
            maps,
            a_features: Vec::new(),
            b_features: Vec::new(),
            model_a: String::new(),
            model_b: String::new(),
            batch: String::new(),
        }
    }
}
