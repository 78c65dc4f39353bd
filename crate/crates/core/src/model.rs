//! Sequential dense/residual network description, forward execution and the
//! function-preserving depth extensions.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::tensor::{matmul_bt, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Dense,
    /// `y = act(x + W·x + b)`; requires `in_dim == out_dim`.
    ResidualDense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Activation {
    #[serde(rename = "ReLU")]
    Relu,
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Linear => v,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn dense(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Dense,
            in_dim,
            out_dim,
            activation,
        }
    }

    pub fn residual(dim: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::ResidualDense,
            in_dim: dim,
            out_dim: dim,
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::validation("layer dims must be non-zero"));
        }
        if self.kind == LayerKind::ResidualDense && self.in_dim != self.out_dim {
            return Err(Error::validation(format!(
                "residual layer needs in_dim == out_dim, got {} -> {}",
                self.in_dim, self.out_dim
            )));
        }
        Ok(())
    }
}

/// A layer's spec together with its parameters. `weight` is `out_dim × in_dim`
/// so output neurons are rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn new(spec: LayerSpec, weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        let layer = Self { spec, weight, bias };
        layer.validate()?;
        Ok(layer)
    }

    fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.weight.shape() != (self.spec.out_dim, self.spec.in_dim) {
            return Err(Error::validation(format!(
                "weight is {}x{}, spec wants {}x{}",
                self.weight.rows(),
                self.weight.cols(),
                self.spec.out_dim,
                self.spec.in_dim
            )));
        }
        if self.bias.len() != self.spec.out_dim {
            return Err(Error::validation(format!(
                "bias has {} entries, spec wants {}",
                self.bias.len(),
                self.spec.out_dim
            )));
        }
        Ok(())
    }

    /// Applies the layer to a `samples × in_dim` batch.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = matmul_bt(x, &self.weight)?;
        let residual = self.spec.kind == LayerKind::ResidualDense;
        let act = self.spec.activation;
        for r in 0..y.rows() {
            let xr = x.row(r);
            let yr = y.row_mut(r);
            for (c, v) in yr.iter_mut().enumerate() {
                let pre = *v + self.bias[c];
                let pre = if residual { xr[c] + pre } else { pre };
                *v = act.apply(pre);
            }
        }
        Ok(y)
    }
}

/// Output head for one task. Column `j` of the head's logits predicts global
/// label `labels[j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub task: u32,
    pub labels: Vec<u32>,
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Head {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::validation(format!("head {} has no labels", self.task)));
        }
        if self.weight.rows() != self.labels.len() || self.bias.len() != self.labels.len() {
            return Err(Error::validation(format!(
                "head {} has {} labels but weight {}x{} and bias {}",
                self.task,
                self.labels.len(),
                self.weight.rows(),
                self.weight.cols(),
                self.bias.len()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = matmul_bt(x, &self.weight)?;
        for r in 0..y.rows() {
            for (v, b) in y.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadSelect {
    Task(u32),
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub layers: Vec<Layer>,
    pub heads: Vec<Head>,
    pub metadata: Map<String, Value>,
}

impl ModelBundle {
    pub fn new(layers: Vec<Layer>, heads: Vec<Head>, metadata: Map<String, Value>) -> Result<Self> {
        let bundle = Self {
            layers,
            heads,
            metadata,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    /// Checks every structural invariant: non-empty, dims chain, heads match
    /// the final hidden width, task ids unique.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::validation("model must have at least one layer"));
        }
        if self.heads.is_empty() {
            return Err(Error::validation("model must have at least one head"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.validate()
                .map_err(|e| Error::validation(format!("layer{i}: {e}")))?;
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].spec.out_dim != pair[1].spec.in_dim {
                return Err(Error::validation(format!(
                    "layer{} out_dim {} does not feed layer{} in_dim {}",
                    i,
                    pair[0].spec.out_dim,
                    i + 1,
                    pair[1].spec.in_dim
                )));
            }
        }
        let hidden = self.hidden_dim();
        for h in &self.heads {
            h.validate()?;
            if h.in_dim() != hidden {
                return Err(Error::validation(format!(
                    "head {} reads {} features, final hidden width is {}",
                    h.task,
                    h.in_dim(),
                    hidden
                )));
            }
        }
        let mut tasks: Vec<u32> = self.heads.iter().map(|h| h.task).collect();
        tasks.sort_unstable();
        if tasks.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::validation("duplicate head task id"));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.spec.out_dim)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn head(&self, task: u32) -> Result<&Head> {
        self.heads
            .iter()
            .find(|h| h.task == task)
            .ok_or(Error::MissingHead(task))
    }

    /// True when both models have the same layer specs and the same head
    /// layout, so their parameters can be combined entrywise.
    pub fn same_architecture(&self, other: &ModelBundle) -> bool {
        self.specs() == other.specs()
            && self.heads.len() == other.heads.len()
            && self
                .heads
                .iter()
                .zip(&other.heads)
                .all(|(a, b)| a.task == b.task && a.labels == b.labels && a.weight.shape() == b.weight.shape())
    }

    /// Post-activation output of every layer, each `samples × out_dim`.
    pub fn hidden_states(&self, batch: &Matrix) -> Result<Vec<Matrix>> {
        if batch.cols() != self.input_dim() {
            return Err(Error::shape(
                "forward",
                batch.shape(),
                (self.input_dim(), self.layers[0].spec.out_dim),
            ));
        }
        let mut states: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = states.last().unwrap_or(batch);
            let out = layer.apply(input)?;
            states.push(out);
        }
        Ok(states)
    }

    /// Logits for the selected head(s), `samples × labels`. With
    /// [`HeadSelect::All`] the heads' columns are concatenated in head order.
    pub fn forward(&self, batch: &Matrix, head: HeadSelect) -> Result<Matrix> {
        let states = self.hidden_states(batch)?;
        let last = states.last().expect("validated model has layers");
        self.apply_heads(last, head)
    }

    pub fn apply_heads(&self, hidden: &Matrix, head: HeadSelect) -> Result<Matrix> {
        match head {
            HeadSelect::Task(t) => self.head(t)?.apply(hidden),
            HeadSelect::All => {
                let mut out: Option<Matrix> = None;
                for h in &self.heads {
                    let y = h.apply(hidden)?;
                    out = Some(match out {
                        None => y,
                        Some(acc) => acc.hstack(&y)?,
                    });
                }
                out.ok_or_else(|| Error::validation("model has no heads"))
            }
        }
    }

    /// Global label of each column produced by `forward(.., HeadSelect::All)`.
    pub fn joint_labels(&self) -> Vec<u32> {
        self.heads.iter().flat_map(|h| h.labels.iter().copied()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExtensionMode {
    /// Insert Dense layers with `W = I`, `b = 0`, Linear activation.
    IdentityDense,
    /// Insert ResidualDense blocks with `W = 0`, `b = 0`, Linear activation.
    ZeroResidual,
}

/// How many layers to insert after each layer of the model being extended.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtensionPlan {
    /// `insert_after[i]` pass-through layers follow layer `i`. An empty vector
    /// means no insertions.
    pub insert_after: Vec<usize>,
    pub mode: ExtensionMode,
}

impl ExtensionPlan {
    pub fn empty(mode: ExtensionMode) -> Self {
        Self {
            insert_after: Vec::new(),
            mode,
        }
    }

    /// Builds the plan that stretches layer `i` into a run of
    /// `segment_lengths[i]` layers.
    pub fn from_segment_lengths(segment_lengths: &[usize], mode: ExtensionMode) -> Result<Self> {
        if segment_lengths.contains(&0) {
            return Err(Error::validation("segments must contain at least one layer"));
        }
        Ok(Self {
            insert_after: segment_lengths.iter().map(|l| l - 1).collect(),
            mode,
        })
    }

    pub fn total_insertions(&self) -> usize {
        self.insert_after.iter().sum()
    }

    /// Depth of a model of depth `base` after applying the plan.
    pub fn extended_depth(&self, base: usize) -> usize {
        base + self.total_insertions()
    }
}

/// Builds the pass-through layer an extension inserts after a layer of width
/// `dim`.
pub fn pass_through_layer(dim: usize, mode: ExtensionMode) -> Layer {
    match mode {
        ExtensionMode::IdentityDense => Layer {
            spec: LayerSpec::dense(dim, dim, Activation::Linear),
            weight: Matrix::identity(dim),
            bias: vec![0.0; dim],
        },
        ExtensionMode::ZeroResidual => Layer {
            spec: LayerSpec::residual(dim, Activation::Linear),
            weight: Matrix::zeros(dim, dim),
            bias: vec![0.0; dim],
        },
    }
}

/// Deepens `bundle` by inserting pass-through layers, leaving its function
/// unchanged.
pub fn extend_model(bundle: &ModelBundle, plan: &ExtensionPlan) -> Result<ModelBundle> {
    if plan.insert_after.is_empty() {
        return Ok(bundle.clone());
    }
    if plan.insert_after.len() != bundle.depth() {
        return Err(Error::validation(format!(
            "extension plan covers {} layers, model has {}",
            plan.insert_after.len(),
            bundle.depth()
        )));
    }
    let mut layers = Vec::with_capacity(plan.extended_depth(bundle.depth()));
    for (layer, &count) in bundle.layers.iter().zip(&plan.insert_after) {
        layers.push(layer.clone());
        let dim = layer.spec.out_dim;
        for _ in 0..count {
            layers.push(pass_through_layer(dim, plan.mode));
        }
    }
    let mut metadata = bundle.metadata.clone();
    metadata.insert(
        "extension".into(),
        serde_json::to_value(plan).expect("plan serializes"),
    );
    ModelBundle::new(layers, bundle.heads.clone(), metadata)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn rand_layer(rng: &mut ChaCha8Rng, spec: LayerSpec) -> Layer {
        let w = rand_matrix(rng, spec.out_dim, spec.in_dim);
        let b = (0..spec.out_dim).map(|_| rng.random_range(-0.5..0.5)).collect();
        Layer::new(spec, w, b).unwrap()
    }

    fn rand_head(rng: &mut ChaCha8Rng, task: u32, dim: usize, labels: Vec<u32>) -> Head {
        Head {
            task,
            weight: rand_matrix(rng, labels.len(), dim),
            bias: vec![0.1; labels.len()],
            labels,
        }
    }

    fn mlp(rng: &mut ChaCha8Rng) -> ModelBundle {
        let layers = vec![
            rand_layer(rng, LayerSpec::dense(4, 6, Activation::Relu)),
            rand_layer(rng, LayerSpec::dense(6, 5, Activation::Relu)),
            rand_layer(rng, LayerSpec::dense(5, 5, Activation::Relu)),
        ];
        let heads = vec![rand_head(rng, 0, 5, vec![0, 1, 2])];
        ModelBundle::new(layers, heads, Map::new()).unwrap()
    }

    fn resnet(rng: &mut ChaCha8Rng) -> ModelBundle {
        let layers = vec![
            rand_layer(rng, LayerSpec::dense(4, 6, Activation::Relu)),
            rand_layer(rng, LayerSpec::residual(6, Activation::Relu)),
            rand_layer(rng, LayerSpec::residual(6, Activation::Relu)),
        ];
        let heads = vec![rand_head(rng, 0, 6, vec![0, 1])];
        ModelBundle::new(layers, heads, Map::new()).unwrap()
    }

    #[test]
    fn identity_dense_layer_is_identity() {
        let layer = pass_through_layer(3, ExtensionMode::IdentityDense);
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 3.5], vec![0.0, 4.0, -1.0]]).unwrap();
        assert_eq!(layer.apply(&x).unwrap(), x);
    }

    #[test]
    fn zero_residual_passes_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_matrix(&mut rng, 10, 4);
        let lin = pass_through_layer(4, ExtensionMode::ZeroResidual);
        assert_eq!(lin.apply(&x).unwrap(), x);
        let mut relu = lin.clone();
        relu.spec.activation = Activation::Relu;
        let y = relu.apply(&x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, b.max(0.0));
        }
    }

    #[test]
    fn two_layer_relu_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l1 = rand_layer(&mut rng, LayerSpec::dense(3, 4, Activation::Relu));
        let l2 = rand_layer(&mut rng, LayerSpec::dense(4, 2, Activation::Relu));
        let head = rand_head(&mut rng, 0, 2, vec![0, 1]);
        let model =
            ModelBundle::new(vec![l1.clone(), l2.clone()], vec![head.clone()], Map::new()).unwrap();
        let x = rand_matrix(&mut rng, 6, 3);
        let got = model.forward(&x, HeadSelect::All).unwrap();
        for s in 0..6 {
            let mut h = x.row(s).to_vec();
            for l in [&l1, &l2] {
                let mut next = vec![0.0; l.spec.out_dim];
                for o in 0..l.spec.out_dim {
                    let mut acc = l.bias[o];
                    for i in 0..l.spec.in_dim {
                        acc += l.weight.get(o, i) * h[i];
                    }
                    next[o] = acc.max(0.0);
                }
                h = next;
            }
            for o in 0..2 {
                let mut acc = head.bias[o];
                for i in 0..2 {
                    acc += head.weight.get(o, i) * h[i];
                }
                assert!((got.get(s, o) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unknown_head_and_bad_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = mlp(&mut rng);
        let x = rand_matrix(&mut rng, 3, 4);
        assert!(matches!(m.forward(&x, HeadSelect::Task(9)), Err(Error::MissingHead(9))));
        let bad = rand_matrix(&mut rng, 3, 5);
        assert!(matches!(m.forward(&bad, HeadSelect::All), Err(Error::Shape { .. })));
    }

    #[test]
    fn validation_rejects_broken_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = mlp(&mut rng);
        m.layers.swap(0, 1);
        assert!(m.validate().is_err());
        let m = mlp(&mut rng);
        assert!(ModelBundle::new(vec![], m.heads.clone(), Map::new()).is_err());
        assert!(ModelBundle::new(m.layers.clone(), vec![], Map::new()).is_err());
        assert!(LayerSpec::residual(3, Activation::Relu).validate().is_ok());
        let bad = LayerSpec {
            kind: LayerKind::ResidualDense,
            in_dim: 3,
            out_dim: 4,
            activation: Activation::Linear,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empty_extension_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = mlp(&mut rng);
        assert_eq!(extend_model(&m, &ExtensionPlan::empty(ExtensionMode::IdentityDense)).unwrap(), m);
    }

    #[test]
    fn identity_extension_preserves_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = mlp(&mut rng);
        let plan = ExtensionPlan::from_segment_lengths(&[3, 1, 2], ExtensionMode::IdentityDense).unwrap();
        let ext = extend_model(&m, &plan).unwrap();
        assert_eq!(ext.depth(), 6);
        let x = rand_matrix(&mut rng, 256, 4);
        let d = m
            .forward(&x, HeadSelect::All)
            .unwrap()
            .max_abs_diff(&ext.forward(&x, HeadSelect::All).unwrap());
        assert!(d < 1e-6, "{d}");
    }

    #[test]
    fn zero_residual_extension_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = resnet(&mut rng);
        let plan = ExtensionPlan::from_segment_lengths(&[1, 3, 2], ExtensionMode::ZeroResidual).unwrap();
        let ext = extend_model(&m, &plan).unwrap();
        assert_eq!(ext.depth(), 6);
        let x = rand_matrix(&mut rng, 256, 4);
        assert_eq!(
            m.forward(&x, HeadSelect::All).unwrap(),
            ext.forward(&x, HeadSelect::All).unwrap()
        );
    }

    #[test]
    fn extension_plan_length_must_match_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = mlp(&mut rng);
        let plan = ExtensionPlan::from_segment_lengths(&[2, 2], ExtensionMode::IdentityDense).unwrap();
        assert!(matches!(extend_model(&m, &plan), Err(Error::Validation(_))));
    }
}
