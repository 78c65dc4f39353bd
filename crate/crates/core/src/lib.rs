//! Training-free merging of feed-forward and residual networks that differ in
//! depth and width.
//!
//! The pipeline: capture per-layer activations on a shared calibration batch,
//! score layer pairs with linear CKA, segment the deeper model with a dynamic
//! program, extend the shallower model with pass-through layers, align neurons
//! per boundary (permutation matching or elastic zipping), then fold both
//! models into one set of weights.

// index loops read closer to the matrix formulas in the numeric kernels
#![allow(clippy::needless_range_loop)]

pub mod container;
pub mod depth;
pub mod error;
pub mod eval;
pub mod fingerprint;
pub mod merger;
pub mod model;
pub mod par;
pub mod probe;
pub mod similarity;
pub mod tensor;
pub mod toy;
pub mod width;

pub use container::{load_model, save_model, Container};
pub use depth::{brute_force_align, lma_align, sma_align, AlignMethod, Objective, SegmentPlan};
pub use error::{Error, Result};
pub use eval::{evaluate, loss_barrier, BarrierReport, Dataset, EvalReport, HeadPolicy, TaskLabels};
pub use merger::{
    aligned_average, average_weights, interpolate, merge_depth_hetero, merge_depth_hetero_residual,
    merge_models, prepare_recipe, MergeRecipe, MergeStrategy, RecipeOptions,
};
pub use model::{
    extend_model, Activation, ExtensionMode, ExtensionPlan, Head, HeadSelect, Layer, LayerKind,
    LayerSpec, ModelBundle,
};
pub use probe::{capture_features, CalibrationBatch, FeatureCache};
pub use similarity::{layer_similarity_matrix, linear_cka, neuron_correlation, LayerSimMatrix};
pub use tensor::{IndexPermutation, Matrix};
pub use toy::{gen_tasks, train_mlp, TaskSpec, TrainConfig};
pub use width::{
    build_alignment_plan, elastic_zip, permutation_match, AlignOptions, AlignmentPlan, MergeMap,
    Strategy,
};
