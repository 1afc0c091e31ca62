//! Causal-inference regression trees for treatment-effect heterogeneity in
//! randomized trials.

pub mod data;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod models;
pub mod pipeline;
pub mod pruning;
pub mod scalar;
pub mod simulation;
pub mod tree;

pub use data::{load_csv, mask_all, ColumnKind, CsvSchema, OutcomeKind, SubgroupMask, TrialDataset};
pub use error::{CaitError, Result};
pub use estimators::{ArmEstimate, EstimatorKind, EstimatorTag, NodeEffect, NodeEstimator, VarianceMode};
pub use models::{ConditionalMean, DesignSpec, ForestParams, GlmFit, Link, OutcomeModel, RandomForest, Term};
pub use scalar::Real;

pub type Dataset = TrialDataset<f64>;
pub type Dataset32 = TrialDataset<f32>;
pub use pipeline::{run_cait, CaitFit, EstimatorSpec, SelectionConfig};
pub use pruning::{PruneSequence, SelectionMethod, SelectionReport};
pub use tree::{GrowthConstraints, SplitRule, Tree, TreeNode};

pub type Tree64 = Tree<f64>;
pub type Sequence64 = PruneSequence<f64>;
