//! End-to-end CAIT fits: build the estimator, grow, prune and select.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{mask_all, TrialDataset};
use crate::error::{CaitError, Result};
use crate::estimators::{EstimatorKind, EstimatorTag, VarianceMode, DEFAULT_MIN_ARM};
use crate::models::{default_link, fit_glm, DesignSpec, ForestParams, Link, OutcomeModel, RandomForest};
use crate::pruning::{
    select_fts1, select_fts2_with_plan, weakest_link_sequence, FoldPlan, ForestOracle, PruneSequence,
    SelectionMethod, SelectionReport, DEFAULT_FOLDS, DEFAULT_LAMBDA, DEFAULT_VALIDATION_FRACTION,
};
use crate::scalar::Real;
use crate::tree::{grow_max_tree, GrowthConstraints, Tree};

fn default_min_arm() -> usize {
    DEFAULT_MIN_ARM
}

/// Outcome model behind the data-adaptive estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DaModel {
    /// GLM on an arbitrary design (spline terms make it spline-additive).
    Glm { design: DesignSpec },
    Forest { params: Option<ForestParams> },
}

/// Serializable description of a node estimator; models are fit from it per dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimatorSpec {
    Unadjusted {
        #[serde(default)]
        variance: VarianceMode,
    },
    Ms {
        design: DesignSpec,
        #[serde(default)]
        link: Option<Link>,
        #[serde(default = "default_min_arm")]
        min_arm: usize,
    },
    Da {
        model: DaModel,
        #[serde(default)]
        link: Option<Link>,
    },
    GlobalMs {
        design: DesignSpec,
        #[serde(default)]
        link: Option<Link>,
    },
}

impl EstimatorSpec {
    pub fn unadjusted() -> Self {
        EstimatorSpec::Unadjusted { variance: VarianceMode::Pooled }
    }

    /// Node GLM with main effects of `columns`.
    pub fn ms(design: DesignSpec) -> Self {
        EstimatorSpec::Ms { design, link: None, min_arm: DEFAULT_MIN_ARM }
    }

    pub fn da_glm(design: DesignSpec) -> Self {
        EstimatorSpec::Da { model: DaModel::Glm { design }, link: None }
    }

    /// Fit whatever global model the estimator needs on `ds`.
    pub fn build<T: Real>(&self, ds: &TrialDataset<T>) -> Result<EstimatorKind<T>> {
        let link_for = |l: &Option<Link>| l.unwrap_or_else(|| default_link(ds.outcome_kind()));
        Ok(match self {
            EstimatorSpec::Unadjusted { variance } => EstimatorKind::Unadjusted { variance: *variance },
            EstimatorSpec::Ms { design, link, min_arm } => EstimatorKind::ModelStandardization {
                design: design.clone(),
                link: link_for(link),
                min_arm: *min_arm,
            },
            EstimatorSpec::Da { model, link } => {
                let fitted = match model {
                    DaModel::Glm { design } => OutcomeModel::SplineAdditive(fit_glm(ds, &mask_all(ds), design, link_for(link))?),
                    DaModel::Forest { params } => {
                        let params = params.unwrap_or_else(|| ForestParams::regression_defaults(ds.p() + 1, 0));
                        OutcomeModel::RandomForest(RandomForest::fit(ds, &params, true)?)
                    }
                };
                EstimatorKind::DataAdaptive(Arc::new(fitted))
            }
            EstimatorSpec::GlobalMs { design, link } => {
                EstimatorKind::GlobalMs(Arc::new(fit_glm(ds, &mask_all(ds), design, link_for(link))?))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub method: SelectionMethod,
    pub lambda: f64,
    pub valid_frac: f64,
    pub folds: usize,
    /// Forest behind the FTS-2 oracle; `None` uses regression defaults.
    pub forest: Option<ForestParams>,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            method: SelectionMethod::Fts2,
            lambda: DEFAULT_LAMBDA,
            valid_frac: DEFAULT_VALIDATION_FRACTION,
            folds: DEFAULT_FOLDS,
            forest: None,
            seed: 0,
        }
    }
}

impl SelectionConfig {
    pub fn fts1(seed: u64) -> Self {
        Self { method: SelectionMethod::Fts1, seed, ..Self::default() }
    }

    pub fn fts2(seed: u64) -> Self {
        Self { method: SelectionMethod::Fts2, seed, ..Self::default() }
    }

    /// Oracle forest parameters for a dataset with `p` covariates.
    pub fn forest_params(&self, p: usize) -> ForestParams {
        let base = self.forest.unwrap_or_else(|| ForestParams::regression_defaults(p + 1, self.seed));
        ForestParams { seed: self.seed, ..base }
    }

    /// The fold plan FTS-2 would build for `ds`.
    pub fn fold_plan<T: Real>(&self, ds: &TrialDataset<T>) -> Result<FoldPlan<T>> {
        let oracle = ForestOracle { params: self.forest_params(ds.p()) };
        FoldPlan::stratified(ds, self.folds, self.seed, &oracle)
    }
}

#[derive(Debug, Clone)]
pub struct CaitFit<T> {
    /// The selected tree; node rows index the growth dataset.
    pub tree: Tree<T>,
    pub sequence: PruneSequence<T>,
    pub report: SelectionReport,
    pub estimator: EstimatorTag,
    /// Rows of the input used to grow the tree (all rows for FTS-2).
    pub build_rows: Vec<usize>,
    pub validation_rows: Vec<usize>,
}

/// Random build/validation partition with `round(frac * n)` validation rows.
pub fn validation_split<T: Real>(ds: &TrialDataset<T>, frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(CaitError::InvalidParameter(format!("validation fraction {frac} not in (0, 1)")));
    }
    let n = ds.n();
    let n_val = ((frac * n as f64).round() as usize).clamp(1, n.saturating_sub(1));
    if n_val == 0 || n_val >= n {
        return Err(CaitError::EmptyValidation);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_F7_51);
    let mut val = rand::seq::index::sample(&mut rng, n, n_val).into_vec();
    val.sort_unstable();
    let mut is_val = vec![false; n];
    val.iter().for_each(|&i| is_val[i] = true);
    let build = (0..n).filter(|&i| !is_val[i]).collect();
    Ok((build, val))
}

/// Grow, prune and select. `plan` lets FTS-2 callers share fold oracles.
pub fn run_cait<T: Real>(
    ds: &TrialDataset<T>,
    spec: &EstimatorSpec,
    constraints: &GrowthConstraints,
    selection: &SelectionConfig,
    plan: Option<&FoldPlan<T>>,
) -> Result<CaitFit<T>> {
    constraints.validate()?;
    match selection.method {
        SelectionMethod::Fts1 => {
            let (build_rows, validation_rows) = validation_split(ds, selection.valid_frac, selection.seed)?;
            let build = ds.subset(&build_rows)?;
            let validation = ds.subset(&validation_rows).map_err(|_| CaitError::EmptyValidation)?;
            let kind = spec.build(&build)?;
            let sequence = weakest_link_sequence(&grow_max_tree(&build, &kind, constraints)?)?;
            let mut report = select_fts1(&sequence, &validation, &kind, T::lit(selection.lambda))?;
            report.seed = Some(selection.seed);
            Ok(CaitFit {
                tree: sequence.trees[report.chosen_index].clone(),
                sequence,
                report,
                estimator: kind.tag(),
                build_rows,
                validation_rows,
            })
        }
        SelectionMethod::Fts2 => {
            let kind = spec.build(ds)?;
            let sequence = weakest_link_sequence(&grow_max_tree(ds, &kind, constraints)?)?;
            let owned;
            let plan = match plan {
                Some(p) => p,
                None => {
                    owned = selection.fold_plan(ds)?;
                    &owned
                }
            };
            let report = select_fts2_with_plan(ds, &sequence, &kind, plan, Some(selection.seed))?;
            Ok(CaitFit {
                tree: sequence.trees[report.chosen_index].clone(),
                sequence,
                report,
                estimator: kind.tag(),
                build_rows: (0..ds.n()).collect(),
                validation_rows: Vec::new(),
            })
        }
    }
}
