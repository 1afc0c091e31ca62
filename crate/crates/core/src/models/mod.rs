//! Models of `E[Y | A, X]`: GLMs, spline-additive GLMs and random forests.

pub mod design;
pub mod forest;
pub mod glm;

use serde::{Deserialize, Serialize};

pub use design::{DesignInfo, DesignSpec, NaturalSpline, Term, Transform};
pub use forest::{ForestParams, RandomForest};
pub use glm::{fit_glm, predict_glm, GlmFit, IrlsOptions, Link};

use crate::data::{OutcomeKind, SubgroupMask, TrialDataset};
use crate::error::Result;
use crate::scalar::Real;

/// Anything that predicts `E[Y | A = a, X = x]`.
pub trait ConditionalMean<T>: Send + Sync {
    fn predict(&self, a: u8, x: &[T]) -> Result<T>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Glm,
    SplineAdditive,
    RandomForest,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OutcomeModel<T> {
    Glm(GlmFit<T>),
    SplineAdditive(GlmFit<T>),
    RandomForest(RandomForest<T>),
}

impl<T: Real> OutcomeModel<T> {
    pub fn kind(&self) -> ModelKind {
        match self {
            OutcomeModel::Glm(_) => ModelKind::Glm,
            OutcomeModel::SplineAdditive(_) => ModelKind::SplineAdditive,
            OutcomeModel::RandomForest(_) => ModelKind::RandomForest,
        }
    }
}

impl<T: Real> ConditionalMean<T> for OutcomeModel<T> {
    fn predict(&self, a: u8, x: &[T]) -> Result<T> {
        predict_outcome(self, a, x)
    }
}

impl<T: Real> ConditionalMean<T> for GlmFit<T> {
    fn predict(&self, a: u8, x: &[T]) -> Result<T> {
        predict_glm(self, a, x)
    }
}

/// The canonical link for an outcome type.
pub fn default_link(kind: OutcomeKind) -> Link {
    match kind {
        OutcomeKind::Continuous => Link::Identity,
        OutcomeKind::Binary => Link::Logit,
    }
}

/// Treatment plus a natural-spline expansion of each listed covariate, fit as a GLM.
pub fn fit_spline_additive<T: Real>(
    ds: &TrialDataset<T>,
    mask: &SubgroupMask,
    covariates: &[usize],
    df: usize,
    link: Link,
) -> Result<OutcomeModel<T>> {
    let spec = DesignSpec::splines(covariates.iter().copied(), df);
    fit_glm(ds, mask, &spec, link).map(OutcomeModel::SplineAdditive)
}

/// Forest on all rows; treatment enters as an ordinary feature when included.
pub fn fit_random_forest<T: Real>(
    ds: &TrialDataset<T>,
    params: &ForestParams,
    include_treatment: bool,
) -> Result<OutcomeModel<T>> {
    RandomForest::fit(ds, params, include_treatment).map(OutcomeModel::RandomForest)
}

pub fn predict_outcome<T: Real>(model: &OutcomeModel<T>, a: u8, x: &[T]) -> Result<T> {
    match model {
        OutcomeModel::Glm(fit) | OutcomeModel::SplineAdditive(fit) => predict_glm(fit, a, x),
        OutcomeModel::RandomForest(f) => f.predict(a, x),
    }
}

/// `E[Y | A = 1, x] - E[Y | A = 0, x]` under the model.
pub fn predict_ite<T: Real>(model: &dyn ConditionalMean<T>, x: &[T]) -> Result<T> {
    Ok(model.predict(1, x)? - model.predict(0, x)?)
}
