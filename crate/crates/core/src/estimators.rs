//! Node-and-arm mean estimators `mu_l(w) = E[Y | A = l, X in w]` and their
//! variances: unadjusted arm means, model standardization with a
//! node-level GLM, the same with a GLM fit once on all data, and the
//! augmented data-adaptive estimator built on any outcome model.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{SubgroupMask, TrialDataset};
use crate::error::{CaitError, Result};
use crate::models::glm::{irls, standardized_mean, IrlsOptions};
use crate::models::{ConditionalMean, DesignSpec, GlmFit, Link};
use crate::scalar::Real;

/// Default minimum per-arm count below which model standardization falls back.
pub const DEFAULT_MIN_ARM: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// Two-sample pooled variance `s^2 / n_l` with `n(w) - 2` degrees of freedom.
    #[default]
    Pooled,
    /// Per-arm sample variance `s_l^2 / n_l`.
    PerArm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorTag {
    Unadjusted,
    ModelStandardization,
    /// Model standardization replaced by the unadjusted estimator.
    MsFallback,
    GlobalMs,
    DataAdaptive,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmEstimate<T> {
    pub mu_hat: T,
    pub var_hat: T,
    pub n_arm: usize,
    pub method_used: EstimatorTag,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeEffect<T> {
    pub effect: T,
    pub var: T,
}

/// Which node estimator drives splitting and selection.
#[derive(Clone)]
pub enum EstimatorKind<T> {
    Unadjusted { variance: VarianceMode },
    ModelStandardization { design: DesignSpec, link: Link, min_arm: usize },
    DataAdaptive(Arc<dyn ConditionalMean<T>>),
    GlobalMs(Arc<GlmFit<T>>),
}

impl<T> fmt::Debug for EstimatorKind<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimatorKind::Unadjusted { variance } => f.debug_struct("Unadjusted").field("variance", variance).finish(),
            EstimatorKind::ModelStandardization { design, link, min_arm } => f
                .debug_struct("ModelStandardization")
                .field("design", design)
                .field("link", link)
                .field("min_arm", min_arm)
                .finish(),
            EstimatorKind::DataAdaptive(_) => f.write_str("DataAdaptive(..)"),
            EstimatorKind::GlobalMs(_) => f.write_str("GlobalMs(..)"),
        }
    }
}

impl<T: Real> EstimatorKind<T> {
    pub fn unadjusted() -> Self {
        EstimatorKind::Unadjusted { variance: VarianceMode::Pooled }
    }

    pub fn model_standardization(design: DesignSpec, link: Link) -> Self {
        EstimatorKind::ModelStandardization { design, link, min_arm: DEFAULT_MIN_ARM }
    }

    pub fn data_adaptive(model: impl ConditionalMean<T> + 'static) -> Self {
        EstimatorKind::DataAdaptive(Arc::new(model))
    }

    pub fn tag(&self) -> EstimatorTag {
        match self {
            EstimatorKind::Unadjusted { .. } => EstimatorTag::Unadjusted,
            EstimatorKind::ModelStandardization { .. } => EstimatorTag::ModelStandardization,
            EstimatorKind::DataAdaptive(_) => EstimatorTag::DataAdaptive,
            EstimatorKind::GlobalMs(_) => EstimatorTag::GlobalMs,
        }
    }

    /// Bind the estimator to a dataset, caching per-row quantities.
    pub fn prepare<'a>(&self, ds: &'a TrialDataset<T>) -> Result<NodeEstimator<'a, T>> {
        NodeEstimator::new(ds, self)
    }
}

fn arm_of(arm: u8) -> Result<u8> {
    if arm > 1 {
        return Err(CaitError::InvalidParameter(format!("arm {arm} not in {{0,1}}")));
    }
    Ok(arm)
}

/// Arm means and the pooled or per-arm variances over `rows`.
fn unadjusted_rows<T: Real>(
    ds: &TrialDataset<T>,
    rows: &[usize],
    mode: VarianceMode,
) -> Result<[ArmEstimate<T>; 2]> {
    let mut count = [0usize; 2];
    let mut sum = [T::zero(); 2];
    for &i in rows {
        let a = ds.a(i) as usize;
        count[a] += 1;
        sum[a] += ds.y(i);
    }
    for arm in 0..2 {
        if count[arm] == 0 {
            return Err(CaitError::EmptyArm(arm as u8));
        }
    }
    let mean = [sum[0] / T::from_count(count[0]), sum[1] / T::from_count(count[1])];
    let mut ss = [T::zero(); 2];
    for &i in rows {
        let a = ds.a(i) as usize;
        let d = ds.y(i) - mean[a];
        ss[a] += d * d;
    }
    let var = match mode {
        VarianceMode::Pooled => {
            if rows.len() < 3 {
                return Err(CaitError::NotEstimable("pooled variance needs at least 3 rows".into()));
            }
            let s2 = (ss[0] + ss[1]) / T::from_count(rows.len() - 2);
            [s2 / T::from_count(count[0]), s2 / T::from_count(count[1])]
        }
        VarianceMode::PerArm => {
            if count[0] < 2 || count[1] < 2 {
                return Err(CaitError::NotEstimable("per-arm variance needs two rows per arm".into()));
            }
            let v = |a: usize| ss[a] / T::from_count(count[a] - 1) / T::from_count(count[a]);
            [v(0), v(1)]
        }
    };
    Ok([0, 1].map(|a| ArmEstimate {
        mu_hat: mean[a],
        var_hat: var[a],
        n_arm: count[a],
        method_used: EstimatorTag::Unadjusted,
    }))
}

/// Augmented estimator for one arm given that arm's predictions `m` (indexed like `ds`).
fn data_adaptive_rows<T: Real>(ds: &TrialDataset<T>, rows: &[usize], arm: u8, m: &[T]) -> Result<ArmEstimate<T>> {
    let mut n_arm = 0usize;
    let mut y_sum = T::zero();
    let mut m_sum = T::zero();
    for &i in rows {
        if ds.a(i) == arm {
            n_arm += 1;
            y_sum += ds.y(i);
        }
        m_sum += m[i];
    }
    if n_arm == 0 {
        return Err(CaitError::EmptyArm(arm));
    }
    let nw = T::from_count(rows.len());
    let nl = T::from_count(n_arm);
    let p = nl / nw;
    let unadjusted = y_sum / nl;
    let mut adj = T::zero();
    for &i in rows {
        let ind = if ds.a(i) == arm { T::one() } else { T::zero() };
        adj += (ind - p) / p * m[i];
    }
    let mu = unadjusted - adj / nw;
    let m_bar = m_sum / nw;
    let mut acc = T::zero();
    for &i in rows {
        let ind = if ds.a(i) == arm { T::one() } else { T::zero() };
        let term = ind * (ds.y(i) - mu) - (ind - p) * (m[i] - m_bar);
        acc += term * term;
    }
    Ok(ArmEstimate {
        mu_hat: mu,
        var_hat: acc / (nl * nl),
        n_arm,
        method_used: EstimatorTag::DataAdaptive,
    })
}

fn predictions<T: Real>(ds: &TrialDataset<T>, model: &dyn ConditionalMean<T>, arm: u8) -> Result<Vec<T>> {
    (0..ds.n()).map(|i| model.predict(arm, ds.x(i))).collect()
}

/// Design matrices for observed rows and for each counterfactual arm.
struct FixedDesign<T> {
    d: usize,
    observed: Vec<T>,
    arms: [Vec<T>; 2],
}

enum Prepared<T> {
    Unadjusted(VarianceMode),
    Ms {
        spec: DesignSpec,
        link: Link,
        min_arm: usize,
        fixed: Option<FixedDesign<T>>,
    },
    Da {
        m: [Vec<T>; 2],
    },
    GlobalMs {
        beta: Vec<T>,
        cov: Vec<T>,
        link: Link,
        design: FixedDesign<T>,
    },
}

/// An estimator bound to one dataset, evaluated on row subsets.
pub struct NodeEstimator<'a, T> {
    ds: &'a TrialDataset<T>,
    inner: Prepared<T>,
    tag: EstimatorTag,
}

impl<'a, T: Real> NodeEstimator<'a, T> {
    pub fn new(ds: &'a TrialDataset<T>, kind: &EstimatorKind<T>) -> Result<Self> {
        let inner = match kind {
            EstimatorKind::Unadjusted { variance } => Prepared::Unadjusted(*variance),
            EstimatorKind::ModelStandardization { design, link, min_arm } => {
                let fixed = if design.has_data_dependent_terms() {
                    None
                } else {
                    let all: Vec<usize> = (0..ds.n()).collect();
                    let info = design.resolve(ds, &all)?;
                    let d = info.dim();
                    let n = ds.n();
                    let mut observed = vec![T::zero(); n * d];
                    let mut arm0 = vec![T::zero(); n * d];
                    let mut arm1 = vec![T::zero(); n * d];
                    for i in 0..n {
                        let x = ds.x(i);
                        info.fill_row(T::zero(), x, &mut arm0[i * d..(i + 1) * d]);
                        info.fill_row(T::one(), x, &mut arm1[i * d..(i + 1) * d]);
                        let src = if ds.a(i) == 1 { &arm1 } else { &arm0 };
                        observed[i * d..(i + 1) * d].copy_from_slice(&src[i * d..(i + 1) * d]);
                    }
                    // Nominal dummies are resolved per node, so only continuous designs are cached.
                    let nominal = design.terms.iter().any(|t| ds.kinds()[t.column].is_nominal());
                    (!nominal).then_some(FixedDesign { d, observed, arms: [arm0, arm1] })
                };
                Prepared::Ms { spec: design.clone(), link: *link, min_arm: *min_arm, fixed }
            }
            EstimatorKind::DataAdaptive(model) => Prepared::Da {
                m: [predictions(ds, model.as_ref(), 0)?, predictions(ds, model.as_ref(), 1)?],
            },
            EstimatorKind::GlobalMs(fit) => {
                let d = fit.dim();
                let n = ds.n();
                let mut arm0 = vec![T::zero(); n * d];
                let mut arm1 = vec![T::zero(); n * d];
                for i in 0..n {
                    fit.design.check_row(ds.x(i))?;
                    fit.design.fill_row(T::zero(), ds.x(i), &mut arm0[i * d..(i + 1) * d]);
                    fit.design.fill_row(T::one(), ds.x(i), &mut arm1[i * d..(i + 1) * d]);
                }
                Prepared::GlobalMs {
                    beta: fit.beta.clone(),
                    cov: fit.robust_cov.clone(),
                    link: fit.link,
                    design: FixedDesign { d, observed: Vec::new(), arms: [arm0, arm1] },
                }
            }
        };
        Ok(Self { ds, inner, tag: kind.tag() })
    }

    pub fn dataset(&self) -> &'a TrialDataset<T> {
        self.ds
    }

    pub fn tag(&self) -> EstimatorTag {
        self.tag
    }

    /// Both arm estimates over `rows`.
    pub fn arms(&self, rows: &[usize]) -> Result<[ArmEstimate<T>; 2]> {
        self.arms_warm(rows, &mut None)
    }

    /// As [`arms`](Self::arms); `warm` seeds and receives GLM coefficients
    /// so neighbouring candidate splits converge in fewer iterations.
    pub(crate) fn arms_warm(&self, rows: &[usize], warm: &mut Option<Vec<T>>) -> Result<[ArmEstimate<T>; 2]> {
        let ds = self.ds;
        match &self.inner {
            Prepared::Unadjusted(mode) => unadjusted_rows(ds, rows, *mode),
            Prepared::Da { m } => Ok([data_adaptive_rows(ds, rows, 0, &m[0])?, data_adaptive_rows(ds, rows, 1, &m[1])?]),
            Prepared::GlobalMs { beta, cov, link, design } => {
                if rows.is_empty() {
                    return Err(CaitError::NotEstimable("empty subgroup".into()));
                }
                let d = design.d;
                Ok([0u8, 1].map(|arm| {
                    let mat = &design.arms[arm as usize];
                    let (mu, var) =
                        standardized_mean(beta, cov, *link, rows.iter().map(|&i| &mat[i * d..(i + 1) * d]));
                    let n_arm = rows.iter().filter(|&&i| ds.a(i) == arm).count();
                    ArmEstimate { mu_hat: mu, var_hat: var, n_arm, method_used: EstimatorTag::GlobalMs }
                }))
            }
            Prepared::Ms { spec, link, min_arm, fixed } => {
                let n1 = rows.iter().filter(|&&i| ds.a(i) == 1).count();
                let n0 = rows.len() - n1;
                if n1 == 0 {
                    return Err(CaitError::EmptyArm(1));
                }
                if n0 == 0 {
                    return Err(CaitError::EmptyArm(0));
                }
                let fallback = || -> Result<[ArmEstimate<T>; 2]> {
                    let mut est = unadjusted_rows(ds, rows, VarianceMode::Pooled)?;
                    for e in &mut est {
                        e.method_used = EstimatorTag::MsFallback;
                    }
                    Ok(est)
                };
                if n0.min(n1) < *min_arm {
                    return fallback();
                }
                let fitted = match fixed {
                    Some(fd) => ms_fixed(ds, rows, fd, *link, warm.as_deref()),
                    None => ms_resolved(ds, rows, spec, *link),
                };
                match fitted {
                    Ok((est, beta)) => {
                        *warm = Some(beta);
                        Ok([0, 1].map(|a| ArmEstimate {
                            mu_hat: est[a].0,
                            var_hat: est[a].1,
                            n_arm: if a == 1 { n1 } else { n0 },
                            method_used: EstimatorTag::ModelStandardization,
                        }))
                    }
                    Err(_) => {
                        *warm = None;
                        fallback()
                    }
                }
            }
        }
    }

    pub fn arm(&self, rows: &[usize], arm: u8) -> Result<ArmEstimate<T>> {
        let arm = arm_of(arm)? as usize;
        let ds = self.ds;
        match &self.inner {
            // Single-arm queries only need that arm for the data-adaptive estimator.
            Prepared::Da { m } => data_adaptive_rows(ds, rows, arm as u8, &m[arm]),
            _ => Ok(self.arms(rows)?[arm]),
        }
    }

    /// Effect `mu_1 - mu_0` with variance `var_1 + var_0`.
    pub fn effect(&self, rows: &[usize]) -> Result<NodeEffect<T>> {
        self.effect_warm(rows, &mut None)
    }

    pub(crate) fn effect_warm(&self, rows: &[usize], warm: &mut Option<Vec<T>>) -> Result<NodeEffect<T>> {
        let n1 = rows.iter().filter(|&&i| self.ds.a(i) == 1).count();
        if n1 == 0 || n1 == rows.len() {
            return Err(CaitError::NotEstimable("subgroup lacks a treatment arm".into()));
        }
        let [e0, e1] = self.arms_warm(rows, warm).map_err(|e| match e {
            CaitError::EmptyArm(a) => CaitError::NotEstimable(format!("arm {a} empty")),
            other => other,
        })?;
        Ok(NodeEffect { effect: e1.mu_hat - e0.mu_hat, var: e1.var_hat + e0.var_hat })
    }
}

type MsOutput<T> = ([(T, T); 2], Vec<T>);

fn ms_fixed<T: Real>(
    ds: &TrialDataset<T>,
    rows: &[usize],
    fd: &FixedDesign<T>,
    link: Link,
    start: Option<&[T]>,
) -> Result<MsOutput<T>> {
    let d = fd.d;
    let sol = irls(&fd.observed, d, rows, ds.outcomes(), link, &IrlsOptions::default(), start)?;
    let est = [0usize, 1].map(|a| {
        let mat = &fd.arms[a];
        standardized_mean(&sol.beta, &sol.cov, link, rows.iter().map(|&i| &mat[i * d..(i + 1) * d]))
    });
    Ok((est, sol.beta))
}

fn ms_resolved<T: Real>(ds: &TrialDataset<T>, rows: &[usize], spec: &DesignSpec, link: Link) -> Result<MsOutput<T>> {
    let fit = crate::models::glm::fit_glm_rows(ds, rows, spec, link, &IrlsOptions::default())?;
    let d = fit.dim();
    let est = [0u8, 1].map(|a| {
        let mut mat = vec![T::zero(); rows.len() * d];
        for (k, &i) in rows.iter().enumerate() {
            fit.design.fill_row(T::from_count(a as usize), ds.x(i), &mut mat[k * d..(k + 1) * d]);
        }
        standardized_mean(&fit.beta, &fit.robust_cov, link, mat.chunks(d))
    });
    Ok((est, fit.beta))
}

/// Arm mean and pooled variance `s^2_pooled / n_l`.
pub fn mu_unadjusted<T: Real>(ds: &TrialDataset<T>, mask: &SubgroupMask, arm: u8) -> Result<ArmEstimate<T>> {
    let arm = arm_of(arm)?;
    if mask.count_arm(arm) == 0 {
        return Err(CaitError::EmptyArm(arm));
    }
    Ok(unadjusted_rows(ds, &mask.indices(), VarianceMode::Pooled)?[arm as usize])
}

/// Node-level GLM standardized over all members of `w`, falling back to the
/// unadjusted estimator when an arm has fewer than `min_arm` rows or the fit fails.
pub fn mu_model_standardization<T: Real>(
    ds: &TrialDataset<T>,
    mask: &SubgroupMask,
    arm: u8,
    design: &DesignSpec,
    link: Link,
    min_arm: usize,
) -> Result<ArmEstimate<T>> {
    let kind = EstimatorKind::ModelStandardization { design: design.clone(), link, min_arm };
    NodeEstimator::new(ds, &kind)?.arm(&mask.indices(), arm)
}

/// Standardization with coefficients fit once on the full dataset.
pub fn mu_global_ms<T: Real>(
    ds: &TrialDataset<T>,
    mask: &SubgroupMask,
    arm: u8,
    global_fit: &GlmFit<T>,
) -> Result<ArmEstimate<T>> {
    let arm = arm_of(arm)? as usize;
    let d = global_fit.dim();
    let rows = mask.indices();
    let mut mat = vec![T::zero(); rows.len() * d];
    for (k, &i) in rows.iter().enumerate() {
        global_fit.design.check_row(ds.x(i))?;
        global_fit.design.fill_row(T::from_count(arm), ds.x(i), &mut mat[k * d..(k + 1) * d]);
    }
    let (mu, var) = standardized_mean(&global_fit.beta, &global_fit.robust_cov, global_fit.link, mat.chunks(d));
    Ok(ArmEstimate { mu_hat: mu, var_hat: var, n_arm: mask.count_arm(arm as u8), method_used: EstimatorTag::GlobalMs })
}

/// Unadjusted mean minus the mean-zero augmentation built from `model`.
pub fn mu_data_adaptive<T: Real>(
    ds: &TrialDataset<T>,
    mask: &SubgroupMask,
    arm: u8,
    model: &dyn ConditionalMean<T>,
) -> Result<ArmEstimate<T>> {
    let arm = arm_of(arm)?;
    let rows = mask.indices();
    let mut m = vec![T::zero(); ds.n()];
    for &i in &rows {
        m[i] = model.predict(arm, ds.x(i))?;
    }
    data_adaptive_rows(ds, &rows, arm, &m)
}

pub fn node_effect<T: Real>(ds: &TrialDataset<T>, mask: &SubgroupMask, kind: &EstimatorKind<T>) -> Result<NodeEffect<T>> {
    NodeEstimator::new(ds, kind)?.effect(&mask.indices())
}
