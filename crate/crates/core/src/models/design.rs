//! Covariate design specifications and their resolved bases.
//!
//! A [`DesignSpec`] names terms by source column; resolving it against
//! the rows a model is fit on fixes everything data-dependent (spline
//! knots, dummy levels) into a [`DesignInfo`] that maps `(a, x)` to a
//! design row `(1, a, basis...)`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{ColumnKind, TrialDataset};
use crate::error::{CaitError, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "transform", rename_all = "snake_case")]
pub enum Transform {
    Linear,
    Exp,
    /// Natural cubic spline with `df` columns.
    Spline { df: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Term {
    pub column: usize,
    #[serde(flatten)]
    pub transform: Transform,
    /// Multiply the term by the treatment indicator.
    #[serde(default)]
    pub by_treatment: bool,
}

impl Term {
    pub fn linear(column: usize) -> Self {
        Self { column, transform: Transform::Linear, by_treatment: false }
    }

    pub fn exp(column: usize) -> Self {
        Self { column, transform: Transform::Exp, by_treatment: false }
    }

    pub fn spline(column: usize, df: usize) -> Self {
        Self { column, transform: Transform::Spline { df }, by_treatment: false }
    }

    pub fn times_treatment(mut self) -> Self {
        self.by_treatment = true;
        self
    }
}

/// Terms entering the linear predictor after the intercept and treatment.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub terms: Vec<Term>,
}

impl DesignSpec {
    /// Intercept and treatment only.
    pub fn treatment_only() -> Self {
        Self::default()
    }

    pub fn main_effects(columns: impl IntoIterator<Item = usize>) -> Self {
        Self { terms: columns.into_iter().map(Term::linear).collect() }
    }

    pub fn splines(columns: impl IntoIterator<Item = usize>, df: usize) -> Self {
        Self { terms: columns.into_iter().map(|c| Term::spline(c, df)).collect() }
    }

    pub fn with(mut self, term: Term) -> Self {
        self.terms.push(term);
        self
    }

    pub fn has_data_dependent_terms(&self) -> bool {
        self.terms
            .iter()
            .any(|t| matches!(t.transform, Transform::Spline { df } if df > 1))
    }

    /// Fix knots and dummy levels from `rows` of `ds`.
    pub fn resolve<T: Real>(&self, ds: &TrialDataset<T>, rows: &[usize]) -> Result<DesignInfo<T>> {
        let mut columns = Vec::new();
        for term in &self.terms {
            if term.column >= ds.p() {
                return Err(CaitError::InvalidParameter(format!(
                    "design term refers to column {} but the dataset has {}",
                    term.column,
                    ds.p()
                )));
            }
            let kind = &ds.kinds()[term.column];
            let mut push = |basis: Basis<T>| {
                columns.push(BasisColumn { column: term.column, basis, by_treatment: term.by_treatment })
            };
            if kind.is_nominal() {
                // Dummy-code the levels present in the fitting rows, first present level as reference.
                let k = kind.levels().map_or(0, |l| l.len());
                let mut present = vec![false; k];
                for &i in rows {
                    if let Some(c) = ds.value(i, term.column).to_usize() {
                        present[c] = true;
                    }
                }
                for code in present.iter().enumerate().filter(|(_, &p)| p).map(|(c, _)| c).skip(1) {
                    push(Basis::Dummy(code));
                }
                continue;
            }
            match term.transform {
                Transform::Linear => push(Basis::Identity),
                Transform::Exp => push(Basis::Exp),
                Transform::Spline { df } => {
                    if df == 0 {
                        return Err(CaitError::InvalidParameter("spline df must be at least 1".into()));
                    }
                    if matches!(kind, ColumnKind::Ordinal(_)) || df == 1 {
                        push(Basis::Identity);
                        continue;
                    }
                    let values: Vec<T> = rows.iter().map(|&i| ds.value(i, term.column)).collect();
                    let knots = NaturalSpline::quantile_knots(&values, df)?;
                    let spline = Arc::new(knots);
                    for index in 0..spline.n_columns() {
                        push(Basis::Spline { spline: spline.clone(), index });
                    }
                }
            }
        }
        Ok(DesignInfo { columns, n_source: ds.p() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Basis<T> {
    Identity,
    Exp,
    Dummy(usize),
    Spline { spline: Arc<NaturalSpline<T>>, index: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisColumn<T> {
    pub column: usize,
    pub basis: Basis<T>,
    pub by_treatment: bool,
}

/// A resolved design: `(1, a, columns...)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignInfo<T> {
    pub columns: Vec<BasisColumn<T>>,
    pub n_source: usize,
}

impl<T: Real> DesignInfo<T> {
    /// Length of a design row, intercept and treatment included.
    pub fn dim(&self) -> usize {
        2 + self.columns.len()
    }

    pub fn check_row(&self, x: &[T]) -> Result<()> {
        if x.len() != self.n_source {
            return Err(CaitError::Shape { expected: self.n_source, got: x.len() });
        }
        Ok(())
    }

    /// Write the design row for treatment `a` and covariates `x` into `out`.
    pub fn fill_row(&self, a: T, x: &[T], out: &mut [T]) {
        out[0] = T::one();
        out[1] = a;
        for (slot, col) in out[2..].iter_mut().zip(&self.columns) {
            let v = x[col.column];
            let b = match &col.basis {
                Basis::Identity => v,
                Basis::Exp => v.exp(),
                Basis::Dummy(code) => {
                    if v.to_usize() == Some(*code) {
                        T::one()
                    } else {
                        T::zero()
                    }
                }
                Basis::Spline { spline, index } => spline.eval(v, *index),
            };
            *slot = if col.by_treatment { a * b } else { b };
        }
    }

    pub fn row(&self, a: T, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim()];
        self.fill_row(a, x, &mut out);
        out
    }

    /// Whether design rows change with the treatment beyond column 1.
    pub fn has_interactions(&self) -> bool {
        self.columns.iter().any(|c| c.by_treatment)
    }
}

/// Natural cubic spline basis in the truncated-power form.
///
/// With knots `k_1 < ... < k_K` the basis is `u` followed by
/// `d_j(u) - d_{K-1}(u)` for `j = 1..K-2`, where
/// `d_j(u) = ((u - k_j)_+^3 - (u - k_K)_+^3) / (k_K - k_j)`, giving `K - 1`
/// columns that are linear beyond the boundary knots. The variable is
/// rescaled to `u = (x - k_1) / (k_K - k_1)` for conditioning, which
/// leaves the spanned space unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalSpline<T> {
    lo: T,
    width: T,
    /// Knots on the unit scale, boundary knots included.
    knots: Vec<T>,
}

impl<T: Real> NaturalSpline<T> {
    /// Boundary knots at the extremes, `df - 1` interior knots at the
    /// `j / df` quantiles (linear interpolation between order statistics).
    pub fn quantile_knots(values: &[T], df: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(CaitError::SingularDesign);
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite covariates"));
        let m = sorted.len();
        let quantile = |prob: f64| -> T {
            let h = prob * (m - 1) as f64;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(m - 1);
            let frac = T::lit(h - lo as f64);
            sorted[lo] + (sorted[hi] - sorted[lo]) * frac
        };
        let mut knots: Vec<T> = (0..=df).map(|j| quantile(j as f64 / df as f64)).collect();
        knots.dedup();
        if knots.len() < 2 {
            return Err(CaitError::SingularDesign);
        }
        Self::from_knots(&knots)
    }

    pub fn from_knots(knots: &[T]) -> Result<Self> {
        let lo = knots[0];
        let hi = *knots.last().expect("non-empty");
        let width = hi - lo;
        if !(width > T::zero()) || knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(CaitError::InvalidParameter("spline knots must be strictly increasing".into()));
        }
        let knots = knots.iter().map(|&k| (k - lo) / width).collect();
        Ok(Self { lo, width, knots })
    }

    pub fn n_columns(&self) -> usize {
        self.knots.len() - 1
    }

    /// Knots on the original scale.
    pub fn knots(&self) -> Vec<T> {
        self.knots.iter().map(|&k| self.lo + k * self.width).collect()
    }

    pub fn eval(&self, x: T, index: usize) -> T {
        let u = (x - self.lo) / self.width;
        if index == 0 {
            return u;
        }
        let k = self.knots.len();
        let last = self.knots[k - 1];
        let cube = |v: T| {
            let c = v.max(T::zero());
            c * c * c
        };
        let d = |j: usize| (cube(u - self.knots[j]) - cube(u - last)) / (last - self.knots[j]);
        d(index - 1) - d(k - 2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::OutcomeKind;

    fn toy(n: usize) -> TrialDataset<f64> {
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin() * 2.0).collect();
        let a = (0..n).map(|i| (i % 2) as u8).collect();
        TrialDataset::from_continuous(vec![0.0; n], a, x, 1, OutcomeKind::Continuous).unwrap()
    }

    #[test]
    fn df3_design_has_five_columns() {
        let ds = toy(40);
        let rows: Vec<usize> = (0..40).collect();
        let info = DesignSpec::splines([0], 3).resolve(&ds, &rows).unwrap();
        assert_eq!(info.dim(), 1 + 1 + 3);
    }

    #[test]
    fn basis_is_linear_beyond_boundary() {
        let s = NaturalSpline::from_knots(&[0.0, 1.0, 2.0, 4.0]).unwrap();
        for idx in 0..s.n_columns() {
            let f = |x: f64| s.eval(x, idx);
            // Second differences vanish outside [0, 4].
            for &x0 in &[-3.0, 5.0, 8.0] {
                let sd = f(x0 + 1.0) - 2.0 * f(x0) + f(x0 - 1.0);
                assert!(sd.abs() < 1e-10, "column {idx} curved at {x0}: {sd}");
            }
        }
    }

    #[test]
    fn knots_reproducible() {
        let ds = toy(60);
        let rows: Vec<usize> = (0..60).collect();
        let a = DesignSpec::splines([0], 3).resolve(&ds, &rows).unwrap();
        let b = DesignSpec::splines([0], 3).resolve(&ds, &rows).unwrap();
        assert_eq!(a, b);
        for i in 0..60 {
            assert_eq!(a.row(1.0, ds.x(i)), b.row(1.0, ds.x(i)));
        }
    }

    #[test]
    fn interaction_term_zero_in_control_arm() {
        let ds = toy(10);
        let rows: Vec<usize> = (0..10).collect();
        let info = DesignSpec::main_effects([0])
            .with(Term::linear(0).times_treatment())
            .resolve(&ds, &rows)
            .unwrap();
        let r0 = info.row(0.0, &[1.5]);
        let r1 = info.row(1.0, &[1.5]);
        assert_eq!(r0, vec![1.0, 0.0, 1.5, 0.0]);
        assert_eq!(r1, vec![1.0, 1.0, 1.5, 1.5]);
    }
}
