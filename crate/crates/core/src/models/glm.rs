//! Canonical-link GLMs fit by iteratively reweighted least squares, with an
//! HC0 sandwich covariance for the coefficients.

use serde::{Deserialize, Serialize};

use super::design::{DesignInfo, DesignSpec};
use crate::data::{SubgroupMask, TrialDataset};
use crate::error::{CaitError, Result};
use crate::linalg::{fill_upper, matmul, syr_lower, Cholesky};
use crate::scalar::{expit, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Identity,
    Logit,
}

impl Link {
    #[inline]
    pub fn inverse<T: Real>(self, eta: T) -> T {
        match self {
            Link::Identity => eta,
            Link::Logit => expit(eta),
        }
    }

    /// `dh/deta`, which for a canonical link is also the variance function at `h(eta)`.
    #[inline]
    pub fn inverse_deriv<T: Real>(self, eta: T) -> T {
        match self {
            Link::Identity => T::one(),
            Link::Logit => {
                let mu = expit(eta);
                mu * (T::one() - mu)
            }
        }
    }

    /// `(h(eta), h'(eta))` with a single evaluation of the inverse link.
    #[inline]
    pub fn inverse_with_deriv<T: Real>(self, eta: T) -> (T, T) {
        match self {
            Link::Identity => (eta, T::one()),
            Link::Logit => {
                let mu = expit(eta);
                (mu, mu * (T::one() - mu))
            }
        }
    }

    fn deviance<T: Real>(self, y: T, mu: T) -> T {
        match self {
            Link::Identity => (y - mu) * (y - mu),
            Link::Logit if y == T::one() => -(mu.ln() + mu.ln()),
            Link::Logit if y == T::zero() => {
                let l = (T::one() - mu).ln();
                -(l + l)
            }
            Link::Logit => {
                let two = T::lit(2.0);
                let term = |obs: T, fit: T| {
                    if obs > T::zero() {
                        obs * (obs / fit).ln()
                    } else {
                        T::zero()
                    }
                };
                two * (term(y, mu) + term(T::one() - y, T::one() - mu))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrlsOptions {
    pub max_iter: usize,
    /// Relative deviance change that counts as converged.
    pub tol: f64,
    /// Ridge added to the weighted normal equations, relative to their mean diagonal.
    pub jitter: f64,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        Self { max_iter: 25, tol: 1e-8, jitter: 1e-10 }
    }
}

const SINGULAR_TOL: f64 = 1e-9;

/// Coefficients and their robust covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct IrlsSolution<T> {
    pub beta: Vec<T>,
    /// Row-major `d x d` HC0 sandwich.
    pub cov: Vec<T>,
    pub n_iter: usize,
}

/// IRLS on the rows `rows` of a row-major design `x` with `d` columns.
pub fn irls<T: Real>(
    x: &[T],
    d: usize,
    rows: &[usize],
    y: &[T],
    link: Link,
    opts: &IrlsOptions,
    start: Option<&[T]>,
) -> Result<IrlsSolution<T>> {
    if rows.len() < d {
        return Err(CaitError::SingularDesign);
    }
    let jitter = T::lit(opts.jitter);
    let sing = T::lit(SINGULAR_TOL);
    let mut xtwx = vec![T::zero(); d * d];
    let mut xtwz = vec![T::zero(); d];

    let (beta, chol, n_iter) = match link {
        Link::Identity => {
            for &i in rows {
                let xi = &x[i * d..(i + 1) * d];
                syr_lower(&mut xtwx, xi, T::one());
                for (acc, &v) in xtwz.iter_mut().zip(xi) {
                    *acc += v * y[i];
                }
            }
            fill_upper(&mut xtwx, d);
            let chol = Cholesky::factor(&xtwx, d, jitter, sing)?;
            (chol.solve_refined(&xtwx, &xtwz), chol, 1)
        }
        Link::Logit => {
            let tol = T::tol(opts.tol);
            let mut beta = match start {
                Some(s) if s.len() == d => s.to_vec(),
                _ => {
                    let mean = rows.iter().map(|&i| y[i]).sum::<T>() / T::from_count(rows.len());
                    let clamp = T::lit(1e-6);
                    let m = mean.max(clamp).min(T::one() - clamp);
                    let mut b = vec![T::zero(); d];
                    b[0] = (m / (T::one() - m)).ln();
                    b
                }
            };
            // One pass at `b`: deviance, weighted normal equations for the
            // next Newton step, and the fitted means (kept for the sandwich).
            let mut mus = vec![T::zero(); rows.len()];
            let pass = |b: &[T], xtwx: &mut [T], xtwz: &mut [T], mus: &mut [T]| -> (T, bool) {
                xtwx.iter_mut().for_each(|v| *v = T::zero());
                xtwz.iter_mut().for_each(|v| *v = T::zero());
                let edge = T::epsilon() * T::lit(10.0);
                let mut dev = T::zero();
                let mut separated = false;
                for (k, &i) in rows.iter().enumerate() {
                    let xi = &x[i * d..(i + 1) * d];
                    let eta: T = xi.iter().zip(b).map(|(&a, &c)| a * c).sum();
                    let mu = expit(eta);
                    mus[k] = mu;
                    dev += Link::Logit.deviance(y[i], mu);
                    separated |= mu < edge || mu > T::one() - edge;
                    let w = (mu * (T::one() - mu)).max(T::epsilon());
                    syr_lower(xtwx, xi, w);
                    let wz = w * eta + (y[i] - mu);
                    for (acc, &v) in xtwz.iter_mut().zip(xi) {
                        *acc += v * wz;
                    }
                }
                fill_upper(xtwx, d);
                (dev, separated)
            };
            let (mut dev_old, mut separated) = pass(&beta, &mut xtwx, &mut xtwz, &mut mus);
            let mut next_xtwx = vec![T::zero(); d * d];
            let mut next_xtwz = vec![T::zero(); d];
            let mut next_mus = vec![T::zero(); rows.len()];
            let mut converged = None;
            for iter in 1..=opts.max_iter {
                let chol = Cholesky::factor(&xtwx, d, jitter, sing)?;
                let mut candidate = chol.solve(&xtwz);
                let (mut dev, mut sep) = pass(&candidate, &mut next_xtwx, &mut next_xtwz, &mut next_mus);
                // Step halving when the Newton step overshoots.
                let mut halvings = 0;
                while (!dev.is_finite() || dev > dev_old * (T::one() + tol)) && halvings < 20 {
                    for (c, &b) in candidate.iter_mut().zip(&beta) {
                        *c = (*c + b) * T::lit(0.5);
                    }
                    (dev, sep) = pass(&candidate, &mut next_xtwx, &mut next_xtwz, &mut next_mus);
                    halvings += 1;
                }
                if !dev.is_finite() {
                    return Err(CaitError::NoConvergence(iter));
                }
                beta = candidate;
                std::mem::swap(&mut xtwx, &mut next_xtwx);
                std::mem::swap(&mut xtwz, &mut next_xtwz);
                std::mem::swap(&mut mus, &mut next_mus);
                separated = sep;
                let rel = (dev - dev_old).abs() / (dev.abs() + T::lit(0.1));
                dev_old = dev;
                if rel < tol {
                    converged = Some(iter);
                    break;
                }
            }
            let n_iter = converged.ok_or(CaitError::NoConvergence(opts.max_iter))?;
            // Fitted probabilities pinned at 0 or 1 mean the data are separated.
            if separated {
                return Err(CaitError::NoConvergence(n_iter));
            }
            let chol = Cholesky::factor(&xtwx, d, jitter, sing)?;
            let mut meat = vec![T::zero(); d * d];
            for (k, &i) in rows.iter().enumerate() {
                let r = y[i] - mus[k];
                syr_lower(&mut meat, &x[i * d..(i + 1) * d], r * r);
            }
            fill_upper(&mut meat, d);
            return Ok(sandwich(beta, &chol, &meat, d, n_iter));
        }
    };

    // Meat: sum of outer products of per-row score contributions.
    let mut meat = vec![T::zero(); d * d];
    for &i in rows {
        let xi = &x[i * d..(i + 1) * d];
        let eta: T = xi.iter().zip(&beta).map(|(&a, &c)| a * c).sum();
        let r = y[i] - link.inverse(eta);
        syr_lower(&mut meat, xi, r * r);
    }
    fill_upper(&mut meat, d);
    Ok(sandwich(beta, &chol, &meat, d, n_iter))
}

fn sandwich<T: Real>(beta: Vec<T>, bread: &Cholesky<T>, meat: &[T], d: usize, n_iter: usize) -> IrlsSolution<T> {
    let inv = bread.inverse();
    let mut cov = matmul(&matmul(&inv, meat, d), &inv, d);
    crate::linalg::symmetrize(&mut cov, d);
    IrlsSolution { beta, cov, n_iter }
}

/// A fitted GLM `h(b0 + b1 a + b2' basis(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlmFit<T> {
    pub beta: Vec<T>,
    pub link: Link,
    /// HC0 sandwich estimate of `Var(beta)`, row-major.
    pub robust_cov: Vec<T>,
    pub converged: bool,
    pub n_iter: usize,
    pub design: DesignInfo<T>,
    pub n_obs: usize,
}

impl<T: Real> GlmFit<T> {
    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    pub fn linear_predictor(&self, a: u8, x: &[T]) -> Result<T> {
        self.design.check_row(x)?;
        let row = self.design.row(T::from_count(a as usize), x);
        Ok(row.iter().zip(&self.beta).map(|(&r, &b)| r * b).sum())
    }
}

/// Solve the score equations restricted to the rows of `mask`.
pub fn fit_glm<T: Real>(
    ds: &TrialDataset<T>,
    mask: &SubgroupMask,
    design: &DesignSpec,
    link: Link,
) -> Result<GlmFit<T>> {
    fit_glm_rows(ds, &mask.indices(), design, link, &IrlsOptions::default())
}

pub fn fit_glm_rows<T: Real>(
    ds: &TrialDataset<T>,
    rows: &[usize],
    design: &DesignSpec,
    link: Link,
    opts: &IrlsOptions,
) -> Result<GlmFit<T>> {
    let n1 = rows.iter().filter(|&&i| ds.a(i) == 1).count();
    if n1 == 0 || n1 == rows.len() {
        return Err(CaitError::NotEstimable("GLM needs both arms in the subgroup".into()));
    }
    let info = design.resolve(ds, rows)?;
    let d = info.dim();
    let m = rows.len();
    let mut x = vec![T::zero(); m * d];
    let mut y = Vec::with_capacity(m);
    for (k, &i) in rows.iter().enumerate() {
        info.fill_row(T::from_count(ds.a(i) as usize), ds.x(i), &mut x[k * d..(k + 1) * d]);
        y.push(ds.y(i));
    }
    let local: Vec<usize> = (0..m).collect();
    let sol = irls(&x, d, &local, &y, link, opts, None)?;
    Ok(GlmFit {
        beta: sol.beta,
        link,
        robust_cov: sol.cov,
        converged: true,
        n_iter: sol.n_iter,
        design: info,
        n_obs: m,
    })
}

/// `h(b0 + b1 a + b2' x)`.
pub fn predict_glm<T: Real>(fit: &GlmFit<T>, a: u8, x: &[T]) -> Result<T> {
    Ok(fit.link.inverse(fit.linear_predictor(a, x)?))
}

/// Model standardization average over design rows at a fixed arm, with its
/// delta-method variance `G V G' + (1/m^2) sum (h_i - mu)^2`.
pub fn standardized_mean<'a, T: Real>(
    beta: &[T],
    cov: &[T],
    link: Link,
    arm_rows: impl Iterator<Item = &'a [T]>,
) -> (T, T) {
    let d = beta.len();
    let mut g = vec![T::zero(); d];
    // Welford running mean and sum of squared deviations of the predictions.
    let mut mean = T::zero();
    let mut m2 = T::zero();
    let mut m = 0usize;
    for row in arm_rows {
        let eta: T = row.iter().zip(beta).map(|(&r, &b)| r * b).sum();
        let (h, deriv) = link.inverse_with_deriv(eta);
        for (gk, &r) in g.iter_mut().zip(row) {
            *gk += deriv * r;
        }
        m += 1;
        let delta = h - mean;
        mean += delta / T::from_count(m);
        m2 += delta * (h - mean);
    }
    let mf = T::from_count(m);
    g.iter_mut().for_each(|v| *v /= mf);
    let var = crate::linalg::quad_form(cov, &g) + m2 / (mf * mf);
    (mean, var.max(T::zero()))
}
