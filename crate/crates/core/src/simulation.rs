//! Simulation designs for the method's operating characteristics: the
//! data-generating processes, true ITEs, evaluation measures, and a seeded
//! Monte Carlo driver.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ColumnKind, OutcomeKind, TrialDataset};
use crate::error::{CaitError, Result};
use crate::models::{DesignSpec, ForestParams, Term};
use crate::pipeline::{run_cait, EstimatorSpec, SelectionConfig};
use crate::pruning::{FoldPlan, ForestOracle, SelectionMethod, DEFAULT_FOLDS, DEFAULT_LAMBDA};
use crate::scalar::{expit, Real};
use crate::tree::{GrowthConstraints, Tree};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectKind {
    Heterogeneous,
    Homogeneous,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimSetting {
    pub outcome_kind: OutcomeKind,
    pub effect_kind: EffectKind,
    pub n_train: usize,
    pub n_test: usize,
    pub p: usize,
    pub cov_offdiag: f64,
}

impl SimSetting {
    pub fn continuous(effect_kind: EffectKind, n_train: usize) -> Self {
        Self { outcome_kind: OutcomeKind::Continuous, effect_kind, n_train, n_test: 1000, p: 5, cov_offdiag: 0.3 }
    }

    pub fn binary(effect_kind: EffectKind) -> Self {
        Self { outcome_kind: OutcomeKind::Binary, effect_kind, n_train: 1000, n_test: 1000, p: 5, cov_offdiag: 0.3 }
    }

    pub fn id(&self) -> String {
        let outcome = match self.outcome_kind {
            OutcomeKind::Continuous => "continuous",
            OutcomeKind::Binary => "binary",
        };
        let effect = match self.effect_kind {
            EffectKind::Heterogeneous => "heterogeneous",
            EffectKind::Homogeneous => "homogeneous",
        };
        format!("{outcome}-{effect}-n{}", self.n_train)
    }

    pub fn heterogeneous(&self) -> bool {
        self.effect_kind == EffectKind::Heterogeneous
    }

    fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(CaitError::InvalidParameter("n_train and n_test must be at least 1".into()));
        }
        if self.p < 2 {
            return Err(CaitError::InvalidParameter("the designs use at least two covariates".into()));
        }
        Ok(())
    }
}

/// `E[Y | A, X]` for a setting; `a` may be fractional for probabilities.
pub fn conditional_mean(setting: &SimSetting, a: f64, x: &[f64]) -> f64 {
    let ind = if x[0] < 0.0 { 1.0 } else { 0.0 };
    match (setting.outcome_kind, setting.effect_kind) {
        (OutcomeKind::Continuous, EffectKind::Heterogeneous) => 2.0 + 2.0 * x[0] + 2.0 * a * ind + x[1].exp(),
        (OutcomeKind::Continuous, EffectKind::Homogeneous) => 2.0 + 2.0 * a + 2.0 * x[0] + x[1].exp(),
        (OutcomeKind::Binary, EffectKind::Heterogeneous) => 0.1 + 0.3 * a * ind + 0.3 * expit(x[1]),
        (OutcomeKind::Binary, EffectKind::Homogeneous) => 0.1 + 0.3 * expit(x[1]),
    }
}

/// `alpha(x) = E[Y | A = 1, x] - E[Y | A = 0, x]`.
pub fn true_ite<T: Real>(setting: &SimSetting, x: &[T]) -> Result<T> {
    if x.len() != setting.p {
        return Err(CaitError::Shape { expected: setting.p, got: x.len() });
    }
    let below = x[0] < T::zero();
    let v = match (setting.outcome_kind, setting.effect_kind) {
        (OutcomeKind::Continuous, EffectKind::Heterogeneous) => 2.0 * below as u8 as f64,
        (OutcomeKind::Continuous, EffectKind::Homogeneous) => 2.0,
        (OutcomeKind::Binary, EffectKind::Heterogeneous) => 0.3 * below as u8 as f64,
        (OutcomeKind::Binary, EffectKind::Homogeneous) => 0.0,
    };
    Ok(T::lit(v))
}

/// Handle on a setting's true ITE function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrueIte(pub SimSetting);

impl TrueIte {
    pub fn ite<T: Real>(&self, x: &[T]) -> T {
        true_ite(&self.0, x).expect("row width matches the setting")
    }
}

/// Lower Cholesky factor of the equicorrelated covariance.
fn covariance_factor(p: usize, rho: f64) -> Result<Vec<f64>> {
    let sigma: Vec<f64> = (0..p * p).map(|k| if k / p == k % p { 1.0 } else { rho }).collect();
    let mut l = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..=i {
            let mut s = sigma[i * p + j];
            for k in 0..j {
                s -= l[i * p + k] * l[j * p + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return Err(CaitError::InvalidParameter(format!("correlation {rho} is not positive definite")));
                }
                l[i * p + j] = s.sqrt();
            } else {
                l[i * p + j] = s / l[j * p + j];
            }
        }
    }
    Ok(l)
}

/// Draw `n` rows `(x, a, y)` from a setting's design.
fn draw<T: Real>(setting: &SimSetting, n: usize, factor: &[f64], rng: &mut ChaCha8Rng) -> Result<TrialDataset<T>> {
    let p = setting.p;
    let mut xs = Vec::with_capacity(n * p);
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut z = vec![0.0f64; p];
    let mut x = vec![0.0f64; p];
    for _ in 0..n {
        z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        for i in 0..p {
            x[i] = (0..=i).map(|k| factor[i * p + k] * z[k]).sum();
        }
        let arm = rng.random_bool(0.5) as u8;
        let mean = conditional_mean(setting, arm as f64, &x);
        let yi = match setting.outcome_kind {
            OutcomeKind::Continuous => mean + rng.sample::<f64, _>(StandardNormal),
            OutcomeKind::Binary => rng.random_bool(mean.clamp(0.0, 1.0)) as u8 as f64,
        };
        xs.extend(x.iter().map(|&v| T::lit(v)));
        a.push(arm);
        y.push(T::lit(yi));
    }
    TrialDataset::new(
        y,
        a,
        xs,
        (1..=p).map(|j| format!("x{j}")).collect(),
        vec![ColumnKind::Continuous; p],
        setting.outcome_kind,
    )
}

/// Training and test samples for `setting`, deterministic in `seed`.
pub fn gen_data<T: Real>(setting: &SimSetting, seed: u64) -> Result<(TrialDataset<T>, TrialDataset<T>, TrueIte)> {
    setting.validate()?;
    let factor = covariance_factor(setting.p, setting.cov_offdiag)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = draw(setting, setting.n_train, &factor, &mut rng)?;
    let test = draw(setting, setting.n_test, &factor, &mut rng)?;
    Ok((train, test, TrueIte(*setting)))
}

/// Draw a single sample of `n` rows.
pub fn gen_sample<T: Real>(setting: &SimSetting, n: usize, seed: u64) -> Result<TrialDataset<T>> {
    let factor = covariance_factor(setting.p, setting.cov_offdiag)?;
    draw(setting, n, &factor, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Mean of `(tree(x) - alpha(x))^2` over the test rows.
pub fn eval_mse<T: Real>(tree: &Tree<T>, test: &TrialDataset<T>, truth: &TrueIte) -> Result<f64> {
    if test.n() == 0 {
        return Err(CaitError::InvalidParameter("empty test set".into()));
    }
    let mut sse = 0.0;
    for i in 0..test.n() {
        let d = (tree.predict_row(test.x(i))? - true_ite(&truth.0, test.x(i))?).as_f64();
        sse += d * d;
    }
    Ok(sse / test.n() as f64)
}

/// Root only for homogeneous designs; exactly one split, on the first
/// covariate, for heterogeneous ones.
pub fn eval_correct_tree<T: Real>(tree: &Tree<T>, setting: &SimSetting) -> bool {
    if !setting.heterogeneous() {
        return tree.is_root_only();
    }
    tree.n_internal() == 1 && tree.root().split.as_ref().is_some_and(|r| r.column() == 0)
}

/// Internal nodes splitting on a covariate unrelated to the effect.
pub fn eval_noise_splits<T: Real>(tree: &Tree<T>, setting: &SimSetting) -> usize {
    tree.nodes()
        .filter_map(|n| n.split.as_ref())
        .filter(|r| !setting.heterogeneous() || r.column() != 0)
        .count()
}

/// Which estimator and model specification a simulated method uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    Unadjusted,
    /// Node GLM with main effects of every covariate.
    Ms,
    /// Node GLM containing the true mean structure.
    TrueMs,
    /// Spline-additive model (df 3) of every covariate.
    Da,
    /// Spline-additive model with the true structure, including arm-specific x1 terms.
    TrueDa,
}

pub const SPLINE_DF: usize = 3;

impl ModelVariant {
    pub fn label(&self) -> &'static str {
        match self {
            ModelVariant::Unadjusted => "Unad CAIT",
            ModelVariant::Ms => "MS CAIT",
            ModelVariant::TrueMs => "True MS CAIT",
            ModelVariant::Da => "DA CAIT",
            ModelVariant::TrueDa => "True DA CAIT",
        }
    }

    pub fn estimator_spec(&self, setting: &SimSetting) -> EstimatorSpec {
        let p = setting.p;
        let het = setting.heterogeneous();
        match self {
            ModelVariant::Unadjusted => EstimatorSpec::unadjusted(),
            ModelVariant::Ms => EstimatorSpec::ms(DesignSpec::main_effects(0..p)),
            ModelVariant::TrueMs => {
                let mut d = DesignSpec::main_effects([0]).with(Term::exp(1));
                if het {
                    d = d.with(Term::linear(0).times_treatment());
                }
                EstimatorSpec::ms(d)
            }
            ModelVariant::Da => EstimatorSpec::da_glm(DesignSpec::splines(0..p, SPLINE_DF)),
            ModelVariant::TrueDa => {
                let mut d = DesignSpec::default().with(Term::spline(0, SPLINE_DF));
                if het {
                    d = d.with(Term::spline(0, SPLINE_DF).times_treatment());
                }
                EstimatorSpec::da_glm(d.with(Term::spline(1, SPLINE_DF)))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MethodSpec {
    pub variant: ModelVariant,
    pub selection: SelectionMethod,
}

impl MethodSpec {
    pub fn new(variant: ModelVariant, selection: SelectionMethod) -> Self {
        Self { variant, selection }
    }

    pub fn label(&self) -> String {
        let sel = match self.selection {
            SelectionMethod::Fts1 => "FTS-1",
            SelectionMethod::Fts2 => "FTS-2",
        };
        format!("{} {sel}", self.variant.label())
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

fn crossed(variants: &[ModelVariant]) -> Vec<MethodSpec> {
    [SelectionMethod::Fts1, SelectionMethod::Fts2]
        .iter()
        .flat_map(|&s| variants.iter().map(move |&v| MethodSpec::new(v, s)))
        .collect()
}

/// The ten CAIT rows: five estimator/model variants under each selection rule.
pub fn table1_methods() -> Vec<MethodSpec> {
    use ModelVariant::*;
    crossed(&[Unadjusted, Ms, TrueMs, Da, TrueDa])
}

/// Unadjusted, MS and DA under each selection rule.
pub fn binary_methods() -> Vec<MethodSpec> {
    use ModelVariant::*;
    crossed(&[Unadjusted, Ms, Da])
}

/// Tuning shared by every replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub constraints: GrowthConstraints,
    pub lambda: f64,
    /// Validation share for FTS-1 (100 of 500 rows).
    pub valid_frac: f64,
    pub folds: usize,
    /// Oracle forest; `None` uses regression defaults.
    pub forest: Option<ForestParams>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            constraints: GrowthConstraints::default(),
            lambda: DEFAULT_LAMBDA,
            valid_frac: 0.2,
            folds: DEFAULT_FOLDS,
            forest: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRecord {
    pub setting: String,
    pub method: String,
    pub rep: usize,
    pub seed: u64,
    pub mse: Option<f64>,
    pub correct: Option<bool>,
    pub noise_splits: Option<usize>,
    pub n_internal: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub setting: String,
    pub method: String,
    pub n_ok: usize,
    pub n_failed: usize,
    pub mean_mse: f64,
    pub median_mse: f64,
    pub prop_correct: f64,
    pub mean_noise_splits: f64,
    /// Share of fits that stopped at the root; informational only.
    pub prop_root: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub records: Vec<SimRecord>,
    pub aggregates: Vec<Aggregate>,
}

impl SimResult {
    pub fn aggregate(&self, setting: &str, method: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.setting == setting && a.method == method)
    }

    pub fn write_replications_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// `method,setting,mse` rows for external plotting.
    pub fn write_plotdata_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["method", "setting", "mse"])?;
        for r in &self.records {
            if let Some(mse) = r.mse {
                w.write_record([r.method.as_str(), r.setting.as_str(), &format!("{mse}")])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Aggregates as a human-readable table.
    pub fn write_table(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "{:<32} {:<22} {:>9} {:>9} {:>8} {:>7} {:>6} {:>5}", "setting", "method", "mean_mse", "med_mse", "correct", "noise", "root", "fail")?;
        for a in &self.aggregates {
            writeln!(
                out,
                "{:<32} {:<22} {:>9.4} {:>9.4} {:>8.3} {:>7.3} {:>6.3} {:>5}",
                a.setting, a.method, a.mean_mse, a.median_mse, a.prop_correct, a.mean_noise_splits, a.prop_root, a.n_failed
            )?;
        }
        Ok(())
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Summaries per `(setting, method)`, in the order given.
pub fn aggregate(records: &[SimRecord], settings: &[String], methods: &[String]) -> Vec<Aggregate> {
    let mut out = Vec::new();
    for s in settings {
        for m in methods {
            let rows: Vec<&SimRecord> = records.iter().filter(|r| &r.setting == s && &r.method == m).collect();
            let ok: Vec<&SimRecord> = rows.iter().copied().filter(|r| r.error.is_none()).collect();
            let k = ok.len() as f64;
            let mses: Vec<f64> = ok.iter().filter_map(|r| r.mse).collect();
            out.push(Aggregate {
                setting: s.clone(),
                method: m.clone(),
                n_ok: ok.len(),
                n_failed: rows.len() - ok.len(),
                mean_mse: mses.iter().sum::<f64>() / k,
                median_mse: median(mses),
                prop_correct: ok.iter().filter(|r| r.correct == Some(true)).count() as f64 / k,
                mean_noise_splits: ok.iter().filter_map(|r| r.noise_splits).sum::<usize>() as f64 / k,
                prop_root: ok.iter().filter(|r| r.n_internal == Some(0)).count() as f64 / k,
            });
        }
    }
    out
}

fn run_one(
    setting: &SimSetting,
    methods: &[MethodSpec],
    rep: usize,
    seed: u64,
    config: &SimConfig,
) -> Vec<SimRecord> {
    let record = |method: &MethodSpec, outcome: Result<(f64, bool, usize, usize)>| {
        let (mse, correct, noise, size, error) = match outcome {
            Ok((mse, c, ns, size)) => (Some(mse), Some(c), Some(ns), Some(size), None),
            Err(e) => (None, None, None, None, Some(e.to_string())),
        };
        SimRecord {
            setting: setting.id(),
            method: method.label(),
            rep,
            seed,
            mse,
            correct,
            noise_splits: noise,
            n_internal: size,
            error,
        }
    };
    let data = gen_data::<f64>(setting, seed);
    let (train, test, truth) = match data {
        Ok(d) => d,
        Err(e) => return methods.iter().map(|m| record(m, Err(e.clone()))).collect(),
    };
    let selection = |method: SelectionMethod| SelectionConfig {
        method,
        lambda: config.lambda,
        valid_frac: config.valid_frac,
        folds: config.folds,
        forest: config.forest,
        seed,
    };
    // One set of fold oracles serves every FTS-2 method in the replication.
    let plan = methods.iter().any(|m| m.selection == SelectionMethod::Fts2).then(|| {
        let sel = selection(SelectionMethod::Fts2);
        let oracle = ForestOracle { params: sel.forest_params(train.p()) };
        FoldPlan::stratified(&train, sel.folds, seed, &oracle)
    });
    methods
        .iter()
        .map(|m| {
            let outcome = (|| {
                let plan = match (&plan, m.selection) {
                    (Some(Ok(p)), SelectionMethod::Fts2) => Some(p),
                    (Some(Err(e)), SelectionMethod::Fts2) => return Err(e.clone()),
                    _ => None,
                };
                let spec = m.variant.estimator_spec(setting);
                let fit = run_cait(&train, &spec, &config.constraints, &selection(m.selection), plan)?;
                Ok((
                    eval_mse(&fit.tree, &test, &truth)?,
                    eval_correct_tree(&fit.tree, setting),
                    eval_noise_splits(&fit.tree, setting),
                    fit.tree.n_internal(),
                ))
            })();
            record(m, outcome)
        })
        .collect()
}

/// Replication `r` draws data with seed `base_seed + r` for every setting
/// and runs each method on it. Failures are recorded, not raised.
pub fn run_monte_carlo(
    settings: &[SimSetting],
    methods: &[MethodSpec],
    reps: usize,
    base_seed: u64,
    workers: usize,
    config: &SimConfig,
) -> Result<SimResult> {
    if reps == 0 {
        return Err(CaitError::InvalidParameter("reps must be at least 1".into()));
    }
    if settings.is_empty() || methods.is_empty() {
        return Err(CaitError::InvalidParameter("need at least one setting and one method".into()));
    }
    for s in settings {
        s.validate()?;
    }
    config.constraints.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CaitError::InvalidParameter(e.to_string()))?;
    let jobs: Vec<(usize, usize)> = (0..reps).flat_map(|r| (0..settings.len()).map(move |s| (r, s))).collect();
    let per_job: Vec<Vec<SimRecord>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(r, s)| run_one(&settings[s], methods, r, base_seed.wrapping_add(r as u64), config))
            .collect()
    });
    let mut records: Vec<SimRecord> = per_job.into_iter().flatten().collect();
    records.sort_by_key(|r| {
        let s = settings.iter().position(|x| x.id() == r.setting).unwrap_or(0);
        let m = methods.iter().position(|x| x.label() == r.method).unwrap_or(0);
        (s, m, r.rep)
    });
    let setting_ids: Vec<String> = settings.iter().map(|s| s.id()).collect();
    let method_ids: Vec<String> = methods.iter().map(|m| m.label()).collect();
    let aggregates = aggregate(&records, &setting_ids, &method_ids);
    Ok(SimResult { records, aggregates })
}
