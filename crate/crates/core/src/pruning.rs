//! Weakest-link pruning into a nested candidate sequence and the two
//! final-tree selection rules: validation split complexity (FTS-1) and
//! cross-validated distance to a forest ITE oracle (FTS-2).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TrialDataset;
use crate::error::{CaitError, Result};
use crate::estimators::{EstimatorKind, NodeEstimator};
use crate::models::{ForestParams, RandomForest};
use crate::scalar::Real;
use crate::tree::{grow_max_tree, split_statistic, GrowthConstraints, Tree};

pub const DEFAULT_LAMBDA: f64 = 4.0;
pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.2;

/// Score differences up to this size count as ties.
const TIE_TOL: f64 = 1e-12;

/// `sum G_i - lambda |I|` over the internal nodes of `tree`.
pub fn split_complexity<T: Real>(tree: &Tree<T>, lambda: T) -> Result<T> {
    let mut total = T::zero();
    for node in tree.nodes().filter(|n| !n.is_leaf()) {
        total += node.g.ok_or(CaitError::IncompleteTree(node.id))? - lambda;
    }
    Ok(total)
}

/// `psi_0 = psi_Max, ..., psi_M` (root only) and the threshold at which each
/// branch was removed.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneSequence<T> {
    pub trees: Vec<Tree<T>>,
    pub critical_lambdas: Vec<T>,
}

impl<T: Real> PruneSequence<T> {
    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }

    pub fn max_tree(&self) -> &Tree<T> {
        &self.trees[0]
    }

    pub fn n_internal(&self) -> Vec<usize> {
        self.trees.iter().map(|t| t.n_internal()).collect()
    }
}

/// Mean G over the internal nodes of the branch rooted at `id`.
fn branch_mean_g<T: Real>(tree: &Tree<T>, id: usize) -> Result<T> {
    let ids = tree.branch_internal(id);
    let mut sum = T::zero();
    for &i in &ids {
        sum += tree.node(i).and_then(|n| n.g).ok_or(CaitError::IncompleteTree(i))?;
    }
    Ok(sum / T::from_count(ids.len()))
}

/// Repeatedly cut the branch with the smallest mean G (smaller id on ties).
pub fn weakest_link_sequence<T: Real>(max_tree: &Tree<T>) -> Result<PruneSequence<T>> {
    for id in max_tree.internal_ids() {
        if max_tree.node(id).and_then(|n| n.g).is_none() {
            return Err(CaitError::IncompleteTree(id));
        }
    }
    let mut trees = vec![max_tree.clone()];
    let mut critical_lambdas = Vec::new();
    loop {
        let current = trees.last().expect("non-empty");
        if current.is_root_only() {
            break;
        }
        let mut weakest: Option<(usize, T)> = None;
        for id in current.internal_ids() {
            let g = branch_mean_g(current, id)?;
            if weakest.is_none_or(|(_, best)| g < best) {
                weakest = Some((id, g));
            }
        }
        let (id, g) = weakest.expect("internal node exists");
        let next = current.pruned_at(id);
        critical_lambdas.push(g);
        trees.push(next);
    }
    Ok(PruneSequence { trees, critical_lambdas })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    Fts1,
    Fts2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub method: SelectionMethod,
    pub chosen_index: usize,
    /// Validation split complexity (FTS-1) or mean CV error (FTS-2), per candidate.
    pub per_tree_scores: Vec<f64>,
    pub n_internal: Vec<usize>,
    pub critical_lambdas: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub folds: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// FTS-2 only: per-fold scores, `fold_scores[f][k]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fold_scores: Option<Vec<Vec<f64>>>,
}

fn is_tie(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIE_TOL * a.abs().max(b.abs()).max(1.0)
}

/// Index chosen by `better`, with ties going to the later (smaller) tree.
fn choose(scores: &[f64], maximize: bool) -> usize {
    let mut best = 0;
    for (k, &s) in scores.iter().enumerate().skip(1) {
        let b = scores[best];
        if is_tie(s, b) || (maximize && s > b) || (!maximize && s < b) {
            best = k;
        }
    }
    best
}

/// Validation-data G for every internal node of `tree`; unestimable or
/// degenerate children give 0.
pub fn validation_g<T: Real>(
    tree: &Tree<T>,
    validation: &TrialDataset<T>,
    kind: &EstimatorKind<T>,
) -> Result<BTreeMap<usize, T>> {
    let est = kind.prepare(validation)?;
    let rows: Vec<usize> = (0..validation.n()).collect();
    let routed = tree.route(validation, &rows)?;
    let mut out = BTreeMap::new();
    for node in tree.nodes().filter(|n| !n.is_leaf()) {
        let (l, r) = node.children.expect("internal");
        let g = match (est.effect(&routed[&l]), est.effect(&routed[&r])) {
            (Ok(el), Ok(er)) => split_statistic((el.effect, el.var), (er.effect, er.var))
                .ok()
                .filter(|g| g.is_finite())
                .unwrap_or(T::zero()),
            _ => T::zero(),
        };
        out.insert(node.id, g);
    }
    Ok(out)
}

/// FTS-1: maximize the split complexity recomputed on validation data.
pub fn select_fts1<T: Real>(
    seq: &PruneSequence<T>,
    validation: &TrialDataset<T>,
    kind: &EstimatorKind<T>,
    lambda: T,
) -> Result<SelectionReport> {
    if validation.n() == 0 {
        return Err(CaitError::EmptyValidation);
    }
    if !(lambda >= T::zero()) {
        return Err(CaitError::InvalidParameter("lambda must be non-negative".into()));
    }
    let g = validation_g(seq.max_tree(), validation, kind)?;
    let scores: Vec<f64> = seq
        .trees
        .iter()
        .map(|t| t.internal_ids().iter().map(|id| g[id].as_f64() - lambda.as_f64()).sum())
        .collect();
    Ok(SelectionReport {
        method: SelectionMethod::Fts1,
        chosen_index: choose(&scores, true),
        per_tree_scores: scores,
        n_internal: seq.n_internal(),
        critical_lambdas: seq.critical_lambdas.iter().map(|v| v.as_f64()).collect(),
        lambda: Some(lambda.as_f64()),
        folds: None,
        seed: None,
        fold_scores: None,
    })
}

/// Per-fold reference ITEs for the test rows of each fold.
pub trait IteOracle<T>: Sync {
    fn fold_ite(&self, ds: &TrialDataset<T>, train: &[usize], test: &[usize], fold: usize) -> Result<Vec<T>>;
}

/// Random forest on the training fold, `f(1, x) - f(0, x)` on the test fold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForestOracle {
    pub params: ForestParams,
}

/// Forest seed for a fold, so folds draw independent streams from one run seed.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed ^ (fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl<T: Real> IteOracle<T> for ForestOracle {
    fn fold_ite(&self, ds: &TrialDataset<T>, train: &[usize], test: &[usize], fold: usize) -> Result<Vec<T>> {
        let params = ForestParams { seed: fold_seed(self.params.seed, fold), ..self.params };
        let forest = RandomForest::fit_rows(ds, train, &params, true)?;
        test.iter().map(|&i| Ok(forest.predict(1, ds.x(i))? - forest.predict(0, ds.x(i))?)).collect()
    }
}

/// A known ITE function, used when the true effect is available.
pub struct FnOracle<F>(pub F);

impl<T: Real, F: Fn(&[T]) -> T + Sync> IteOracle<T> for FnOracle<F> {
    fn fold_ite(&self, ds: &TrialDataset<T>, _train: &[usize], test: &[usize], _fold: usize) -> Result<Vec<T>> {
        Ok(test.iter().map(|&i| (self.0)(ds.x(i))).collect())
    }
}

/// Fold labels plus the oracle ITE of every row (each row is a test row in
/// exactly one fold); reusable across methods on the same data.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldPlan<T> {
    pub labels: Vec<usize>,
    pub folds: usize,
    pub oracle_ite: Vec<T>,
}

/// Arm-stratified fold labels: each arm is shuffled and dealt round-robin.
pub fn stratified_folds<T: Real>(ds: &TrialDataset<T>, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(CaitError::InvalidParameter("FTS-2 needs at least 2 folds".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = vec![0usize; ds.n()];
    let mut offset = 0;
    for arm in 0..2u8 {
        let mut rows: Vec<usize> = (0..ds.n()).filter(|&i| ds.a(i) == arm).collect();
        rows.shuffle(&mut rng);
        for (k, &i) in rows.iter().enumerate() {
            labels[i] = (k + offset) % folds;
        }
        offset += rows.len();
    }
    Ok(labels)
}

fn fold_rows<T: Real>(ds: &TrialDataset<T>, labels: &[usize], fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let (test, train): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| labels[i] == fold);
    let n1 = train.iter().filter(|&&i| ds.a(i) == 1).count();
    if n1 == 0 || n1 == train.len() || test.is_empty() {
        return Err(CaitError::FoldDegeneracy(fold));
    }
    Ok((train, test))
}

impl<T: Real> FoldPlan<T> {
    pub fn new(ds: &TrialDataset<T>, labels: Vec<usize>, folds: usize, oracle: &dyn IteOracle<T>) -> Result<Self> {
        if labels.len() != ds.n() || labels.iter().any(|&l| l >= folds) {
            return Err(CaitError::InvalidParameter("fold labels do not match the dataset".into()));
        }
        let mut oracle_ite = vec![T::zero(); ds.n()];
        for fold in 0..folds {
            let (train, test) = fold_rows(ds, &labels, fold)?;
            let ite = oracle.fold_ite(ds, &train, &test, fold)?;
            for (&i, v) in test.iter().zip(ite) {
                oracle_ite[i] = v;
            }
        }
        Ok(Self { labels, folds, oracle_ite })
    }

    pub fn stratified(ds: &TrialDataset<T>, folds: usize, seed: u64, oracle: &dyn IteOracle<T>) -> Result<Self> {
        Self::new(ds, stratified_folds(ds, folds, seed)?, folds, oracle)
    }
}

/// Training-fold effect of every node of `tree`; `None` when not estimable.
fn fold_node_effects<T: Real>(
    tree: &Tree<T>,
    est: &NodeEstimator<'_, T>,
    train: &[usize],
) -> Result<BTreeMap<usize, Option<T>>> {
    let routed = tree.route(est.dataset(), train)?;
    Ok(routed.iter().map(|(&id, rows)| (id, est.effect(rows).ok().map(|e| e.effect))).collect())
}

/// Effect of `id`, inheriting from the nearest estimable ancestor.
fn inherited<T: Real>(tree: &Tree<T>, effects: &BTreeMap<usize, Option<T>>, mut id: usize, fold: usize) -> Result<T> {
    loop {
        if let Some(e) = effects[&id] {
            return Ok(e);
        }
        id = tree.node(id).and_then(|n| n.parent).ok_or(CaitError::FoldDegeneracy(fold))?;
    }
}

/// Mean over folds of the mean squared distance between re-estimated tree
/// predictions and the oracle, per candidate; returns `(scores, fold_scores)`.
pub fn cv_scores<T: Real>(
    ds: &TrialDataset<T>,
    seq: &PruneSequence<T>,
    kind: &EstimatorKind<T>,
    plan: &FoldPlan<T>,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let est = kind.prepare(ds)?;
    let max_tree = seq.max_tree();
    let mut fold_scores = Vec::with_capacity(plan.folds);
    for fold in 0..plan.folds {
        let (train, test) = fold_rows(ds, &plan.labels, fold)?;
        let effects = fold_node_effects(max_tree, &est, &train)?;
        let mut per_tree = Vec::with_capacity(seq.len());
        for tree in &seq.trees {
            let mut leaf_effect: BTreeMap<usize, T> = BTreeMap::new();
            for id in tree.leaf_ids() {
                leaf_effect.insert(id, inherited(tree, &effects, id, fold)?);
            }
            let mut sse = 0.0;
            for &i in &test {
                let leaf = tree.leaf_for(ds.x(i))?;
                let d = (leaf_effect[&leaf.id] - plan.oracle_ite[i]).as_f64();
                sse += d * d;
            }
            per_tree.push(sse / test.len() as f64);
        }
        fold_scores.push(per_tree);
    }
    let scores = (0..seq.len())
        .map(|k| fold_scores.iter().map(|f| f[k]).sum::<f64>() / plan.folds as f64)
        .collect();
    Ok((scores, fold_scores))
}

/// FTS-2 against a prepared fold plan.
pub fn select_fts2_with_plan<T: Real>(
    ds: &TrialDataset<T>,
    seq: &PruneSequence<T>,
    kind: &EstimatorKind<T>,
    plan: &FoldPlan<T>,
    seed: Option<u64>,
) -> Result<SelectionReport> {
    let (scores, fold_scores) = cv_scores(ds, seq, kind, plan)?;
    Ok(SelectionReport {
        method: SelectionMethod::Fts2,
        chosen_index: choose(&scores, false),
        per_tree_scores: scores,
        n_internal: seq.n_internal(),
        critical_lambdas: seq.critical_lambdas.iter().map(|v| v.as_f64()).collect(),
        lambda: None,
        folds: Some(plan.folds),
        seed,
        fold_scores: Some(fold_scores),
    })
}

/// FTS-2 end to end: grow and prune on all of `ds`, then cross-validate
/// against per-fold forest oracles.
pub fn select_fts2<T: Real>(
    ds: &TrialDataset<T>,
    kind: &EstimatorKind<T>,
    constraints: &GrowthConstraints,
    folds: usize,
    forest: &ForestParams,
    seed: u64,
) -> Result<(PruneSequence<T>, SelectionReport)> {
    let seq = weakest_link_sequence(&grow_max_tree(ds, kind, constraints)?)?;
    let oracle = ForestOracle { params: ForestParams { seed, ..*forest } };
    let plan = FoldPlan::stratified(ds, folds, seed, &oracle)?;
    let report = select_fts2_with_plan(ds, &seq, kind, &plan, Some(seed))?;
    Ok((seq, report))
}

/// Route `x` to a leaf and return its effect.
pub fn predict_tree<T: Real>(tree: &Tree<T>, x: &[T]) -> Result<T> {
    tree.predict_row(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::TreeNode;

    /// Build a tree over row-free nodes from `(id, parent, g)`; nodes with a
    /// G get the next two listed ids as children.
    pub(crate) fn synthetic(spec: &[(usize, Option<usize>, Option<f64>)]) -> Tree<f64> {
        let mut nodes: Vec<TreeNode<f64>> = spec
            .iter()
            .map(|&(id, parent, g)| TreeNode {
                id,
                depth: 0,
                parent,
                rows: vec![],
                n1: 0,
                effect: 0.0,
                effect_var: 0.0,
                split: g.map(|_| crate::tree::SplitRule::Threshold { column: 0, threshold: id as f64 }),
                g,
                children: None,
            })
            .collect();
        for k in 0..nodes.len() {
            let id = nodes[k].id;
            let kids: Vec<usize> = spec.iter().filter(|s| s.1 == Some(id)).map(|s| s.0).collect();
            if kids.len() == 2 {
                nodes[k].children = Some((kids[0], kids[1]));
            }
        }
        Tree::from_nodes(nodes).unwrap()
    }

    fn stump(g: f64) -> Tree<f64> {
        synthetic(&[(0, None, Some(g)), (1, Some(0), None), (2, Some(0), None)])
    }

    #[test]
    fn split_complexity_examples() {
        let root = synthetic(&[(0, None, None)]);
        assert_eq!(split_complexity(&root, 4.0).unwrap(), 0.0);
        assert_eq!(split_complexity(&stump(6.0), 4.0).unwrap(), 2.0);
        let two = synthetic(&[
            (0, None, Some(6.0)),
            (1, Some(0), Some(3.0)),
            (2, Some(0), None),
            (3, Some(1), None),
            (4, Some(1), None),
        ]);
        assert_eq!(split_complexity(&two, 4.0).unwrap(), 1.0);
    }

    #[test]
    fn sequence_examples() {
        let root = synthetic(&[(0, None, None)]);
        assert_eq!(weakest_link_sequence(&root).unwrap().len(), 1);
        let seq = weakest_link_sequence(&stump(5.0)).unwrap();
        assert_eq!(seq.len(), 2);
        assert_eq!(seq.critical_lambdas, vec![5.0]);
        let t = synthetic(&[
            (0, None, Some(10.0)),
            (1, Some(0), Some(2.0)),
            (2, Some(0), None),
            (3, Some(1), None),
            (4, Some(1), None),
        ]);
        let seq = weakest_link_sequence(&t).unwrap();
        assert_eq!(seq.critical_lambdas, vec![2.0, 10.0]);
        assert_eq!(seq.n_internal(), vec![2, 1, 0]);
    }

    #[test]
    fn missing_g_is_incomplete() {
        let mut t = stump(1.0);
        t.node_mut(0).unwrap().g = None;
        assert_eq!(split_complexity(&t, 1.0).unwrap_err(), CaitError::IncompleteTree(0));
        assert_eq!(weakest_link_sequence(&t).unwrap_err(), CaitError::IncompleteTree(0));
    }

    #[test]
    fn choose_prefers_smaller_tree_on_ties() {
        assert_eq!(choose(&[1.0, 1.0 + 1e-13, 0.5], true), 1);
        assert_eq!(choose(&[0.2, 0.2, 0.3], false), 1);
        assert_eq!(choose(&[-1.0, 0.0], true), 1);
        assert_eq!(choose(&[5.0, 0.0], true), 0);
    }
}
