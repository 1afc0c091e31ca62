//! Split enumeration, the squared-z splitting statistic and growth of the
//! maximal tree.

use std::collections::{BTreeMap, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ColumnKind, SubgroupMask, TrialDataset};
use crate::error::{CaitError, Result};
use crate::estimators::{EstimatorKind, NodeEffect, NodeEstimator};
use crate::scalar::Real;

/// Exhaustive nominal bipartitions are used up to this many levels.
pub const MAX_EXHAUSTIVE_LEVELS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowthConstraints {
    pub min_node: usize,
    pub min_child: usize,
    pub max_depth: usize,
    pub min_arm_for_split: usize,
}

impl Default for GrowthConstraints {
    fn default() -> Self {
        Self { min_node: 30, min_child: 30, max_depth: 5, min_arm_for_split: 2 }
    }
}

impl GrowthConstraints {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("min_node", self.min_node),
            ("min_child", self.min_child),
            ("max_depth", self.max_depth),
            ("min_arm_for_split", self.min_arm_for_split),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(CaitError::InvalidParameter(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// `x_j < threshold` goes left; for nominal columns, a level code in `left` goes left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule<T> {
    Threshold { column: usize, threshold: T },
    /// `right` holds the remaining levels seen in the node, so unseen levels can be detected.
    Levels { column: usize, left: Vec<u32>, right: Vec<u32> },
}

impl<T: Real> SplitRule<T> {
    pub fn column(&self) -> usize {
        match self {
            SplitRule::Threshold { column, .. } | SplitRule::Levels { column, .. } => *column,
        }
    }

    pub fn goes_left(&self, x: &[T]) -> Result<bool> {
        match self {
            SplitRule::Threshold { column, threshold } => Ok(x[*column] < *threshold),
            SplitRule::Levels { column, left, right } => {
                let code = level_code(x[*column]);
                if left.contains(&code) {
                    Ok(true)
                } else if right.contains(&code) {
                    Ok(false)
                } else {
                    Err(CaitError::UnknownLevel { column: *column, code: x[*column].as_f64() as i64 })
                }
            }
        }
    }
}

fn level_code<T: Real>(v: T) -> u32 {
    let f = v.as_f64();
    if f >= 0.0 && f.fract() == 0.0 && f <= u32::MAX as f64 {
        f as u32
    } else {
        u32::MAX
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode<T> {
    pub id: usize,
    pub depth: usize,
    pub parent: Option<usize>,
    /// Dataset rows in the node, ascending.
    pub rows: Vec<usize>,
    pub n1: usize,
    pub effect: T,
    pub effect_var: T,
    pub split: Option<SplitRule<T>>,
    pub g: Option<T>,
    pub children: Option<(usize, usize)>,
}

impl<T: Real> TreeNode<T> {
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn n0(&self) -> usize {
        self.rows.len() - self.n1
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }

    pub fn mask(&self, ds: &TrialDataset<T>) -> Result<SubgroupMask> {
        SubgroupMask::from_rows(ds, &self.rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree<T> {
    nodes: BTreeMap<usize, TreeNode<T>>,
    root: usize,
}

impl<T: Real> Tree<T> {
    /// Assemble a tree from nodes, checking the structural invariants.
    pub fn from_nodes(nodes: Vec<TreeNode<T>>) -> Result<Self> {
        let map: BTreeMap<usize, TreeNode<T>> = nodes.into_iter().map(|n| (n.id, n)).collect();
        let roots: Vec<usize> = map.values().filter(|n| n.parent.is_none()).map(|n| n.id).collect();
        if roots.len() != 1 {
            return Err(CaitError::InvalidParameter(format!("tree must have one root, found {}", roots.len())));
        }
        let tree = Self { nodes: map, root: roots[0] };
        tree.check()?;
        Ok(tree)
    }

    fn check(&self) -> Result<()> {
        let mut seen = 0usize;
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            let node = self.nodes.get(&id).ok_or_else(|| CaitError::InvalidParameter(format!("missing node {id}")))?;
            seen += 1;
            if node.split.is_some() != node.children.is_some() {
                return Err(CaitError::InvalidParameter(format!("node {id}: split and children disagree")));
            }
            if let Some((l, r)) = node.children {
                for c in [l, r] {
                    match self.nodes.get(&c) {
                        Some(child) if child.parent == Some(id) => stack.push(c),
                        _ => return Err(CaitError::InvalidParameter(format!("node {id}: bad child {c}"))),
                    }
                }
            }
        }
        if seen != self.nodes.len() {
            return Err(CaitError::InvalidParameter("tree is not connected".into()));
        }
        Ok(())
    }

    pub fn root(&self) -> &TreeNode<T> {
        &self.nodes[&self.root]
    }

    pub fn root_id(&self) -> usize {
        self.root
    }

    pub fn node(&self, id: usize) -> Option<&TreeNode<T>> {
        self.nodes.get(&id)
    }

    /// Nodes in id order.
    pub fn nodes(&self) -> impl Iterator<Item = &TreeNode<T>> {
        self.nodes.values()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn internal_ids(&self) -> Vec<usize> {
        self.nodes.values().filter(|n| !n.is_leaf()).map(|n| n.id).collect()
    }

    pub fn leaf_ids(&self) -> Vec<usize> {
        self.nodes.values().filter(|n| n.is_leaf()).map(|n| n.id).collect()
    }

    pub fn n_internal(&self) -> usize {
        self.nodes.values().filter(|n| !n.is_leaf()).count()
    }

    pub fn is_root_only(&self) -> bool {
        self.nodes.len() == 1
    }

    pub fn depth(&self) -> usize {
        self.nodes.values().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Internal nodes of the branch rooted at `id` (including `id` itself when internal).
    pub fn branch_internal(&self, id: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(i) = stack.pop() {
            if let Some((l, r)) = self.nodes[&i].children {
                out.push(i);
                stack.push(r);
                stack.push(l);
            }
        }
        out.sort_unstable();
        out
    }

    /// Copy with every descendant of `id` removed, leaving `id` as a leaf.
    pub fn pruned_at(&self, id: usize) -> Self {
        let mut nodes = self.nodes.clone();
        let mut stack = Vec::new();
        if let Some(node) = nodes.get_mut(&id) {
            if let Some((l, r)) = node.children.take() {
                stack.extend([l, r]);
            }
            node.split = None;
            node.g = None;
        }
        while let Some(i) = stack.pop() {
            if let Some(node) = nodes.remove(&i) {
                if let Some((l, r)) = node.children {
                    stack.extend([l, r]);
                }
            }
        }
        Self { nodes, root: self.root }
    }

    #[cfg(test)]
    pub(crate) fn node_mut(&mut self, id: usize) -> Option<&mut TreeNode<T>> {
        self.nodes.get_mut(&id)
    }

    /// The leaf reached by `x`.
    pub fn leaf_for(&self, x: &[T]) -> Result<&TreeNode<T>> {
        let mut node = self.root();
        while let (Some(rule), Some((l, r))) = (&node.split, node.children) {
            if rule.column() >= x.len() {
                return Err(CaitError::Shape { expected: rule.column() + 1, got: x.len() });
            }
            node = &self.nodes[&if rule.goes_left(x)? { l } else { r }];
        }
        Ok(node)
    }

    /// Effect of the leaf reached by `x`.
    pub fn predict_row(&self, x: &[T]) -> Result<T> {
        Ok(self.leaf_for(x)?.effect)
    }

    /// Route rows of `ds` to nodes; returns `(node id, rows)` for every node in id order.
    pub fn route(&self, ds: &TrialDataset<T>, rows: &[usize]) -> Result<BTreeMap<usize, Vec<usize>>> {
        let mut out: BTreeMap<usize, Vec<usize>> = self.nodes.keys().map(|&k| (k, Vec::new())).collect();
        for &i in rows {
            let x = ds.x(i);
            let mut node = self.root();
            loop {
                out.get_mut(&node.id).expect("node present").push(i);
                match (&node.split, node.children) {
                    (Some(rule), Some((l, r))) => node = &self.nodes[&if rule.goes_left(x)? { l } else { r }],
                    _ => break,
                }
            }
        }
        Ok(out)
    }

    pub fn to_json(&self, names: &[String], kinds: &[ColumnKind]) -> TreeJson {
        let nodes = self
            .nodes
            .values()
            .map(|n| NodeJson {
                id: n.id,
                depth: n.depth,
                parent: n.parent,
                n: n.n(),
                n1: n.n1,
                n0: n.n0(),
                effect: n.effect.as_f64(),
                effect_var: n.effect_var.as_f64(),
                split: n.split.as_ref().map(|rule| split_json(rule, names, kinds)),
                g: n.g.map(|g| g.as_f64()),
                children: n.children.map(|(l, r)| [l, r]),
            })
            .collect();
        TreeJson { root: self.root, n_internal: self.n_internal(), nodes }
    }
}

fn split_json<T: Real>(rule: &SplitRule<T>, names: &[String], kinds: &[ColumnKind]) -> SplitJson {
    let column = rule.column();
    let level_names = |codes: &[u32]| -> Vec<String> {
        let levels = kinds.get(column).and_then(|k| k.levels()).unwrap_or(&[]);
        codes
            .iter()
            .map(|&c| levels.get(c as usize).cloned().unwrap_or_else(|| c.to_string()))
            .collect()
    };
    match rule {
        SplitRule::Threshold { threshold, .. } => SplitJson {
            column,
            column_name: names.get(column).cloned(),
            threshold: Some(threshold.as_f64()),
            levels: None,
            right_levels: None,
        },
        SplitRule::Levels { left, right, .. } => SplitJson {
            column,
            column_name: names.get(column).cloned(),
            threshold: None,
            levels: Some(level_names(left)),
            right_levels: Some(level_names(right)),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitJson {
    pub column: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub column_name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    /// Levels sent left.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub right_levels: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeJson {
    pub id: usize,
    pub depth: usize,
    pub parent: Option<usize>,
    pub n: usize,
    pub n1: usize,
    pub n0: usize,
    pub effect: f64,
    pub effect_var: f64,
    pub split: Option<SplitJson>,
    #[serde(rename = "G")]
    pub g: Option<f64>,
    pub children: Option<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeJson {
    pub root: usize,
    pub n_internal: usize,
    pub nodes: Vec<NodeJson>,
}

/// `(effect_L - effect_R)^2 / (var_L + var_R)`.
pub fn split_statistic<T: Real>(left: (T, T), right: (T, T)) -> Result<T> {
    let (el, vl) = left;
    let (er, vr) = right;
    let denom = vl + vr;
    if !(denom > T::zero()) || !denom.is_finite() {
        return Err(CaitError::DegenerateVariance);
    }
    let d = el - er;
    Ok(d * d / denom)
}

fn statistic_of<T: Real>(l: &NodeEffect<T>, r: &NodeEffect<T>) -> Option<T> {
    split_statistic((l.effect, l.var), (r.effect, r.var)).ok().filter(|g| g.is_finite())
}

fn admissible<T: Real>(ds: &TrialDataset<T>, c: &GrowthConstraints, left: &[usize], right: &[usize]) -> bool {
    let ok = |rows: &[usize]| {
        let n1 = rows.iter().filter(|&&i| ds.a(i) == 1).count();
        rows.len() >= c.min_child && n1 >= c.min_arm_for_split && rows.len() - n1 >= c.min_arm_for_split
    };
    ok(left) && ok(right)
}

/// Rows sorted by column value (ties by row index) with the cut positions
/// between consecutive distinct values.
fn sorted_cuts<T: Real>(ds: &TrialDataset<T>, rows: &[usize], column: usize) -> (Vec<usize>, Vec<(usize, T)>) {
    let mut ord = rows.to_vec();
    ord.sort_by(|&i, &j| ds.value(i, column).partial_cmp(&ds.value(j, column)).unwrap().then(i.cmp(&j)));
    let half = T::lit(0.5);
    let cuts = (1..ord.len())
        .filter_map(|pos| {
            let lo = ds.value(ord[pos - 1], column);
            let hi = ds.value(ord[pos], column);
            (lo < hi).then(|| (pos, lo + (hi - lo) * half))
        })
        .collect();
    (ord, cuts)
}

/// Level codes present in `rows`, ascending.
fn present_levels<T: Real>(ds: &TrialDataset<T>, rows: &[usize], column: usize) -> Vec<u32> {
    let mut codes: Vec<u32> = rows.iter().map(|&i| level_code(ds.value(i, column))).collect();
    codes.sort_unstable();
    codes.dedup();
    codes
}

/// Left level subsets for a nominal column: every bipartition up to
/// complement (the smaller side, or the side holding the first level when
/// equal), or effect-ordered prefix cuts above the exhaustive limit.
fn level_subsets<T: Real>(ds: &TrialDataset<T>, rows: &[usize], column: usize) -> Vec<(Vec<u32>, Vec<u32>)> {
    let levels = present_levels(ds, rows, column);
    let k = levels.len();
    if k < 2 {
        return Vec::new();
    }
    let mut out: Vec<(Vec<u32>, Vec<u32>)> = Vec::new();
    if k <= MAX_EXHAUSTIVE_LEVELS {
        for mask in 1u32..(1 << k) - 1 {
            let size = mask.count_ones() as usize;
            if size * 2 > k || (size * 2 == k && mask & 1 == 0) {
                continue;
            }
            let (left, right): (Vec<_>, Vec<_>) = (0..k).partition(|&b| mask & (1 << b) != 0);
            out.push((left.iter().map(|&b| levels[b]).collect(), right.iter().map(|&b| levels[b]).collect()));
        }
    } else {
        let mut stats: BTreeMap<u32, [(f64, usize); 2]> = BTreeMap::new();
        for &i in rows {
            let e = stats.entry(level_code(ds.value(i, column))).or_default();
            let cell = &mut e[ds.a(i) as usize];
            cell.0 += ds.y(i).as_f64();
            cell.1 += 1;
        }
        let mut ordered: Vec<(f64, u32)> = stats
            .iter()
            .map(|(&code, cells)| {
                let diff = if cells[0].1 > 0 && cells[1].1 > 0 {
                    cells[1].0 / cells[1].1 as f64 - cells[0].0 / cells[0].1 as f64
                } else {
                    0.0
                };
                (diff, code)
            })
            .collect();
        ordered.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for cut in 1..k {
            let mut left: Vec<u32> = ordered[..cut].iter().map(|&(_, c)| c).collect();
            let mut right: Vec<u32> = ordered[cut..].iter().map(|&(_, c)| c).collect();
            left.sort_unstable();
            right.sort_unstable();
            out.push((left, right));
        }
    }
    out.sort();
    out
}

fn split_rows<T: Real>(ds: &TrialDataset<T>, rows: &[usize], column: usize, left: &[u32]) -> (Vec<usize>, Vec<usize>) {
    rows.iter().partition(|&&i| left.contains(&level_code(ds.value(i, column))))
}

/// Admissible candidate rules for the rows of `mask`.
pub fn enumerate_splits<T: Real>(
    ds: &TrialDataset<T>,
    mask: &SubgroupMask,
    constraints: &GrowthConstraints,
) -> Vec<SplitRule<T>> {
    let rows = mask.indices();
    let mut out = Vec::new();
    for column in 0..ds.p() {
        if ds.kinds()[column].is_nominal() {
            for (left, right) in level_subsets(ds, &rows, column) {
                let (l, r) = split_rows(ds, &rows, column, &left);
                if admissible(ds, constraints, &l, &r) {
                    out.push(SplitRule::Levels { column, left, right });
                }
            }
        } else {
            let (ord, cuts) = sorted_cuts(ds, &rows, column);
            for (pos, threshold) in cuts {
                if admissible(ds, constraints, &ord[..pos], &ord[pos..]) {
                    out.push(SplitRule::Threshold { column, threshold });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
struct Candidate<T> {
    rule: SplitRule<T>,
    g: T,
}

/// Best rule on one column; candidates are visited in tie-break order and
/// only a strictly larger statistic replaces the incumbent.
fn best_on_column<T: Real>(
    est: &NodeEstimator<'_, T>,
    rows: &[usize],
    column: usize,
    c: &GrowthConstraints,
) -> Option<Candidate<T>> {
    let ds = est.dataset();
    let mut best: Option<Candidate<T>> = None;
    let mut consider = |rule: SplitRule<T>, g: Option<T>| {
        if let Some(g) = g {
            if best.as_ref().is_none_or(|b| g > b.g) {
                best = Some(Candidate { rule, g });
            }
        }
    };
    if ds.kinds()[column].is_nominal() {
        for (left, right) in level_subsets(ds, rows, column) {
            let (l, r) = split_rows(ds, rows, column, &left);
            if !admissible(ds, c, &l, &r) {
                continue;
            }
            let g = match (est.effect(&l), est.effect(&r)) {
                (Ok(el), Ok(er)) => statistic_of(&el, &er),
                _ => None,
            };
            consider(SplitRule::Levels { column, left, right }, g);
        }
    } else {
        let (ord, cuts) = sorted_cuts(ds, rows, column);
        let (mut warm_l, mut warm_r) = (None, None);
        for (pos, threshold) in cuts {
            let (l, r) = ord.split_at(pos);
            if !admissible(ds, c, l, r) {
                continue;
            }
            let g = match (est.effect_warm(l, &mut warm_l), est.effect_warm(r, &mut warm_r)) {
                (Ok(el), Ok(er)) => statistic_of(&el, &er),
                _ => None,
            };
            consider(SplitRule::Threshold { column, threshold }, g);
        }
    }
    best
}

fn best_split_rows<T: Real>(
    est: &NodeEstimator<'_, T>,
    rows: &[usize],
    c: &GrowthConstraints,
) -> Option<(SplitRule<T>, T)> {
    let per_column: Vec<Option<Candidate<T>>> =
        (0..est.dataset().p()).into_par_iter().map(|col| best_on_column(est, rows, col, c)).collect();
    let mut best: Option<Candidate<T>> = None;
    for cand in per_column.into_iter().flatten() {
        if best.as_ref().is_none_or(|b| cand.g > b.g) {
            best = Some(cand);
        }
    }
    best.map(|b| (b.rule, b.g))
}

/// The admissible rule with the largest splitting statistic, if any.
pub fn best_split<T: Real>(
    ds: &TrialDataset<T>,
    mask: &SubgroupMask,
    kind: &EstimatorKind<T>,
    constraints: &GrowthConstraints,
) -> Result<Option<(SplitRule<T>, T)>> {
    let est = kind.prepare(ds)?;
    Ok(best_split_rows(&est, &mask.indices(), constraints))
}

/// Grow the maximal tree breadth-first until no admissible split remains.
pub fn grow_max_tree<T: Real>(
    ds: &TrialDataset<T>,
    kind: &EstimatorKind<T>,
    constraints: &GrowthConstraints,
) -> Result<Tree<T>> {
    let est = kind.prepare(ds)?;
    grow_with(&est, constraints)
}

pub fn grow_with<T: Real>(est: &NodeEstimator<'_, T>, constraints: &GrowthConstraints) -> Result<Tree<T>> {
    constraints.validate()?;
    let ds = est.dataset();
    let rows: Vec<usize> = (0..ds.n()).collect();
    let root_eff = est.effect(&rows)?;
    let n1 = ds.n_treated();
    let mut nodes = vec![TreeNode {
        id: 0,
        depth: 0,
        parent: None,
        rows,
        n1,
        effect: root_eff.effect,
        effect_var: root_eff.var,
        split: None,
        g: None,
        children: None,
    }];
    let mut queue = VecDeque::from([0usize]);
    while let Some(id) = queue.pop_front() {
        let (depth, n) = (nodes[id].depth, nodes[id].n());
        if depth >= constraints.max_depth || n < constraints.min_node {
            continue;
        }
        let Some((rule, g_search)) = best_split_rows(est, &nodes[id].rows, constraints) else {
            continue;
        };
        let parent_rows = &nodes[id].rows;
        let mut left = Vec::new();
        let mut right = Vec::new();
        for &i in parent_rows {
            if rule.goes_left(ds.x(i))? {
                left.push(i);
            } else {
                right.push(i);
            }
        }
        // Re-estimate on index-ordered rows without warm starts so stored
        // values do not depend on the search path.
        let (el, er) = (est.effect(&left)?, est.effect(&right)?);
        let g = statistic_of(&el, &er).unwrap_or(g_search);
        let next = nodes.len();
        for (k, (rows, eff)) in [(left, el), (right, er)].into_iter().enumerate() {
            let n1 = rows.iter().filter(|&&i| ds.a(i) == 1).count();
            nodes.push(TreeNode {
                id: next + k,
                depth: depth + 1,
                parent: Some(id),
                rows,
                n1,
                effect: eff.effect,
                effect_var: eff.var,
                split: None,
                g: None,
                children: None,
            });
            queue.push_back(next + k);
        }
        let node = &mut nodes[id];
        node.split = Some(rule);
        node.g = Some(g);
        node.children = Some((next, next + 1));
    }
    Tree::from_nodes(nodes)
}
