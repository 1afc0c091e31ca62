//! Bagged regression trees with variance-reduction splits.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TrialDataset;
use crate::error::{CaitError, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Features tried at each split.
    pub mtry: usize,
    /// Minimum rows in a terminal node.
    pub min_leaf: usize,
    pub seed: u64,
    /// Grow each tree on a bootstrap resample; otherwise on the full data.
    #[serde(default = "default_bootstrap")]
    pub bootstrap: bool,
    /// Random candidate thresholds per feature; 0 searches every midpoint.
    #[serde(default)]
    pub nsplit: usize,
}

fn default_bootstrap() -> bool {
    true
}

impl ForestParams {
    /// 500 trees, `mtry = max(1, floor(features / 3))`, leaves of at least 5.
    pub fn regression_defaults(n_features: usize, seed: u64) -> Self {
        Self {
            n_trees: 500,
            mtry: (n_features / 3).max(1),
            min_leaf: 5,
            seed,
            bootstrap: true,
            nsplit: 0,
        }
    }

    fn validate(&self, n_features: usize, n: usize) -> Result<()> {
        if self.n_trees == 0 {
            return Err(CaitError::InvalidParameter("forest needs at least one tree".into()));
        }
        if self.mtry == 0 || self.mtry > n_features {
            return Err(CaitError::InvalidParameter(format!(
                "mtry {} outside 1..={n_features}",
                self.mtry
            )));
        }
        if self.min_leaf == 0 {
            return Err(CaitError::InvalidParameter("min_leaf must be at least 1".into()));
        }
        if n < 2 * self.min_leaf && self.min_leaf < n {
            return Err(CaitError::InvalidParameter(format!(
                "{n} rows cannot hold two leaves of {}",
                self.min_leaf
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node<T> {
    Leaf(T),
    Split { feature: usize, threshold: T, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq)]
struct RegressionTree<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> RegressionTree<T> {
    fn predict(&self, features: &[T]) -> T {
        let mut k = 0;
        loop {
            match &self.nodes[k] {
                Node::Leaf(v) => return *v,
                Node::Split { feature, threshold, left, right } => {
                    k = if features[*feature] < *threshold { *left } else { *right };
                }
            }
        }
    }

    fn depth(&self) -> usize {
        fn rec<T>(nodes: &[Node<T>], k: usize) -> usize {
            match &nodes[k] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + rec(nodes, *left).max(rec(nodes, *right)),
            }
        }
        rec(&self.nodes, 0)
    }
}

/// Column-major feature table: treatment first (when included), then covariates.
struct Features<T> {
    columns: Vec<Vec<T>>,
    y: Vec<T>,
}

fn grow_tree<T: Real>(data: &Features<T>, params: &ForestParams, tree_seed: u64) -> RegressionTree<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(tree_seed);
    let n = data.y.len();
    let rows: Vec<usize> = if params.bootstrap {
        (0..n).map(|_| rng.random_range(0..n)).collect()
    } else {
        (0..n).collect()
    };
    let n_features = data.columns.len();
    let mut nodes = Vec::new();
    // (node slot, rows) work list; children are appended in creation order.
    nodes.push(Node::Leaf(T::zero()));
    let mut stack = vec![(0usize, rows)];
    let mut pairs: Vec<(T, T)> = Vec::new();
    while let Some((slot, rows)) = stack.pop() {
        let m = rows.len();
        let total: T = rows.iter().map(|&i| data.y[i]).sum();
        let mean = total / T::from_count(m);
        if m < 2 * params.min_leaf {
            nodes[slot] = Node::Leaf(mean);
            continue;
        }
        let parent_score = total * total / T::from_count(m);
        let mut best: Option<(T, usize, T)> = None;
        for feature in sample(&mut rng, n_features, params.mtry).into_iter() {
            let col = &data.columns[feature];
            pairs.clear();
            pairs.extend(rows.iter().map(|&i| (col[i], data.y[i])));
            pairs.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).expect("finite features"));
            if params.nsplit > 0 {
                // Thresholds at randomly drawn observed values.
                let mut prefix = Vec::with_capacity(m + 1);
                prefix.push(T::zero());
                for k in 0..m {
                    let last = prefix[k];
                    prefix.push(last + pairs[k].1);
                }
                for _ in 0..params.nsplit {
                    let v = pairs[rng.random_range(0..m)].0;
                    let n_left = pairs.partition_point(|q| q.0 <= v);
                    if n_left < params.min_leaf.max(1) || m - n_left < params.min_leaf.max(1) {
                        continue;
                    }
                    let left_sum = prefix[n_left];
                    let right_sum = total - left_sum;
                    let gain = left_sum * left_sum / T::from_count(n_left)
                        + right_sum * right_sum / T::from_count(m - n_left)
                        - parent_score;
                    if best.is_none_or(|(g, _, _)| gain > g) {
                        let threshold = (pairs[n_left - 1].0 + pairs[n_left].0) * T::lit(0.5);
                        best = Some((gain, feature, threshold));
                    }
                }
                continue;
            }
            let mut left_sum = T::zero();
            for k in 0..m - 1 {
                left_sum += pairs[k].1;
                let n_left = k + 1;
                if n_left < params.min_leaf || m - n_left < params.min_leaf {
                    continue;
                }
                if !(pairs[k + 1].0 > pairs[k].0) {
                    continue;
                }
                let right_sum = total - left_sum;
                let score = left_sum * left_sum / T::from_count(n_left)
                    + right_sum * right_sum / T::from_count(m - n_left);
                let gain = score - parent_score;
                let better = match best {
                    None => true,
                    Some((g, _, _)) => gain > g,
                };
                if better {
                    let threshold = (pairs[k].0 + pairs[k + 1].0) * T::lit(0.5);
                    best = Some((gain, feature, threshold));
                }
            }
        }
        match best {
            Some((gain, feature, threshold)) if gain > T::epsilon() * parent_score.abs().max(T::one()) => {
                let (l_rows, r_rows): (Vec<usize>, Vec<usize>) =
                    rows.iter().partition(|&&i| data.columns[feature][i] < threshold);
                let left = nodes.len();
                nodes.push(Node::Leaf(T::zero()));
                let right = nodes.len();
                nodes.push(Node::Leaf(T::zero()));
                nodes[slot] = Node::Split { feature, threshold, left, right };
                stack.push((right, r_rows));
                stack.push((left, l_rows));
            }
            _ => nodes[slot] = Node::Leaf(mean),
        }
    }
    RegressionTree { nodes }
}

/// Regression random forest for `E[Y | A, X]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomForest<T> {
    trees: Vec<RegressionTree<T>>,
    include_treatment: bool,
    p: usize,
    params: ForestParams,
}

impl<T: Real> RandomForest<T> {
    /// Fit on the given rows of `ds`.
    pub fn fit_rows(ds: &TrialDataset<T>, rows: &[usize], params: &ForestParams, include_treatment: bool) -> Result<Self> {
        let n_features = ds.p() + include_treatment as usize;
        if n_features == 0 {
            return Err(CaitError::InvalidParameter("forest needs at least one feature".into()));
        }
        params.validate(n_features, rows.len())?;
        let mut columns = Vec::with_capacity(n_features);
        if include_treatment {
            columns.push(rows.iter().map(|&i| T::from_count(ds.a(i) as usize)).collect());
        }
        for j in 0..ds.p() {
            columns.push(rows.iter().map(|&i| ds.value(i, j)).collect());
        }
        let data = Features { columns, y: rows.iter().map(|&i| ds.y(i)).collect() };
        let trees = (0..params.n_trees)
            .into_par_iter()
            .map(|t| grow_tree(&data, params, params.seed.wrapping_add(t as u64)))
            .collect();
        Ok(Self { trees, include_treatment, p: ds.p(), params: *params })
    }

    pub fn fit(ds: &TrialDataset<T>, params: &ForestParams, include_treatment: bool) -> Result<Self> {
        let rows: Vec<usize> = (0..ds.n()).collect();
        Self::fit_rows(ds, &rows, params, include_treatment)
    }

    pub fn params(&self) -> &ForestParams {
        &self.params
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn max_depth(&self) -> usize {
        self.trees.iter().map(RegressionTree::depth).max().unwrap_or(0)
    }

    pub fn predict(&self, a: u8, x: &[T]) -> Result<T> {
        if x.len() != self.p {
            return Err(CaitError::Shape { expected: self.p, got: x.len() });
        }
        let mut buf = Vec::with_capacity(self.p + 1);
        if self.include_treatment {
            buf.push(T::from_count(a as usize));
        }
        buf.extend_from_slice(x);
        let sum: T = self.trees.iter().map(|t| t.predict(&buf)).sum();
        Ok(sum / T::from_count(self.trees.len()))
    }
}
