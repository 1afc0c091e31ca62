use std::collections::BTreeSet;

use approx::assert_relative_eq;
use cait::data::{mask_all, SubgroupMask};
use cait::estimators::{mu_data_adaptive, mu_unadjusted};
use cait::models::{fit_glm, DesignSpec, Link};
use cait::pruning::{split_complexity, weakest_link_sequence};
use cait::tree::split_statistic;
use cait::{ConditionalMean, EstimatorKind, OutcomeKind, SplitRule, Tree, TreeNode, TrialDataset};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn dataset(y: Vec<f64>, a: Vec<u8>, x: Vec<f64>, p: usize) -> TrialDataset<f64> {
    TrialDataset::from_continuous(y, a, x, p, OutcomeKind::Continuous).unwrap()
}

/// Rows with both arms represented at least twice.
fn trial(n: std::ops::Range<usize>, p: usize) -> impl Strategy<Value = TrialDataset<f64>> {
    n.prop_flat_map(move |n| {
        (
            prop::collection::vec(-50.0..50.0f64, n),
            prop::collection::vec(0u8..2, n),
            prop::collection::vec(-3.0..3.0f64, n * p),
        )
    })
    .prop_map(move |(y, mut a, x)| {
        a[0] = 0;
        a[1] = 0;
        a[2] = 1;
        a[3] = 1;
        dataset(y, a, x, p)
    })
}

/// Difference in arm means divided by its pooled-within-side standard error,
/// written out longhand.
fn su_style(y: &[f64], a: &[u8], left: &[bool]) -> f64 {
    let side = |want: bool| {
        let mut n = [0.0; 2];
        let mut s = [0.0; 2];
        for i in 0..y.len() {
            if left[i] == want {
                n[a[i] as usize] += 1.0;
                s[a[i] as usize] += y[i];
            }
        }
        let m = [s[0] / n[0], s[1] / n[1]];
        let mut ss = 0.0;
        for i in 0..y.len() {
            if left[i] == want {
                ss += (y[i] - m[a[i] as usize]).powi(2);
            }
        }
        let sigma2 = ss / (n[0] + n[1] - 2.0);
        (m[1] - m[0], sigma2 * (1.0 / n[0] + 1.0 / n[1]))
    };
    let (dl, vl) = side(true);
    let (dr, vr) = side(false);
    (dl - dr).powi(2) / (vl + vr)
}

fn split_cells() -> impl Strategy<Value = (Vec<f64>, Vec<u8>, Vec<bool>)> {
    // Each of the four (side, arm) cells gets at least two rows.
    (8usize..60)
        .prop_flat_map(|n| {
            (prop::collection::vec(-20.0..20.0f64, n), prop::collection::vec(0u8..2, n), prop::collection::vec(any::<bool>(), n))
        })
        .prop_map(|(y, mut a, mut left)| {
            for (k, (arm, l)) in [(0, true), (0, true), (1, true), (1, true), (0, false), (0, false), (1, false), (1, false)]
                .into_iter()
                .enumerate()
            {
                a[k] = arm;
                left[k] = l;
            }
            (y, a, left)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn unadjusted_statistic_reduces_to_su_style((y, a, left) in split_cells()) {
        let n = y.len();
        let ds = dataset(y.clone(), a.clone(), vec![0.0; n], 1);
        let est = EstimatorKind::<f64>::unadjusted();
        let est = est.prepare(&ds).unwrap();
        let (l, r): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| left[i]);
        let el = est.effect(&l).unwrap();
        let er = est.effect(&r).unwrap();
        let g = split_statistic((el.effect, el.var), (er.effect, er.var)).unwrap();
        let su = su_style(&y, &a, &left);
        prop_assert!((g - su).abs() <= 1e-12 * su.abs().max(1.0), "{g} vs {su}");
    }
}

struct Constant(f64);

impl ConditionalMean<f64> for Constant {
    fn predict(&self, _a: u8, _x: &[f64]) -> cait::Result<f64> {
        Ok(self.0)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn constant_augmentation_is_unadjusted(ds in trial(5..80, 2), c in -100.0..100.0f64) {
        let m = mask_all(&ds);
        for arm in 0..2 {
            let da = mu_data_adaptive(&ds, &m, arm, &Constant(c)).unwrap();
            let un = mu_unadjusted(&ds, &m, arm).unwrap();
            prop_assert!((da.mu_hat - un.mu_hat).abs() <= 1e-12 * un.mu_hat.abs().max(1.0));
        }
    }

    #[test]
    fn child_masks_partition_the_parent(ds in trial(5..60, 2), column in 0usize..2, t in -3.0..3.0f64, keep in prop::collection::vec(any::<bool>(), 60)) {
        let rows: Vec<usize> = (0..ds.n()).filter(|&i| i == 0 || keep[i]).collect();
        let parent = SubgroupMask::from_rows(&ds, &rows).unwrap();
        let rule = SplitRule::Threshold { column, threshold: t };
        let left = parent.refine(&ds, |x| rule.goes_left(x).unwrap());
        let right = parent.refine(&ds, |x| !rule.goes_left(x).unwrap());
        let flags = |m: &Option<SubgroupMask>| m.as_ref().map(|m| m.flags().to_vec()).unwrap_or(vec![false; ds.n()]);
        let (fl, fr) = (flags(&left), flags(&right));
        for i in 0..ds.n() {
            prop_assert!(!(fl[i] && fr[i]));
            prop_assert_eq!(fl[i] || fr[i], parent.contains(i));
        }
    }

    #[test]
    fn identity_irls_matches_least_squares(ds in trial(12..80, 3)) {
        let fit = fit_glm(&ds, &mask_all(&ds), &DesignSpec::main_effects(0..3), Link::Identity);
        let n = ds.n();
        let x = DMatrix::from_fn(n, 5, |i, j| match j {
            0 => 1.0,
            1 => ds.a(i) as f64,
            _ => ds.x(i)[j - 2],
        });
        let y = DVector::from_column_slice(ds.outcomes());
        let xtx = x.transpose() * &x;
        // Skip designs too close to collinear for either solver to be meaningful.
        let Some(chol) = xtx.clone().cholesky() else { return Ok(()) };
        let eig = xtx.symmetric_eigenvalues();
        prop_assume!(eig.min() > 1e-6 * eig.max());
        let ols = chol.solve(&(x.transpose() * y));
        let fit = fit.unwrap();
        for j in 0..5 {
            prop_assert!((fit.beta[j] - ols[j]).abs() <= 1e-8 * ols[j].abs().max(1.0), "coef {j}: {} vs {}", fit.beta[j], ols[j]);
        }
    }
}

/// A random binary tree: each step splits the leaf picked by `picks[k]`
/// and gives the new internal node statistic `gs[k]`.
fn random_tree(picks: &[usize], gs: &[f64]) -> Tree<f64> {
    let node = |id, depth, parent| TreeNode {
        id,
        depth,
        parent,
        rows: vec![],
        n1: 0,
        effect: 0.0,
        effect_var: 0.0,
        split: None,
        g: None,
        children: None,
    };
    let mut nodes = vec![node(0, 0, None)];
    let mut leaves = vec![0usize];
    for (k, (&pick, &g)) in picks.iter().zip(gs).enumerate() {
        let id = leaves.remove(pick % leaves.len());
        let (l, r) = (2 * k + 1, 2 * k + 2);
        let depth = nodes[id].depth + 1;
        let target = nodes.iter_mut().find(|n| n.id == id).unwrap();
        target.split = Some(SplitRule::Threshold { column: 0, threshold: k as f64 });
        target.g = Some(g);
        target.children = Some((l, r));
        nodes.push(node(l, depth, Some(id)));
        nodes.push(node(r, depth, Some(id)));
        // Ids are assigned densely, so `nodes[id]` stays valid.
        leaves.extend([l, r]);
    }
    Tree::from_nodes(nodes).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn weakest_link_sequence_is_nested_and_exact(
        picks in prop::collection::vec(0usize..64, 0..20),
        gs in prop::collection::vec(0.0..25.0f64, 20),
    ) {
        let tree = random_tree(&picks, &gs);
        let seq = weakest_link_sequence(&tree).unwrap();
        prop_assert_eq!(seq.trees.len(), seq.critical_lambdas.len() + 1);
        prop_assert!(seq.trees.last().unwrap().is_root_only());
        for (k, pair) in seq.trees.windows(2).enumerate() {
            let (big, small) = (&pair[0], &pair[1]);
            let big_ids: BTreeSet<usize> = big.nodes().map(|n| n.id).collect();
            for n in small.nodes() {
                prop_assert!(big_ids.contains(&n.id));
                prop_assert_eq!(n.parent, big.node(n.id).unwrap().parent);
            }
            prop_assert!(small.n_internal() < big.n_internal());
            // At its threshold the removed branch contributes nothing.
            let lambda = seq.critical_lambdas[k];
            let diff = split_complexity(big, lambda).unwrap() - split_complexity(small, lambda).unwrap();
            prop_assert!(diff.abs() <= 1e-10, "step {k}: {diff}");
        }
    }
}

#[test]
fn csv_round_trip_is_exact_for_simulated_data() {
    use cait::simulation::{gen_sample, EffectKind, SimSetting};
    let ds = gen_sample::<f64>(&SimSetting::continuous(EffectKind::Heterogeneous, 200), 200, 17).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    cait::data::write_csv(&ds, &path).unwrap();
    let back: TrialDataset<f64> = cait::load_csv(&path, &cait::data::schema_of(&ds), "y", "a").unwrap();
    assert_eq!(back.treatments(), ds.treatments());
    for (u, v) in back.outcomes().iter().zip(ds.outcomes()).chain(back.covariates().iter().zip(ds.covariates())) {
        assert_relative_eq!(*u, *v, max_relative = 1e-15);
    }
}
