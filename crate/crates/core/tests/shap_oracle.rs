mod common;

use common::{brute_force_shap, random_tree, rng};
use rand::Rng;
use tristage::explain::{tree_shap, tree_shap_single};
use tristage::models::{fit, ModelSpec};
use tristage::Matrix;

#[test]
fn random_trees_match_subset_enumeration() {
    let mut r = rng(11);
    for t in 0..60 {
        let p = r.gen_range(1..=8);
        let tree = random_tree(&mut r, p, 4);
        for _ in 0..3 {
            let x: Vec<f64> = (0..p).map(|_| r.gen_range(0.0..1.0)).collect();
            let want = brute_force_shap(&tree, &x);
            let mut got = vec![0.0; p];
            tree_shap_single(&tree, &x, 1.0, &mut got);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-9, "tree {t}: {got:?} vs {want:?}");
            }
            let total: f64 = got.iter().sum::<f64>() + tree.expected_value();
            assert!((total - tree.predict(&x)).abs() < 1e-9);
        }
    }
}

#[test]
fn repeated_feature_on_one_path() {
    use tristage::models::{Tree, TreeNode};
    let tree = Tree::from_nodes(vec![
        TreeNode::Internal { feature: 0, threshold: 0.5, left: 1, right: 4, cover: 10 },
        TreeNode::Internal { feature: 0, threshold: 0.2, left: 2, right: 3, cover: 6 },
        TreeNode::Leaf { value: 1.0, cover: 2 },
        TreeNode::Leaf { value: 3.0, cover: 4 },
        TreeNode::Internal { feature: 1, threshold: 0.5, left: 5, right: 6, cover: 4 },
        TreeNode::Leaf { value: -1.0, cover: 1 },
        TreeNode::Leaf { value: 5.0, cover: 3 },
    ])
    .unwrap();
    for x in [[0.1, 0.9], [0.3, 0.1], [0.8, 0.8], [0.8, 0.2]] {
        let mut got = vec![0.0; 2];
        tree_shap_single(&tree, &x, 1.0, &mut got);
        let want = brute_force_shap(&tree, &x);
        assert!((got[0] - want[0]).abs() < 1e-12 && (got[1] - want[1]).abs() < 1e-12);
    }
}

fn toy_data(n: usize, seed: u64) -> (Matrix, Vec<u8>) {
    let mut r = rng(seed);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..5).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
    let y = rows
        .iter()
        .map(|v| u8::from(v[0] + 0.5 * v[1] * v[2] + 0.3 * r.gen_range(-1.0..1.0) > 0.0))
        .collect();
    (Matrix::from_rows(&rows).unwrap(), y)
}

#[test]
fn local_accuracy_for_fitted_ensembles() {
    let (x, y) = toy_data(150, 3);
    let names: Vec<String> = (0..5).map(|j| format!("f{j}")).collect();
    let mut specs = vec![ModelSpec::random_forest(), ModelSpec::extra_trees(), ModelSpec::grad_boost()];
    for s in &mut specs {
        if let ModelSpec::RandomForest(p) | ModelSpec::ExtraTrees(p) = s {
            p.n_trees = 40;
        }
    }
    for spec in specs {
        let m = fit(&spec, &x, &y, &names, 5).unwrap();
        let attr = tree_shap(&m, &x).unwrap();
        let out = m.decision_score(&x).unwrap();
        for i in 0..x.rows() {
            let total = attr.base_value + attr.phi.row(i).iter().sum::<f64>();
            assert!((total - out[i]).abs() < 1e-9, "{} row {i}", m.name);
        }
    }
}

#[test]
fn non_tree_models_are_refused() {
    let (x, y) = toy_data(60, 4);
    let names: Vec<String> = (0..5).map(|j| format!("f{j}")).collect();
    let m = fit(&ModelSpec::log_reg(), &x, &y, &names, 0).unwrap();
    assert!(tree_shap(&m, &x).is_err());
}
