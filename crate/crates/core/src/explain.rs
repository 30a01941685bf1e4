//! Path-dependent TreeSHAP for the tree ensembles and consensus ranking of
//! mean |φ| across models.
//!
//! Forest attributions are in probability space (mean leaf frequency);
//! gradient-boosting attributions are in log-odds space.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::CVSummary;
use crate::matrix::Matrix;
use crate::models::{ModelFamily, TrainedClassifier, Tree, TreeCombination, TreeEnsembleView, TreeNode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputSpace {
    Probability,
    LogOdds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapAttribution {
    pub model: String,
    pub feature_names: Vec<String>,
    pub output_space: OutputSpace,
    /// Expected raw output under the training cover distribution.
    pub base_value: f64,
    /// n_instances × n_features.
    pub phi: Matrix,
}

impl ShapAttribution {
    pub fn mean_abs(&self) -> Vec<f64> {
        let n = self.phi.rows().max(1) as f64;
        (0..self.phi.cols())
            .map(|j| self.phi.column(j).iter().map(|v| v.abs()).sum::<f64>() / n)
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct PathElem {
    feature: Option<usize>,
    zero: f64,
    one: f64,
    weight: f64,
}

fn extend_path(path: &mut [PathElem], depth: usize, zero: f64, one: f64, feature: Option<usize>) {
    path[depth] = PathElem {
        feature,
        zero,
        one,
        weight: if depth == 0 { 1.0 } else { 0.0 },
    };
    let d1 = (depth + 1) as f64;
    for i in (0..depth).rev() {
        path[i + 1].weight += one * path[i].weight * (i + 1) as f64 / d1;
        path[i].weight = zero * path[i].weight * (depth - i) as f64 / d1;
    }
}

fn unwind_path(path: &mut [PathElem], depth: usize, index: usize) {
    let (one, zero) = (path[index].one, path[index].zero);
    let d1 = (depth + 1) as f64;
    let mut next = path[depth].weight;
    for i in (0..depth).rev() {
        if one != 0.0 {
            let tmp = path[i].weight;
            path[i].weight = next * d1 / ((i + 1) as f64 * one);
            next = tmp - path[i].weight * zero * (depth - i) as f64 / d1;
        } else {
            path[i].weight = path[i].weight * d1 / (zero * (depth - i) as f64);
        }
    }
    for i in index..depth {
        path[i].feature = path[i + 1].feature;
        path[i].zero = path[i + 1].zero;
        path[i].one = path[i + 1].one;
    }
}

fn unwound_path_sum(path: &[PathElem], depth: usize, index: usize) -> f64 {
    let (one, zero) = (path[index].one, path[index].zero);
    let d1 = (depth + 1) as f64;
    let mut next = path[depth].weight;
    let mut total = 0.0;
    for i in (0..depth).rev() {
        if one != 0.0 {
            let tmp = next * d1 / ((i + 1) as f64 * one);
            total += tmp;
            next = path[i].weight - tmp * zero * (depth - i) as f64 / d1;
        } else if zero != 0.0 {
            total += path[i].weight / zero / ((depth - i) as f64 / d1);
        }
    }
    total
}

struct Walk<'a> {
    nodes: &'a [TreeNode],
    x: &'a [f64],
    scale: f64,
}

impl Walk<'_> {
    fn recurse(&self, node: usize, phi: &mut [f64], parent: &[PathElem], zero: f64, one: f64, feature: Option<usize>) {
        let mut path = parent.to_vec();
        let depth = path.len();
        path.push(PathElem {
            feature: None,
            zero: 0.0,
            one: 0.0,
            weight: 0.0,
        });
        extend_path(&mut path, depth, zero, one, feature);
        match self.nodes[node] {
            TreeNode::Leaf { value, .. } => {
                for i in 1..=depth {
                    let w = unwound_path_sum(&path, depth, i);
                    let el = path[i];
                    if let Some(f) = el.feature {
                        phi[f] += w * (el.one - el.zero) * value * self.scale;
                    }
                }
            }
            TreeNode::Internal {
                feature: split,
                threshold,
                left,
                right,
                cover,
            } => {
                let (hot, cold) = if self.x[split] <= threshold {
                    (left, right)
                } else {
                    (right, left)
                };
                let w = cover as f64;
                let hot_zero = self.nodes[hot].cover() as f64 / w;
                let cold_zero = self.nodes[cold].cover() as f64 / w;
                let (mut in_zero, mut in_one) = (1.0, 1.0);
                if let Some(k) = (1..=depth).find(|&k| path[k].feature == Some(split)) {
                    in_zero = path[k].zero;
                    in_one = path[k].one;
                    unwind_path(&mut path, depth, k);
                    path.truncate(depth);
                }
                self.recurse(hot, phi, &path, hot_zero * in_zero, in_one, Some(split));
                self.recurse(cold, phi, &path, cold_zero * in_zero, 0.0, Some(split));
            }
        }
    }
}

fn check_covers(tree: &Tree) -> Result<()> {
    if tree.nodes().iter().any(|n| n.cover() == 0) {
        return Err(Error::contract("tree node without cover count"));
    }
    Ok(())
}

/// Adds `scale · φ(tree, x)` into `phi`.
pub fn tree_shap_single(tree: &Tree, x: &[f64], scale: f64, phi: &mut [f64]) {
    let walk = Walk {
        nodes: tree.nodes(),
        x,
        scale,
    };
    walk.recurse(0, phi, &[], 1.0, 1.0, None);
}

/// SHAP values of every row of `x` for an additive tree ensemble.
pub fn tree_shap_view(view: &TreeEnsembleView<'_>, x: &Matrix) -> Result<(f64, Matrix)> {
    for t in view.trees {
        check_covers(t)?;
    }
    let (scale, offset) = match view.combination {
        TreeCombination::Mean => (1.0 / view.trees.len() as f64, 0.0),
        TreeCombination::Sum { offset } => (1.0, offset),
    };
    let base = offset + scale * view.trees.iter().map(Tree::expected_value).sum::<f64>();
    let p = x.cols();
    let rows = (0..x.rows())
        .into_par_iter()
        .map(|i| {
            let mut phi = vec![0.0; p];
            for t in view.trees {
                tree_shap_single(t, x.row(i), scale, &mut phi);
            }
            phi
        })
        .collect::<Vec<_>>();
    let phi = if rows.is_empty() {
        Matrix::zeros(0, p)
    } else {
        Matrix::from_rows(&rows)?
    };
    Ok((base, phi))
}

pub fn tree_shap(model: &TrainedClassifier, x: &Matrix) -> Result<ShapAttribution> {
    let view = model
        .tree_ensemble()
        .ok_or_else(|| Error::contract(format!("{} has no tree structure", model.name)))?;
    if x.cols() != model.n_features() {
        return Err(Error::contract(format!(
            "{} expects {} features, got {}",
            model.name,
            model.n_features(),
            x.cols()
        )));
    }
    let (base_value, phi) = tree_shap_view(&view, x)?;
    Ok(ShapAttribution {
        model: model.name.clone(),
        feature_names: model.feature_names.clone(),
        output_space: match view.combination {
            TreeCombination::Mean => OutputSpace::Probability,
            TreeCombination::Sum { .. } => OutputSpace::LogOdds,
        },
        base_value,
        phi,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelImportance {
    pub model: String,
    pub mean_abs: Vec<f64>,
    /// 1-based rank per feature (1 = largest mean |φ|).
    pub rank: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusRanking {
    pub feature_names: Vec<String>,
    pub per_model: Vec<ModelImportance>,
    pub average_rank: Vec<f64>,
    /// Feature names, most important first.
    pub order: Vec<String>,
}

fn rank_desc(values: &[f64], names: &[String]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then_with(|| names[a].cmp(&names[b])));
    let mut rank = vec![0; values.len()];
    for (r, &i) in idx.iter().enumerate() {
        rank[i] = r + 1;
    }
    rank
}

pub fn consensus_rank(attributions: &[ShapAttribution]) -> Result<ConsensusRanking> {
    let first = attributions
        .first()
        .ok_or_else(|| Error::contract("consensus needs at least one attribution"))?;
    let names = first.feature_names.clone();
    if let Some(bad) = attributions.iter().find(|a| a.feature_names != names) {
        return Err(Error::contract(format!("{} uses a different feature set", bad.model)));
    }
    let per_model: Vec<ModelImportance> = attributions
        .iter()
        .map(|a| {
            let mean_abs = a.mean_abs();
            ModelImportance {
                model: a.model.clone(),
                rank: rank_desc(&mean_abs, &names),
                mean_abs,
            }
        })
        .collect();
    let m = per_model.len() as f64;
    let average_rank: Vec<f64> = (0..names.len())
        .map(|j| per_model.iter().map(|pm| pm.rank[j] as f64).sum::<f64>() / m)
        .collect();
    let mut idx: Vec<usize> = (0..names.len()).collect();
    idx.sort_by(|&a, &b| average_rank[a].total_cmp(&average_rank[b]).then_with(|| names[a].cmp(&names[b])));
    Ok(ConsensusRanking {
        order: idx.iter().map(|&i| names[i].clone()).collect(),
        feature_names: names,
        per_model,
        average_rank,
    })
}

/// Tree-ensemble summaries ordered by mean CV ROC-AUC, then recall, then name.
pub fn rank_tree_models(summaries: &[CVSummary]) -> Vec<&CVSummary> {
    let mut trees: Vec<&CVSummary> = summaries.iter().filter(|s| s.family == ModelFamily::TreeEnsemble).collect();
    trees.sort_by(|a, b| {
        b.mean
            .roc_auc
            .total_cmp(&a.mean.roc_auc)
            .then_with(|| b.mean.recall.total_cmp(&a.mean.recall))
            .then_with(|| a.model.cmp(&b.model))
    });
    trees
}

pub fn select_strongest_tree_model(summaries: &[CVSummary]) -> Result<String> {
    rank_tree_models(summaries)
        .first()
        .map(|s| s.model.clone())
        .ok_or_else(|| Error::Config("no tree-ensemble model among the CV summaries".into()))
}

/// Mean |φ| per feature, keyed by name.
pub fn mean_abs_summary(attr: &ShapAttribution) -> BTreeMap<String, f64> {
    attr.feature_names.iter().cloned().zip(attr.mean_abs()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::MetricSet;

    fn stump(feature: usize, lo: f64, hi: f64) -> Tree {
        Tree::from_nodes(vec![
            TreeNode::Internal {
                feature,
                threshold: 0.0,
                left: 1,
                right: 2,
                cover: 10,
            },
            TreeNode::Leaf { value: lo, cover: 4 },
            TreeNode::Leaf { value: hi, cover: 6 },
        ])
        .unwrap()
    }

    #[test]
    fn stump_gives_all_credit_to_its_feature() {
        let t = stump(1, 2.0, 5.0);
        let base = t.expected_value();
        assert!((base - 3.8).abs() < 1e-12);
        for x in [[0.0, -1.0, 3.0], [0.0, 1.0, 3.0]] {
            let mut phi = vec![0.0; 3];
            tree_shap_single(&t, &x, 1.0, &mut phi);
            assert!((phi[1] - (t.predict(&x) - base)).abs() < 1e-12);
            assert_eq!(phi[0], 0.0);
            assert_eq!(phi[2], 0.0);
        }
    }

    #[test]
    fn single_leaf_is_all_zero() {
        let t = Tree::leaf(0.7, 5);
        let mut phi = vec![0.0; 2];
        tree_shap_single(&t, &[1.0, 2.0], 1.0, &mut phi);
        assert_eq!(phi, vec![0.0, 0.0]);
        assert_eq!(t.expected_value(), 0.7);
    }

    #[test]
    fn symmetric_features_share_credit() {
        // x0 and x1 play identical roles
        let t = Tree::from_nodes(vec![
            TreeNode::Internal { feature: 0, threshold: 0.5, left: 1, right: 2, cover: 8 },
            TreeNode::Internal { feature: 1, threshold: 0.5, left: 3, right: 4, cover: 4 },
            TreeNode::Internal { feature: 1, threshold: 0.5, left: 5, right: 6, cover: 4 },
            TreeNode::Leaf { value: 0.0, cover: 2 },
            TreeNode::Leaf { value: 1.0, cover: 2 },
            TreeNode::Leaf { value: 1.0, cover: 2 },
            TreeNode::Leaf { value: 2.0, cover: 2 },
        ])
        .unwrap();
        let mut phi = vec![0.0; 2];
        tree_shap_single(&t, &[1.0, 1.0], 1.0, &mut phi);
        assert!((phi[0] - phi[1]).abs() < 1e-12);
        assert!((phi[0] + phi[1] + t.expected_value() - 2.0).abs() < 1e-12);
    }

    fn attr(model: &str, names: &[&str], phi: &[f64]) -> ShapAttribution {
        ShapAttribution {
            model: model.into(),
            feature_names: names.iter().map(|s| s.to_string()).collect(),
            output_space: OutputSpace::Probability,
            base_value: 0.0,
            phi: Matrix::new(1, phi.len(), phi.to_vec()).unwrap(),
        }
    }

    #[test]
    fn consensus_cases() {
        let a = attr("m1", &["A", "B", "C"], &[0.5, 0.3, 0.1]);
        let b = attr("m2", &["A", "B", "C"], &[0.3, -0.5, 0.1]);
        assert_eq!(consensus_rank(&[a.clone()]).unwrap().order, ["A", "B", "C"]);
        assert_eq!(consensus_rank(&[a.clone(), a.clone()]).unwrap().order, ["A", "B", "C"]);
        let c = consensus_rank(&[a.clone(), b]).unwrap();
        assert_eq!(c.order[2], "C");
        // A and B tie on average rank: name order decides
        assert_eq!(c.order[..2], ["A", "B"]);
        let other = attr("m3", &["A", "B", "D"], &[0.1, 0.1, 0.1]);
        assert!(consensus_rank(&[a, other]).is_err());
    }

    fn summary(name: &str, family: ModelFamily, auc: f64, recall: f64) -> CVSummary {
        let m = MetricSet {
            roc_auc: auc,
            recall,
            ..MetricSet::default()
        };
        CVSummary::from_folds(name, family, vec![m.clone(), m], vec![])
    }

    #[test]
    fn strongest_tree_model() {
        let s = vec![
            summary("SVM-RBF", ModelFamily::Kernel, 0.9, 0.5),
            summary("RandomForest", ModelFamily::TreeEnsemble, 0.821, 0.5),
            summary("ExtraTrees", ModelFamily::TreeEnsemble, 0.814, 0.5),
            summary("GradBoost", ModelFamily::TreeEnsemble, 0.807, 0.5),
        ];
        assert_eq!(select_strongest_tree_model(&s).unwrap(), "RandomForest");
        assert_eq!(select_strongest_tree_model(&s[2..3]).unwrap(), "ExtraTrees");
        let tie = vec![
            summary("RandomForest", ModelFamily::TreeEnsemble, 0.8, 0.5),
            summary("ExtraTrees", ModelFamily::TreeEnsemble, 0.8, 0.6),
        ];
        assert_eq!(select_strongest_tree_model(&tie).unwrap(), "ExtraTrees");
        assert!(select_strongest_tree_model(&s[..1]).is_err());
    }
}
