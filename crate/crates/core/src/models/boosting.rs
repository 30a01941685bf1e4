//! Gradient boosting on the logistic deviance with depth-limited regression
//! trees and one Newton step per leaf.

use serde::{Deserialize, Serialize};

use super::logreg::sigmoid;
use super::tree::{fit_cart, CartParams, Criterion, SplitMode, Tree, TreeNode};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoostParams {
    pub n_trees: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
}

impl Default for BoostParams {
    fn default() -> Self {
        Self {
            n_trees: 200,
            learning_rate: 0.1,
            max_depth: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostModel {
    /// Log-odds of the training base rate.
    pub init: f64,
    pub learning_rate: f64,
    /// Leaf values already multiplied by the learning rate.
    pub trees: Vec<Tree>,
    /// Mean training deviance after each stage (index 0 = initial model).
    pub train_deviance: Vec<f64>,
}

impl BoostModel {
    pub fn raw_score(&self, row: &[f64]) -> f64 {
        self.init + self.trees.iter().map(|t| t.predict(row)).sum::<f64>()
    }

    pub fn probability(&self, row: &[f64]) -> f64 {
        sigmoid(self.raw_score(row))
    }
}

fn deviance(f: &[f64], y: &[f64]) -> f64 {
    let n = f.len() as f64;
    f.iter()
        .zip(y)
        .map(|(&z, &yi)| z.max(0.0) + (-z.abs()).exp().ln_1p() - yi * z)
        .sum::<f64>()
        * 2.0
        / n
}

pub fn fit_gradient_boosting(x: &Matrix, y: &[u8], params: &BoostParams, seed: u64) -> Result<BoostModel> {
    if x.rows() != y.len() {
        return Err(Error::contract("label count differs from row count"));
    }
    if !(params.learning_rate > 0.0) {
        return Err(Error::Config(format!(
            "learning rate must be positive, got {}",
            params.learning_rate
        )));
    }
    let n = y.len();
    let n1 = y.iter().filter(|&&v| v == 1).count();
    if n1 == 0 || n1 == n {
        return Err(Error::Fit("gradient boosting needs both classes".into()));
    }
    let yf: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
    let init = (n1 as f64 / (n - n1) as f64).ln();
    let mut f = vec![init; n];
    let mut trees = Vec::with_capacity(params.n_trees);
    let mut train_deviance = vec![deviance(&f, &yf)];
    let cart = CartParams {
        criterion: Criterion::Variance,
        split: SplitMode::Best,
        max_depth: Some(params.max_depth),
        max_features: None,
        min_samples_split: 2,
    };
    let all: Vec<usize> = (0..n).collect();
    for stage in 0..params.n_trees {
        let p: Vec<f64> = f.iter().map(|&z| sigmoid(z)).collect();
        let resid: Vec<f64> = yf.iter().zip(&p).map(|(a, b)| a - b).collect();
        let mut rng = stream_rng(seed, stage as u64);
        let mut tree = fit_cart(x, &resid, &all, &cart, &mut rng)?;
        let mut num = vec![0.0; tree.nodes().len()];
        let mut den = vec![0.0; tree.nodes().len()];
        let leaf_of: Vec<usize> = x.iter_rows().map(|r| tree.leaf_index(r)).collect();
        for i in 0..n {
            num[leaf_of[i]] += resid[i];
            den[leaf_of[i]] += p[i] * (1.0 - p[i]);
        }
        for (id, node) in tree.nodes().to_vec().iter().enumerate() {
            if let TreeNode::Leaf { .. } = node {
                let step = if den[id] > 1e-150 { num[id] / den[id] } else { 0.0 };
                tree.set_leaf_value(id, params.learning_rate * step);
            }
        }
        for i in 0..n {
            f[i] += tree.predict(x.row(i));
        }
        train_deviance.push(deviance(&f, &yf));
        trees.push(tree);
    }
    Ok(BoostModel {
        init,
        learning_rate: params.learning_rate,
        trees,
        train_deviance,
    })
}
