//! Bagged tree ensembles: Random Forest (bootstrap + best splits) and
//! Extra Trees (full sample + random thresholds).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{fit_cart, CartParams, Criterion, SplitMode, Tree};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxFeatures {
    Sqrt,
    All,
    Count(usize),
}

impl MaxFeatures {
    pub fn resolve(self, p: usize) -> usize {
        match self {
            MaxFeatures::Sqrt => ((p as f64).sqrt().floor() as usize).max(1),
            MaxFeatures::All => p,
            MaxFeatures::Count(c) => c.clamp(1, p.max(1)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub bootstrap: bool,
    pub split: SplitMode,
    pub max_features: MaxFeatures,
    pub max_depth: Option<usize>,
}

impl ForestParams {
    pub fn random_forest() -> Self {
        Self {
            n_trees: 300,
            bootstrap: true,
            split: SplitMode::Best,
            max_features: MaxFeatures::Sqrt,
            max_depth: None,
        }
    }

    pub fn extra_trees() -> Self {
        Self {
            bootstrap: false,
            split: SplitMode::Random,
            ..Self::random_forest()
        }
    }
}

impl Default for ForestParams {
    fn default() -> Self {
        Self::random_forest()
    }
}

#[derive(Deserialize)]
struct ForestOverrides {
    n_trees: Option<usize>,
    bootstrap: Option<bool>,
    split: Option<SplitMode>,
    max_features: Option<MaxFeatures>,
    max_depth: Option<usize>,
}

impl ForestOverrides {
    fn apply(self, base: ForestParams) -> ForestParams {
        ForestParams {
            n_trees: self.n_trees.unwrap_or(base.n_trees),
            bootstrap: self.bootstrap.unwrap_or(base.bootstrap),
            split: self.split.unwrap_or(base.split),
            max_features: self.max_features.unwrap_or(base.max_features),
            max_depth: self.max_depth.or(base.max_depth),
        }
    }
}

pub(crate) fn deserialize_random_forest<'de, D: serde::Deserializer<'de>>(d: D) -> Result<ForestParams, D::Error> {
    Ok(ForestOverrides::deserialize(d)?.apply(ForestParams::random_forest()))
}

pub(crate) fn deserialize_extra_trees<'de, D: serde::Deserializer<'de>>(d: D) -> Result<ForestParams, D::Error> {
    Ok(ForestOverrides::deserialize(d)?.apply(ForestParams::extra_trees()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<Tree>,
}

impl ForestModel {
    /// Mean of per-tree positive-class leaf frequencies.
    pub fn probability(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(row)).sum::<f64>() / self.trees.len() as f64
    }
}

/// Training rows for tree `t`: a bootstrap draw or every row once.
pub(crate) fn tree_samples(n: usize, bootstrap: bool, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if bootstrap {
        (0..n).map(|_| rng.gen_range(0..n)).collect()
    } else {
        (0..n).collect()
    }
}

pub fn fit_forest(x: &Matrix, y: &[u8], params: &ForestParams, seed: u64) -> Result<ForestModel> {
    if x.rows() != y.len() {
        return Err(Error::contract("label count differs from row count"));
    }
    if params.n_trees == 0 {
        return Err(Error::Config("forest needs at least one tree".into()));
    }
    if y.iter().all(|&v| v == 1) || y.iter().all(|&v| v == 0) {
        return Err(Error::Fit("forest needs both classes".into()));
    }
    let target: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
    let cart = CartParams {
        criterion: Criterion::Gini,
        split: params.split,
        max_depth: params.max_depth,
        max_features: Some(params.max_features.resolve(x.cols())),
        min_samples_split: 2,
    };
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream_rng(seed, t as u64);
            let samples = tree_samples(x.rows(), params.bootstrap, &mut rng);
            fit_cart(x, &target, &samples, &cart, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ForestModel { trees })
}
