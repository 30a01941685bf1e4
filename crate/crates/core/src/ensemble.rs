//! Stacking: base classifiers produce out-of-fold positive-class
//! probabilities, a balanced logistic regression learns from them, and the
//! base classifiers are refit on all rows for inference.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Scorer;
use crate::matrix::Matrix;
use crate::models::logreg::sigmoid;
use crate::models::{self, fit_logreg, LogRegParams, LogisticModel, ModelSpec, TrainedClassifier};
use crate::preprocess::stratified_kfold;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaFeatureMode {
    #[default]
    OutOfFold,
    /// Base models see every row, including the one being scored. Only for
    /// demonstrating leakage.
    InFold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StackingConfig {
    pub base: Vec<ModelSpec>,
    pub n_folds: usize,
    pub meta: LogRegParams,
    pub mode: MetaFeatureMode,
}

impl Default for StackingConfig {
    fn default() -> Self {
        Self {
            base: ModelSpec::stage1_defaults(),
            n_folds: 5,
            meta: LogRegParams::default(),
            mode: MetaFeatureMode::OutOfFold,
        }
    }
}

/// Which rows trained the model that produced each meta-feature row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub fold_of: Vec<usize>,
    /// Training rows of each fold's base models.
    pub train_rows: Vec<Vec<usize>>,
    /// Fold whose models produced meta row i.
    pub source_fold: Vec<usize>,
}

impl FoldPlan {
    /// True when no meta row was produced by a model that trained on it.
    pub fn leakage_free(&self) -> bool {
        self.source_fold
            .iter()
            .enumerate()
            .all(|(i, &f)| self.train_rows[f].binary_search(&i).is_err())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackingModel {
    pub base_models: Vec<TrainedClassifier>,
    pub meta: LogisticModel,
    pub plan: FoldPlan,
    /// n × B matrix the meta-learner was fit on.
    pub meta_features: Matrix,
}

pub fn fit_stacking(x: &Matrix, y: &[u8], names: &[String], cfg: &StackingConfig, seed: u64) -> Result<StackingModel> {
    if cfg.base.is_empty() {
        return Err(Error::Config("stacking needs at least one base model".into()));
    }
    if cfg.n_folds < 2 {
        return Err(Error::Config(format!("stacking needs at least 2 folds, got {}", cfg.n_folds)));
    }
    if x.rows() != y.len() {
        return Err(Error::contract("label count differs from row count"));
    }
    let n = y.len();
    let b = cfg.base.len();
    let fold_of = stratified_kfold(y, cfg.n_folds, seed)?;
    let train_rows: Vec<Vec<usize>> = (0..cfg.n_folds)
        .map(|f| match cfg.mode {
            MetaFeatureMode::OutOfFold => (0..n).filter(|&i| fold_of[i] != f).collect(),
            MetaFeatureMode::InFold => (0..n).collect(),
        })
        .collect();

    let jobs: Vec<(usize, usize)> = (0..cfg.n_folds).flat_map(|f| (0..b).map(move |m| (f, m))).collect();
    let preds = jobs
        .par_iter()
        .map(|&(f, m)| -> Result<Vec<(usize, f64)>> {
            let rows = &train_rows[f];
            let yt: Vec<u8> = rows.iter().map(|&i| y[i]).collect();
            let model = models::fit(&cfg.base[m], &x.select_rows(rows), &yt, names, seed)?;
            let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
            let p = model.predict_positive(&x.select_rows(&test))?;
            Ok(test.into_iter().zip(p).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta_features = Matrix::zeros(n, b);
    for (&(_, m), rows) in jobs.iter().zip(preds) {
        for (i, p) in rows {
            meta_features.set(i, m, p);
        }
    }
    let base_models = cfg
        .base
        .par_iter()
        .map(|spec| models::fit(spec, x, y, names, seed))
        .collect::<Result<Vec<_>>>()?;
    let meta = fit_logreg(&meta_features, y, &cfg.meta)?;
    Ok(StackingModel {
        base_models,
        meta,
        plan: FoldPlan {
            source_fold: fold_of.clone(),
            fold_of,
            train_rows,
        },
        meta_features,
    })
}

impl StackingModel {
    pub fn meta_features_for(&self, x: &Matrix) -> Result<Matrix> {
        let cols = self
            .base_models
            .iter()
            .map(|m| m.predict_positive(x))
            .collect::<Result<Vec<_>>>()?;
        Matrix::from_columns(&cols)
    }

    pub fn decision_score(&self, x: &Matrix) -> Result<Vec<f64>> {
        let z = self.meta_features_for(x)?;
        Ok(z.iter_rows().map(|r| self.meta.score(r)).collect())
    }

    pub fn predict_positive(&self, x: &Matrix) -> Result<Vec<f64>> {
        Ok(self.decision_score(x)?.into_iter().map(sigmoid).collect())
    }

    pub fn predict_proba(&self, x: &Matrix) -> Result<Vec<[f64; 2]>> {
        Ok(self.predict_positive(x)?.into_iter().map(|p| [1.0 - p, p]).collect())
    }

    /// Meta-learner accuracy on its own training meta-features.
    pub fn meta_training_accuracy(&self, y: &[u8]) -> f64 {
        let hits = self
            .meta_features
            .iter_rows()
            .zip(y)
            .filter(|(r, &t)| u8::from(self.meta.score(r) >= 0.0) == t)
            .count();
        hits as f64 / y.len() as f64
    }
}

impl Scorer for StackingModel {
    fn positive_proba(&self, x: &Matrix) -> Result<Vec<f64>> {
        self.predict_positive(x)
    }

    fn ranking_score(&self, x: &Matrix) -> Result<Vec<f64>> {
        self.decision_score(x)
    }
}
