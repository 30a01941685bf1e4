//! The five Stage-1 classifiers behind one spec/fit/predict surface.

pub mod boosting;
pub mod forest;
pub mod logreg;
pub mod svm;
pub mod tree;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use boosting::{fit_gradient_boosting, BoostModel, BoostParams};
pub use forest::{fit_forest, ForestModel, ForestParams, MaxFeatures};
pub use logreg::{fit_logreg, LogRegParams, LogisticModel};
pub use svm::{fit_svm, Gamma, PlattScaling, SvmModel, SvmParams};
pub use tree::{fit_cart, CartParams, Criterion, SplitMode, Tree, TreeNode};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum ModelSpec {
    LogReg(LogRegParams),
    SvmRbf(SvmParams),
    #[serde(deserialize_with = "forest::deserialize_random_forest")]
    RandomForest(ForestParams),
    #[serde(deserialize_with = "forest::deserialize_extra_trees")]
    ExtraTrees(ForestParams),
    GradBoost(BoostParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    Linear,
    Kernel,
    TreeEnsemble,
    Stacking,
}

impl ModelSpec {
    pub fn log_reg() -> Self {
        ModelSpec::LogReg(LogRegParams::default())
    }
    pub fn svm_rbf() -> Self {
        ModelSpec::SvmRbf(SvmParams::default())
    }
    pub fn random_forest() -> Self {
        ModelSpec::RandomForest(ForestParams::random_forest())
    }
    pub fn extra_trees() -> Self {
        ModelSpec::ExtraTrees(ForestParams::extra_trees())
    }
    pub fn grad_boost() -> Self {
        ModelSpec::GradBoost(BoostParams::default())
    }

    /// LogReg, SVM-RBF, RandomForest, ExtraTrees, GradBoost.
    pub fn stage1_defaults() -> Vec<ModelSpec> {
        vec![
            Self::log_reg(),
            Self::svm_rbf(),
            Self::random_forest(),
            Self::extra_trees(),
            Self::grad_boost(),
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::LogReg(_) => "LogReg",
            ModelSpec::SvmRbf(_) => "SVM-RBF",
            ModelSpec::RandomForest(_) => "RandomForest",
            ModelSpec::ExtraTrees(_) => "ExtraTrees",
            ModelSpec::GradBoost(_) => "GradBoost",
        }
    }

    pub fn family(&self) -> ModelFamily {
        match self {
            ModelSpec::LogReg(_) => ModelFamily::Linear,
            ModelSpec::SvmRbf(_) => ModelFamily::Kernel,
            _ => ModelFamily::TreeEnsemble,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("{}: {msg}", self.name())));
        match self {
            ModelSpec::LogReg(p) if p.max_iter == 0 => bad("max_iter must be positive".into()),
            ModelSpec::SvmRbf(p) if !(p.c > 0.0) => bad(format!("C must be positive, got {}", p.c)),
            ModelSpec::SvmRbf(SvmParams {
                gamma: Gamma::Value(g),
                ..
            }) if !(*g > 0.0) => bad(format!("gamma must be positive, got {g}")),
            ModelSpec::RandomForest(p) | ModelSpec::ExtraTrees(p) if p.n_trees == 0 => {
                bad("n_trees must be positive".into())
            }
            ModelSpec::GradBoost(p) if p.n_trees == 0 || p.max_depth == 0 => {
                bad("n_trees and max_depth must be positive".into())
            }
            ModelSpec::GradBoost(p) if !(p.learning_rate > 0.0) => {
                bad(format!("learning_rate must be positive, got {}", p.learning_rate))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum FittedModel {
    LogReg(LogisticModel),
    SvmRbf(SvmModel),
    RandomForest(ForestModel),
    ExtraTrees(ForestModel),
    GradBoost(BoostModel),
}

/// How per-tree outputs combine into the model's raw output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TreeCombination {
    /// Average of leaf frequencies (probability space).
    Mean,
    /// Offset plus sum of leaf values (log-odds space).
    Sum { offset: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct TreeEnsembleView<'a> {
    pub trees: &'a [Tree],
    pub combination: TreeCombination,
}

impl TreeEnsembleView<'_> {
    pub fn raw_output(&self, row: &[f64]) -> f64 {
        let s: f64 = self.trees.iter().map(|t| t.predict(row)).sum();
        match self.combination {
            TreeCombination::Mean => s / self.trees.len() as f64,
            TreeCombination::Sum { offset } => offset + s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedClassifier {
    pub name: String,
    pub spec: ModelSpec,
    pub feature_names: Vec<String>,
    pub seed: u64,
    pub model: FittedModel,
}

pub fn fit(spec: &ModelSpec, x: &Matrix, y: &[u8], feature_names: &[String], seed: u64) -> Result<TrainedClassifier> {
    spec.validate()?;
    if feature_names.len() != x.cols() {
        return Err(Error::contract(format!(
            "{} feature names for {} columns",
            feature_names.len(),
            x.cols()
        )));
    }
    if y.iter().any(|&v| v > 1) {
        return Err(Error::Fit("labels must be 0 or 1".into()));
    }
    let model = match spec {
        ModelSpec::LogReg(p) => FittedModel::LogReg(fit_logreg(x, y, p)?),
        ModelSpec::SvmRbf(p) => FittedModel::SvmRbf(fit_svm(x, y, p, seed)?),
        ModelSpec::RandomForest(p) => FittedModel::RandomForest(fit_forest(x, y, p, seed)?),
        ModelSpec::ExtraTrees(p) => FittedModel::ExtraTrees(fit_forest(x, y, p, seed)?),
        ModelSpec::GradBoost(p) => FittedModel::GradBoost(fit_gradient_boosting(x, y, p, seed)?),
    };
    Ok(TrainedClassifier {
        name: spec.name().to_string(),
        spec: spec.clone(),
        feature_names: feature_names.to_vec(),
        seed,
        model,
    })
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    format_version: u32,
    classifier: TrainedClassifier,
}

impl TrainedClassifier {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    fn check_width(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.n_features() {
            return Err(Error::contract(format!(
                "{} expects {} features, got {}",
                self.name,
                self.n_features(),
                x.cols()
            )));
        }
        Ok(())
    }

    fn row_score(&self, row: &[f64]) -> f64 {
        match &self.model {
            FittedModel::LogReg(m) => m.score(row),
            FittedModel::SvmRbf(m) => m.platt.logit(m.decision_value(row)),
            FittedModel::RandomForest(m) | FittedModel::ExtraTrees(m) => m.probability(row),
            FittedModel::GradBoost(m) => m.raw_score(row),
        }
    }

    fn row_proba(&self, row: &[f64]) -> f64 {
        match &self.model {
            FittedModel::LogReg(m) => logreg::sigmoid(m.score(row)),
            FittedModel::SvmRbf(m) => m.platt.probability(m.decision_value(row)),
            FittedModel::RandomForest(m) | FittedModel::ExtraTrees(m) => m.probability(row),
            FittedModel::GradBoost(m) => m.probability(row),
        }
    }

    /// Positive-class probability per row.
    pub fn predict_positive(&self, x: &Matrix) -> Result<Vec<f64>> {
        self.check_width(x)?;
        Ok(x.iter_rows().map(|r| self.row_proba(r)).collect())
    }

    /// `[P(y = 0), P(y = 1)]` per row.
    pub fn predict_proba(&self, x: &Matrix) -> Result<Vec<[f64; 2]>> {
        Ok(self.predict_positive(x)?.into_iter().map(|p| [1.0 - p, p]).collect())
    }

    /// Monotone in the positive-class probability: a logit for the linear,
    /// kernel and boosted models, the probability itself for forests.
    pub fn decision_score(&self, x: &Matrix) -> Result<Vec<f64>> {
        self.check_width(x)?;
        Ok(x.iter_rows().map(|r| self.row_score(r)).collect())
    }

    pub fn tree_ensemble(&self) -> Option<TreeEnsembleView<'_>> {
        match &self.model {
            FittedModel::RandomForest(m) | FittedModel::ExtraTrees(m) => Some(TreeEnsembleView {
                trees: &m.trees,
                combination: TreeCombination::Mean,
            }),
            FittedModel::GradBoost(m) => Some(TreeEnsembleView {
                trees: &m.trees,
                combination: TreeCombination::Sum { offset: m.init },
            }),
            _ => None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelDocument {
            format_version: MODEL_FORMAT_VERSION,
            classifier: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        if doc.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported model format version {}",
                doc.format_version
            )));
        }
        Ok(doc.classifier)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn data(n: usize) -> (Matrix, Vec<u8>, Vec<String>) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let y = rows
            .iter()
            .map(|r| u8::from(r[0] - r[2] + rng.gen_range(-1.0..1.0) > 0.0))
            .collect();
        (Matrix::from_rows(&rows).unwrap(), y, vec!["a".into(), "b".into(), "c".into()])
    }

    fn small_specs() -> Vec<ModelSpec> {
        vec![
            ModelSpec::log_reg(),
            ModelSpec::svm_rbf(),
            ModelSpec::RandomForest(ForestParams {
                n_trees: 20,
                ..ForestParams::random_forest()
            }),
            ModelSpec::ExtraTrees(ForestParams {
                n_trees: 20,
                ..ForestParams::extra_trees()
            }),
            ModelSpec::GradBoost(BoostParams {
                n_trees: 30,
                ..BoostParams::default()
            }),
        ]
    }

    #[test]
    fn probabilities_normalized_and_scores_monotone() {
        let (x, y, names) = data(80);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let probe: Vec<Vec<f64>> = (0..50).map(|_| (0..3).map(|_| rng.gen_range(-4.0..4.0)).collect()).collect();
        let probe = Matrix::from_rows(&probe).unwrap();
        for spec in small_specs() {
            let m = fit(&spec, &x, &y, &names, 3).unwrap();
            let proba = m.predict_proba(&probe).unwrap();
            let score = m.decision_score(&probe).unwrap();
            for (pr, _) in proba.iter().zip(&score) {
                assert!((0.0..=1.0).contains(&pr[1]));
                assert!((pr[0] + pr[1] - 1.0).abs() <= 1e-12);
            }
            for i in 0..score.len() {
                for j in 0..score.len() {
                    if score[i] < score[j] {
                        assert!(proba[i][1] <= proba[j][1], "{}", m.name);
                    }
                }
            }
        }
    }

    #[test]
    fn json_round_trip_preserves_predictions() {
        let (x, y, names) = data(60);
        for spec in small_specs() {
            let m = fit(&spec, &x, &y, &names, 1).unwrap();
            let back = TrainedClassifier::from_json(&m.to_json().unwrap()).unwrap();
            assert_eq!(back.predict_positive(&x).unwrap(), m.predict_positive(&x).unwrap());
        }
    }

    #[test]
    fn width_mismatch_is_contract_error() {
        let (x, y, names) = data(40);
        let m = fit(&ModelSpec::log_reg(), &x, &y, &names, 0).unwrap();
        let narrow = x.select_columns(&[0, 1]);
        assert!(matches!(m.predict_proba(&narrow), Err(Error::Contract(_))));
    }

    #[test]
    fn invalid_specs_rejected() {
        let (x, y, names) = data(20);
        let bad = ModelSpec::SvmRbf(SvmParams {
            c: 0.0,
            ..SvmParams::default()
        });
        assert!(matches!(fit(&bad, &x, &y, &names, 0), Err(Error::Config(_))));
        let bad = ModelSpec::GradBoost(BoostParams {
            learning_rate: -1.0,
            ..BoostParams::default()
        });
        assert!(bad.validate().is_err());
    }

    #[test]
    fn spec_json_uses_variant_tag() {
        let s = serde_json::to_string(&ModelSpec::grad_boost()).unwrap();
        assert!(s.contains("\"variant\":\"grad_boost\""));
        let back: ModelSpec = serde_json::from_str(r#"{"variant":"random_forest","n_trees":10}"#).unwrap();
        match back {
            ModelSpec::RandomForest(p) => {
                assert_eq!(p.n_trees, 10);
                assert!(p.bootstrap);
            }
            _ => panic!(),
        }
        let et: ModelSpec = serde_json::from_str(r#"{"variant":"extra_trees"}"#).unwrap();
        assert_eq!(et, ModelSpec::extra_trees());
    }
}
