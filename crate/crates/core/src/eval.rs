//! Classification metrics, ROC analysis and the stratified k-fold harness.
//!
//! Count metrics use the positive class (label 1) and the threshold
//! `P(y = 1) >= 0.5`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::models::{self, ModelFamily, ModelSpec, TrainedClassifier};
use crate::preprocess::{stratified_kfold, FeaturePreprocessor, PreprocessMode};
use crate::stats::descriptive::{mean, sample_std};

pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tp: usize,
}

impl ConfusionMatrix {
    pub fn new(tn: usize, fp: usize, fn_: usize, tp: usize) -> Self {
        Self { tn, fp, fn_, tp }
    }

    pub fn total(&self) -> usize {
        self.tn + self.fp + self.fn_ + self.tp
    }

    pub fn from_labels(y_true: &[u8], y_pred: &[u8]) -> Result<Self> {
        if y_true.len() != y_pred.len() {
            return Err(Error::contract(format!(
                "{} labels vs {} predictions",
                y_true.len(),
                y_pred.len()
            )));
        }
        let mut cm = Self::default();
        for (&t, &p) in y_true.iter().zip(y_pred) {
            match (t, p) {
                (0, 0) => cm.tn += 1,
                (0, 1) => cm.fp += 1,
                (1, 0) => cm.fn_ += 1,
                (1, 1) => cm.tp += 1,
                _ => return Err(Error::contract("labels must be 0 or 1")),
            }
        }
        Ok(cm)
    }
}

/// Confusion matrix of `P(y = 1) >= 0.5` against the truth.
pub fn confusion(y_true: &[u8], proba: &[f64]) -> Result<ConfusionMatrix> {
    let pred: Vec<u8> = proba.iter().map(|&p| u8::from(p >= THRESHOLD)).collect();
    ConfusionMatrix::from_labels(y_true, &pred)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    pub roc_auc: f64,
    /// Metrics whose denominator was zero and were reported as 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degenerate: Vec<String>,
}

/// The six columns reported per model.
pub const TABLE_METRICS: [&str; 6] = ["accuracy", "balanced_accuracy", "precision", "recall", "f1", "roc_auc"];

impl MetricSet {
    pub fn get(&self, name: &str) -> Option<f64> {
        Some(match name {
            "accuracy" => self.accuracy,
            "balanced_accuracy" => self.balanced_accuracy,
            "precision" => self.precision,
            "recall" => self.recall,
            "f1" => self.f1,
            "specificity" => self.specificity,
            "roc_auc" => self.roc_auc,
            _ => return None,
        })
    }

    fn from_fn(f: impl Fn(&str) -> f64) -> Self {
        Self {
            accuracy: f("accuracy"),
            balanced_accuracy: f("balanced_accuracy"),
            precision: f("precision"),
            recall: f("recall"),
            f1: f("f1"),
            specificity: f("specificity"),
            roc_auc: f("roc_auc"),
            degenerate: Vec::new(),
        }
    }
}

pub const ALL_METRICS: [&str; 7] = [
    "accuracy",
    "balanced_accuracy",
    "precision",
    "recall",
    "f1",
    "specificity",
    "roc_auc",
];

fn ratio(num: usize, den: usize, name: &str, degenerate: &mut Vec<String>) -> f64 {
    if den == 0 {
        degenerate.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Count metrics from `cm`; `roc_auc` is set to the supplied value.
pub fn metrics(cm: &ConfusionMatrix, roc_auc: f64) -> MetricSet {
    let mut degenerate = Vec::new();
    let accuracy = ratio(cm.tn + cm.tp, cm.total(), "accuracy", &mut degenerate);
    let precision = ratio(cm.tp, cm.tp + cm.fp, "precision", &mut degenerate);
    let recall = ratio(cm.tp, cm.tp + cm.fn_, "recall", &mut degenerate);
    let specificity = ratio(cm.tn, cm.tn + cm.fp, "specificity", &mut degenerate);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        degenerate.push("f1".into());
        0.0
    };
    MetricSet {
        accuracy,
        balanced_accuracy: (recall + specificity) / 2.0,
        precision,
        recall,
        f1,
        specificity,
        roc_auc,
        degenerate,
    }
}

/// Confusion matrix, metrics and ROC points for one labelled sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub metrics: MetricSet,
    pub roc: Vec<RocPoint>,
}

pub fn evaluate_scores(y_true: &[u8], proba: &[f64], scores: &[f64]) -> Result<Evaluation> {
    let cm = confusion(y_true, proba)?;
    let roc = roc_curve(y_true, scores)?;
    let auc = auc_from_curve(&roc);
    Ok(Evaluation {
        confusion: cm,
        metrics: metrics(&cm, auc),
        roc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` are called positive; the first point uses +∞
    /// (written as the string "inf" in JSON).
    #[serde(with = "extended_float")]
    pub threshold: f64,
}

mod extended_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// One point per distinct score (descending) plus the (0, 0) origin.
pub fn roc_curve(y_true: &[u8], scores: &[f64]) -> Result<Vec<RocPoint>> {
    if y_true.len() != scores.len() {
        return Err(Error::contract("labels and scores differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::contract("NaN score"));
    }
    let pos = y_true.iter().filter(|&&v| v == 1).count();
    let neg = y_true.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate("ROC AUC is undefined with a single class".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if y_true[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: s,
        });
    }
    Ok(points)
}

fn auc_from_curve(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// Trapezoidal area under the tie-aware ROC curve.
pub fn roc_auc(y_true: &[u8], scores: &[f64]) -> Result<f64> {
    Ok(auc_from_curve(&roc_curve(y_true, scores)?))
}

/// Anything that yields positive-class probabilities and a ranking score.
pub trait Scorer: Send + Sync {
    fn positive_proba(&self, x: &Matrix) -> Result<Vec<f64>>;

    fn ranking_score(&self, x: &Matrix) -> Result<Vec<f64>> {
        self.positive_proba(x)
    }
}

impl Scorer for TrainedClassifier {
    fn positive_proba(&self, x: &Matrix) -> Result<Vec<f64>> {
        self.predict_positive(x)
    }

    fn ranking_score(&self, x: &Matrix) -> Result<Vec<f64>> {
        self.decision_score(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub k: usize,
    pub seed: u64,
    pub mode: PreprocessMode,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            k: 5,
            seed: 0,
            mode: PreprocessMode::FoldLocal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CVSummary {
    pub model: String,
    pub family: ModelFamily,
    pub folds: Vec<MetricSet>,
    pub confusion: Vec<ConfusionMatrix>,
    pub mean: MetricSet,
    /// Sample (n − 1) standard deviation across folds.
    pub std: MetricSet,
}

impl CVSummary {
    pub fn from_folds(model: &str, family: ModelFamily, folds: Vec<MetricSet>, confusion: Vec<ConfusionMatrix>) -> Self {
        let column = |name: &str| -> Vec<f64> { folds.iter().map(|m| m.get(name).expect("known metric")).collect() };
        let mean_set = MetricSet::from_fn(|n| mean(&column(n)));
        let std_set = MetricSet::from_fn(|n| {
            let c = column(n);
            if c.len() > 1 {
                sample_std(&c)
            } else {
                0.0
            }
        });
        Self {
            model: model.to_string(),
            family,
            folds,
            confusion,
            mean: mean_set,
            std: std_set,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRun {
    pub summary: CVSummary,
    /// Fold id per row.
    pub fold_of: Vec<usize>,
    /// Held-out positive-class probability per row.
    pub oof_proba: Vec<f64>,
}

/// Imputation/scaling chain fit on `train` (fold-local) or on all rows
/// (global).
pub fn fit_fold_preprocessor(x: &Matrix, names: &[String], train: &[usize], mode: PreprocessMode) -> Result<FeaturePreprocessor> {
    match mode {
        PreprocessMode::FoldLocal => FeaturePreprocessor::fit(&x.select_rows(train), names),
        PreprocessMode::Global => FeaturePreprocessor::fit(x, names),
    }
}

/// Transformed train and test blocks under [`fit_fold_preprocessor`].
pub fn prepare_fold(
    x: &Matrix,
    names: &[String],
    train: &[usize],
    test: &[usize],
    mode: PreprocessMode,
) -> Result<(Matrix, Matrix)> {
    let prep = fit_fold_preprocessor(x, names, train, mode)?;
    Ok((prep.transform(&x.select_rows(train))?, prep.transform(&x.select_rows(test))?))
}

/// Stratified k-fold evaluation of an arbitrary fitting procedure. `x` is
/// raw (NaN where missing); folds run in parallel and are aggregated in
/// fold order.
pub fn cross_validate<S, F>(
    model: &str,
    family: ModelFamily,
    x: &Matrix,
    y: &[u8],
    names: &[String],
    cfg: &CvConfig,
    fit: F,
) -> Result<CvRun>
where
    S: Scorer,
    F: Fn(&Matrix, &[u8], u64) -> Result<S> + Sync,
{
    if x.rows() != y.len() {
        return Err(Error::contract("label count differs from row count"));
    }
    let fold_of = stratified_kfold(y, cfg.k, cfg.seed)?;
    let results = (0..cfg.k)
        .into_par_iter()
        .map(|f| -> Result<(Vec<usize>, Vec<f64>, ConfusionMatrix, MetricSet)> {
            let train: Vec<usize> = (0..y.len()).filter(|&i| fold_of[i] != f).collect();
            let test: Vec<usize> = (0..y.len()).filter(|&i| fold_of[i] == f).collect();
            let (xtr, xte) = prepare_fold(x, names, &train, &test, cfg.mode)?;
            let ytr: Vec<u8> = train.iter().map(|&i| y[i]).collect();
            let yte: Vec<u8> = test.iter().map(|&i| y[i]).collect();
            let m = fit(&xtr, &ytr, cfg.seed)?;
            let proba = m.positive_proba(&xte)?;
            let ev = evaluate_scores(&yte, &proba, &m.ranking_score(&xte)?)?;
            Ok((test, proba, ev.confusion, ev.metrics))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut oof_proba = vec![0.0; y.len()];
    let mut folds = Vec::with_capacity(cfg.k);
    let mut cms = Vec::with_capacity(cfg.k);
    for (test, proba, cm, ms) in results {
        for (i, p) in test.into_iter().zip(proba) {
            oof_proba[i] = p;
        }
        folds.push(ms);
        cms.push(cm);
    }
    Ok(CvRun {
        summary: CVSummary::from_folds(model, family, folds, cms),
        fold_of,
        oof_proba,
    })
}

/// Cross-validates one classifier spec.
pub fn stratified_kfold_cv(x: &Matrix, y: &[u8], names: &[String], spec: &ModelSpec, cfg: &CvConfig) -> Result<CvRun> {
    cross_validate(spec.name(), spec.family(), x, y, names, cfg, |xt, yt, seed| {
        models::fit(spec, xt, yt, names, seed)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mann_whitney(y: &[u8], s: &[f64]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..y.len() {
            for j in 0..y.len() {
                if y[i] == 1 && y[j] == 0 {
                    pairs += 1.0;
                    if s[i] > s[j] {
                        wins += 1.0;
                    } else if s[i] == s[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn confusion_metric_arithmetic() {
        let m = metrics(&ConfusionMatrix::new(72, 28, 14, 40), f64::NAN);
        assert!((m.accuracy - 112.0 / 154.0).abs() < 1e-15);
        assert!((m.precision - 40.0 / 68.0).abs() < 1e-15);
        assert!((m.recall - 40.0 / 54.0).abs() < 1e-15);
        assert!((m.specificity - 0.72).abs() < 1e-15);
        assert!((m.f1 - 80.0 / 122.0).abs() < 1e-15);
        assert_eq!(m.balanced_accuracy, (m.recall + m.specificity) / 2.0);
    }

    #[test]
    fn perfect_and_degenerate() {
        let m = metrics(&ConfusionMatrix::new(5, 0, 0, 5), 1.0);
        for n in ALL_METRICS {
            assert_eq!(m.get(n), Some(1.0));
        }
        let m = metrics(&ConfusionMatrix::new(6, 0, 4, 0), 0.5);
        assert_eq!(m.precision, 0.0);
        assert!(m.degenerate.contains(&"precision".to_string()));
    }

    #[test]
    fn confusion_length_mismatch() {
        assert!(matches!(confusion(&[0, 1], &[0.2]), Err(Error::Contract(_))));
    }

    #[test]
    fn roc_points_survive_json() {
        let roc = roc_curve(&[0, 1, 1], &[0.2, 0.4, 0.9]).unwrap();
        let text = serde_json::to_string(&roc).unwrap();
        assert!(text.contains("\"inf\""));
        let back: Vec<RocPoint> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, roc);
    }

    #[test]
    fn auc_edge_cases() {
        assert_eq!(roc_auc(&[0, 0, 1, 1], &[0.1, 0.2, 0.8, 0.9]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0, 1, 0, 1], &[0.3; 4]).unwrap(), 0.5);
        assert!(roc_auc(&[1, 1], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn auc_matches_pair_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..50 {
            let y: Vec<u8> = (0..20).map(|i| if i < 2 { i as u8 } else { rng.gen_range(0..2) }).collect();
            let s: Vec<f64> = (0..20).map(|_| (rng.gen_range(0..8) as f64) / 4.0).collect();
            assert!((roc_auc(&y, &s).unwrap() - mann_whitney(&y, &s)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_maps(
            s in prop::collection::vec(-3.0f64..3.0, 12),
            mask in prop::collection::vec(0u8..2, 12),
        ) {
            let mut y = mask;
            y[0] = 0;
            y[1] = 1;
            let a = roc_auc(&y, &s).unwrap();
            let e: Vec<f64> = s.iter().map(|v| v.exp()).collect();
            let f: Vec<f64> = s.iter().map(|v| 3.0 * v + 1.0).collect();
            prop_assert!((roc_auc(&y, &e).unwrap() - a).abs() < 1e-12);
            prop_assert!((roc_auc(&y, &f).unwrap() - a).abs() < 1e-12);
        }
    }

    struct Constant(f64);

    impl Scorer for Constant {
        fn positive_proba(&self, x: &Matrix) -> Result<Vec<f64>> {
            Ok(vec![self.0; x.rows()])
        }
    }

    fn imbalanced(n: usize) -> (Matrix, Vec<u8>, Vec<String>) {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y: Vec<u8> = (0..n).map(|i| u8::from(i % 20 >= 13)).collect();
        let rows: Vec<[f64; 2]> = y
            .iter()
            .map(|&c| [f64::from(c) + rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        (Matrix::from_rows(&rows).unwrap(), y, vec!["a".into(), "b".into()])
    }

    #[test]
    fn majority_baseline() {
        let (x, y, names) = imbalanced(200);
        let run = cross_validate("dummy", ModelFamily::Linear, &x, &y, &names, &CvConfig::default(), |_, _, _| {
            Ok(Constant(0.0))
        })
        .unwrap();
        assert!((run.summary.mean.accuracy - 0.65).abs() < 0.01);
        assert_eq!(run.summary.mean.recall, 0.0);
        assert_eq!(run.summary.folds.len(), 5);
        // summary recomputes from per-fold values
        let acc: Vec<f64> = run.summary.folds.iter().map(|m| m.accuracy).collect();
        assert!((mean(&acc) - run.summary.mean.accuracy).abs() < 1e-12);
        assert!((sample_std(&acc) - run.summary.std.accuracy).abs() < 1e-12);
    }

    #[test]
    fn folds_partition_and_stratify() {
        let (x, y, names) = imbalanced(200);
        let run = stratified_kfold_cv(&x, &y, &names, &ModelSpec::log_reg(), &CvConfig::default()).unwrap();
        let global = y.iter().filter(|&&v| v == 1).count() as f64 / y.len() as f64;
        for f in 0..5 {
            let members: Vec<usize> = (0..y.len()).filter(|&i| run.fold_of[i] == f).collect();
            let pos = members.iter().filter(|&&i| y[i] == 1).count() as f64;
            assert!((pos / members.len() as f64 - global).abs() < 1.0 / members.len() as f64);
        }
        let total: usize = run.summary.confusion.iter().map(ConfusionMatrix::total).sum();
        assert_eq!(total, y.len());
        assert!(run.summary.mean.roc_auc > 0.7);
    }
}
