//! Cleaning chain for the classification stage: zero-as-missing median
//! imputation, IQR row filtering, standardization and stratified splitting.
//!
//! Quartiles use linear interpolation (type 7). IQR statistics are computed
//! once on the pre-filter data; missing cells are skipped and never count as
//! outlying.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataio::{ColumnKind, ColumnRole, ColumnValues, TabularDataset};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{shuffled, stream_rng};
use crate::stats::descriptive::{median, quantile_sorted, sorted_copy};

pub const IQR_MULTIPLIER: f64 = 1.5;

/// How preprocessing statistics relate to cross-validation folds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreprocessMode {
    /// Medians and scaler refit on each training fold.
    #[default]
    FoldLocal,
    /// Medians and scaler fit once on all retained rows before splitting.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovedRow {
    /// Row index in the pre-filter dataset.
    pub index: usize,
    pub outlying_features: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub imputed: BTreeMap<String, usize>,
    pub removed: Vec<RemovedRow>,
    pub split: Option<SplitIndices>,
}

impl PreprocessReport {
    pub fn merge(mut self, other: PreprocessReport) -> Self {
        for (k, v) in other.imputed {
            *self.imputed.entry(k).or_insert(0) += v;
        }
        self.removed.extend(other.removed);
        if other.split.is_some() {
            self.split = other.split;
        }
        self
    }
}

fn numeric_features(dataset: &TabularDataset) -> Vec<String> {
    dataset
        .columns()
        .iter()
        .filter(|c| c.schema.role == ColumnRole::Feature && c.schema.kind == ColumnKind::Numeric)
        .map(|c| c.schema.name.clone())
        .collect()
}

/// Replaces every missing marker in numeric feature columns by the column
/// median of the observed values.
pub fn impute_zero_median(dataset: &TabularDataset) -> Result<(TabularDataset, PreprocessReport)> {
    let mut report = PreprocessReport::default();
    let mut out = dataset.clone();
    for name in numeric_features(dataset) {
        let col = dataset.require(&name)?;
        let observed = col.observed().expect("numeric column");
        let missing = observed.iter().filter(|v| v.is_none()).count();
        if missing == 0 {
            continue;
        }
        let present: Vec<f64> = observed.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::Imputation { column: name });
        }
        let m = median(&present);
        let filled = observed.into_iter().map(|v| Some(v.unwrap_or(m))).collect();
        out = out.with_column_values(&name, ColumnValues::Numeric(filled))?;
        report.imputed.insert(name, missing);
    }
    Ok((out, report))
}

/// Removes rows with values outside [Q1 − 1.5·IQR, Q3 + 1.5·IQR] on two or
/// more numeric features.
pub fn iqr_filter(dataset: &TabularDataset) -> Result<(TabularDataset, PreprocessReport)> {
    let n = dataset.n_rows();
    let mut counts = vec![0usize; n];
    for name in numeric_features(dataset) {
        let observed = dataset.require(&name)?.observed().expect("numeric column");
        let present: Vec<f64> = observed.iter().flatten().copied().collect();
        if present.is_empty() {
            continue;
        }
        let sorted = sorted_copy(&present);
        let q1 = quantile_sorted(&sorted, 0.25);
        let q3 = quantile_sorted(&sorted, 0.75);
        let iqr = q3 - q1;
        let (lo, hi) = (q1 - IQR_MULTIPLIER * iqr, q3 + IQR_MULTIPLIER * iqr);
        for (i, v) in observed.iter().enumerate() {
            if let Some(v) = v {
                if *v < lo || *v > hi {
                    counts[i] += 1;
                }
            }
        }
    }
    let removed: Vec<RemovedRow> = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c >= 2)
        .map(|(index, &outlying_features)| RemovedRow {
            index,
            outlying_features,
        })
        .collect();
    let keep: Vec<usize> = (0..n).filter(|&i| counts[i] < 2).collect();
    let filtered = dataset.select_rows(
        &keep,
        format!("iqr_filter: removed {} of {n} rows", removed.len()),
    )?;
    Ok((
        filtered,
        PreprocessReport {
            removed,
            ..Default::default()
        },
    ))
}

/// Per-feature mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationParams {
    pub features: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl StandardizationParams {
    /// Fits on the columns of `x`; NaN cells are skipped.
    pub fn fit_matrix(x: &Matrix, features: &[String]) -> Result<Self> {
        if features.len() != x.cols() {
            return Err(Error::contract("feature names do not match matrix width"));
        }
        let mut mean = Vec::with_capacity(x.cols());
        let mut std = Vec::with_capacity(x.cols());
        for j in 0..x.cols() {
            let col: Vec<f64> = x.column(j).into_iter().filter(|v| !v.is_nan()).collect();
            if col.is_empty() {
                return Err(Error::Imputation {
                    column: features[j].clone(),
                });
            }
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / col.len() as f64;
            mean.push(m);
            std.push(var.sqrt());
        }
        Ok(Self {
            features: features.to_vec(),
            mean,
            std,
        })
    }

    fn scale(&self, j: usize) -> f64 {
        if self.std[j] > 0.0 {
            self.std[j]
        } else {
            1.0
        }
    }

    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.features.len() {
            return Err(Error::contract(format!(
                "scaler fit on {} features, got {}",
                self.features.len(),
                x.cols()
            )));
        }
        let mut out = x.clone();
        for i in 0..x.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.scale(j);
            }
        }
        Ok(out)
    }

    pub fn inverse_transform(&self, z: &Matrix) -> Result<Matrix> {
        if z.cols() != self.features.len() {
            return Err(Error::contract("width mismatch in inverse_transform"));
        }
        let mut out = z.clone();
        for i in 0..z.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = *v * self.scale(j) + self.mean[j];
            }
        }
        Ok(out)
    }
}

pub fn fit_standardizer(dataset: &TabularDataset, features: &[String]) -> Result<StandardizationParams> {
    let x = dataset.feature_matrix(features)?;
    StandardizationParams::fit_matrix(&x, features)
}

/// Standardizes the fitted columns in place; other columns are untouched.
pub fn apply_standardizer(params: &StandardizationParams, dataset: &TabularDataset) -> Result<TabularDataset> {
    let mut out = dataset.clone();
    for (j, name) in params.features.iter().enumerate() {
        let col = dataset.column(name).ok_or_else(|| {
            Error::contract(format!("scaler feature \"{name}\" not present in dataset"))
        })?;
        let values = col
            .numeric()
            .ok_or_else(|| Error::contract(format!("scaler feature \"{name}\" is not numeric")))?;
        let scaled = values
            .iter()
            .map(|v| v.map(|x| (x - params.mean[j]) / params.scale(j)))
            .collect();
        out = out.with_column_values(name, ColumnValues::Numeric(scaled))?;
    }
    Ok(out)
}

/// Median imputation followed by standardization, fit on one block of rows
/// and replayed on others. Used for leakage-free cross-validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePreprocessor {
    pub medians: Vec<f64>,
    pub scaler: StandardizationParams,
}

impl FeaturePreprocessor {
    /// `x` holds NaN wherever a value is missing.
    pub fn fit(x: &Matrix, features: &[String]) -> Result<Self> {
        let mut medians = Vec::with_capacity(x.cols());
        for j in 0..x.cols() {
            let col: Vec<f64> = x.column(j).into_iter().filter(|v| !v.is_nan()).collect();
            if col.is_empty() {
                return Err(Error::Imputation {
                    column: features[j].clone(),
                });
            }
            medians.push(median(&col));
        }
        let filled = fill_missing(x, &medians);
        let scaler = StandardizationParams::fit_matrix(&filled, features)?;
        Ok(Self { medians, scaler })
    }

    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.medians.len() {
            return Err(Error::contract("preprocessor width mismatch"));
        }
        self.scaler.transform(&fill_missing(x, &self.medians))
    }

    /// Imputed values in original units (no scaling).
    pub fn impute(&self, x: &Matrix) -> Matrix {
        fill_missing(x, &self.medians)
    }
}

fn fill_missing(x: &Matrix, medians: &[f64]) -> Matrix {
    let mut out = x.clone();
    for i in 0..x.rows() {
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            if v.is_nan() {
                *v = medians[j];
            }
        }
    }
    out
}

/// Largest-remainder allocation of `total` test slots across classes.
fn allocate_test_counts(class_sizes: &[usize], fraction: f64) -> Vec<usize> {
    let n: usize = class_sizes.iter().sum();
    let total = (n as f64 * fraction).round() as usize;
    let exact: Vec<f64> = class_sizes.iter().map(|&c| c as f64 * fraction).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..class_sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut assigned: usize = counts.iter().sum();
    for &c in order.iter().cycle().take(order.len() * 2) {
        if assigned >= total {
            break;
        }
        if counts[c] < class_sizes[c] {
            counts[c] += 1;
            assigned += 1;
        }
    }
    counts
}

/// Stratified train/test split of binary labels.
pub fn stratified_split_labels(labels: &[u8], test_fraction: f64, seed: u64) -> Result<SplitIndices> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::contract(format!(
            "test fraction {test_fraction} must lie in (0, 1)"
        )));
    }
    let classes: Vec<Vec<usize>> = (0..=1u8)
        .map(|c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
        .collect();
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Stratification("labels must be 0 or 1".into()));
    }
    if classes.iter().any(|c| c.len() < 2) {
        return Err(Error::Stratification(format!(
            "each class needs at least 2 members (have {} / {})",
            classes[0].len(),
            classes[1].len()
        )));
    }
    let sizes: Vec<usize> = classes.iter().map(Vec::len).collect();
    let counts = allocate_test_counts(&sizes, test_fraction);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, members) in classes.into_iter().enumerate() {
        let mut rng = stream_rng(seed, c as u64);
        let order = shuffled(members, &mut rng);
        test.extend_from_slice(&order[..counts[c]]);
        train.extend_from_slice(&order[counts[c]..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices { train, test })
}

pub fn stratified_split(dataset: &TabularDataset, test_fraction: f64, seed: u64) -> Result<SplitIndices> {
    stratified_split_labels(&dataset.target_labels()?, test_fraction, seed)
}

/// Fold id per sample: each class is shuffled by `seed` and dealt
/// round-robin to `k` folds (the dealing position carries over between
/// classes so fold sizes stay balanced).
pub fn stratified_kfold(labels: &[u8], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::contract(format!("need at least 2 folds, got {k}")));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Stratification("labels must be 0 or 1".into()));
    }
    let mut folds = vec![0usize; labels.len()];
    let mut next = 0usize;
    for c in 0..=1u8 {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.len() < k {
            return Err(Error::Stratification(format!(
                "class {c} has {} members, fewer than {k} folds",
                members.len()
            )));
        }
        let mut rng = stream_rng(seed, 1000 + c as u64);
        for i in shuffled(members, &mut rng) {
            folds[i] = next % k;
            next += 1;
        }
    }
    Ok(folds)
}
