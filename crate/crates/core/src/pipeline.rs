//! Three-stage batch pipeline driven by a single JSON config.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cluster::{profile_clusters, sweep_k, ClusterProfile, KMeansParams, KSweepResult, DEFAULT_MARGIN};
use crate::dataio::{
    encode_binary, load_csv, load_schema, summarize, validate_stage1_schema, validate_stage3_schema, ColumnRole,
    ColumnSchema, DatasetSummary, TabularDataset,
};
use crate::ensemble::{fit_stacking, StackingConfig};
use crate::error::{Error, Result};
use crate::eval::{
    cross_validate, evaluate_scores, fit_fold_preprocessor, stratified_kfold_cv, CVSummary, ConfusionMatrix, CvConfig,
    MetricSet, RocPoint, Scorer, TABLE_METRICS,
};
use crate::explain::{consensus_rank, mean_abs_summary, rank_tree_models, tree_shap, ConsensusRanking, OutputSpace, ShapAttribution};
use crate::matrix::Matrix;
use crate::models::{self, ModelFamily, ModelSpec};
use crate::preprocess::{
    impute_zero_median, iqr_filter, stratified_split_labels, FeaturePreprocessor, PreprocessMode, PreprocessReport,
    SplitIndices, StandardizationParams,
};
use crate::stats::{adjust_family, kruskal_wallis, shapiro_wilk, spearman_with, HypothesisResult, SpearmanMethod, DEFAULT_ALPHA};

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "TRISTAGE_THREADS";

pub const STACKING_NAME: &str = "Stacking";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SchemaSource {
    Inline(Vec<ColumnSchema>),
    Path(PathBuf),
}

impl SchemaSource {
    pub fn resolve(&self) -> Result<Vec<ColumnSchema>> {
        match self {
            SchemaSource::Inline(s) => Ok(s.clone()),
            SchemaSource::Path(p) => load_schema(p),
        }
    }

    fn rebase(&mut self, base: &Path) {
        if let SchemaSource::Path(p) = self {
            *p = rebase(base, p);
        }
    }
}

fn rebase(base: &Path, p: &Path) -> PathBuf {
    if p.is_relative() {
        base.join(p)
    } else {
        p.to_path_buf()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub stage1: Option<Stage1Config>,
    #[serde(default)]
    pub stage2: Option<Stage2Config>,
    #[serde(default)]
    pub stage3: Option<Stage3Config>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Config {
    pub data: PathBuf,
    pub schema: SchemaSource,
    #[serde(default)]
    pub preprocess: PreprocessMode,
    #[serde(default = "ModelSpec::stage1_defaults")]
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub stacking: StackingSettings,
    #[serde(default = "default_folds")]
    pub cv_folds: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Model evaluated on the held-out split; a configured model name or "Stacking".
    #[serde(default = "default_test_model")]
    pub test_model: String,
    #[serde(default)]
    pub shap: ShapSettings,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StackingSettings {
    pub enabled: bool,
    /// Base-model names drawn from `models`; all of them when absent.
    pub base: Option<Vec<String>>,
    pub n_folds: usize,
    pub meta: models::LogRegParams,
}

impl Default for StackingSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            base: None,
            n_folds: 5,
            meta: models::LogRegParams::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapSettings {
    pub enabled: bool,
    /// Tree models explained, best CV ROC-AUC first.
    pub top_models: usize,
    /// Cap on explained test rows.
    pub max_instances: Option<usize>,
}

impl Default for ShapSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            top_models: 3,
            max_instances: None,
        }
    }
}

fn default_folds() -> usize {
    5
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_test_model() -> String {
    "SVM-RBF".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    /// Falls back to the stage-1 dataset.
    pub data: Option<PathBuf>,
    pub schema: Option<SchemaSource>,
    pub features: Vec<String>,
    pub k_min: usize,
    pub k_max: usize,
    pub margin: f64,
    pub kmeans: KMeansParams,
    pub insulin_feature: String,
    pub age_feature: String,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            data: None,
            schema: None,
            features: vec!["Glucose".into(), "Insulin".into(), "Age".into()],
            k_min: 2,
            k_max: 8,
            margin: DEFAULT_MARGIN,
            kmeans: KMeansParams::default(),
            insulin_feature: "Insulin".into(),
            age_feature: "Age".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupTest {
    #[serde(default = "h1")]
    pub hypothesis: String,
    pub value: String,
}

fn h1() -> String {
    "H1".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelationTest {
    #[serde(default)]
    pub hypothesis: Option<String>,
    pub x: String,
    pub y: String,
}

/// Which stage-3 results enter the Holm family.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HolmFamily {
    /// Every configured hypothesis (group test and correlations).
    #[default]
    Hypotheses,
    Correlations,
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage3Config {
    pub data: PathBuf,
    pub schema: SchemaSource,
    #[serde(default)]
    pub group_test: Option<GroupTest>,
    #[serde(default)]
    pub correlations: Vec<CorrelationTest>,
    #[serde(default)]
    pub normality: Vec<String>,
    #[serde(default)]
    pub holm: HolmFamily,
    #[serde(default = "yes")]
    pub tie_correction: bool,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub spearman: SpearmanMethod,
}

fn yes() -> bool {
    true
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid pipeline config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.rebase(&base);
        Ok(cfg)
    }

    pub fn rebase(&mut self, base: &Path) {
        if let Some(s) = &mut self.stage1 {
            s.data = rebase(base, &s.data);
            s.schema.rebase(base);
        }
        if let Some(s) = &mut self.stage2 {
            s.data = s.data.as_ref().map(|d| rebase(base, d));
            if let Some(sc) = &mut s.schema {
                sc.rebase(base);
            }
        }
        if let Some(s) = &mut self.stage3 {
            s.data = rebase(base, &s.data);
            s.schema.rebase(base);
        }
        self.output_dir = self.output_dir.as_ref().map(|d| rebase(base, d));
    }

    /// Parameter checks that need no data.
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = &self.stage1 {
            if s.models.is_empty() {
                return Err(Error::Config("stage1.models is empty".into()));
            }
            for m in &s.models {
                m.validate()?;
            }
            let mut seen = BTreeSet::new();
            for m in &s.models {
                if !seen.insert(m.name()) {
                    return Err(Error::Config(format!("model {} listed twice", m.name())));
                }
            }
            if s.cv_folds < 2 {
                return Err(Error::Config("stage1.cv_folds must be at least 2".into()));
            }
            if !(s.test_fraction > 0.0 && s.test_fraction < 1.0) {
                return Err(Error::Config("stage1.test_fraction must lie in (0, 1)".into()));
            }
            let test_ok = s.models.iter().any(|m| m.name() == s.test_model)
                || (s.test_model == STACKING_NAME && s.stacking.enabled);
            if !test_ok {
                return Err(Error::Config(format!("test_model {:?} is not a configured model", s.test_model)));
            }
            if s.stacking.enabled {
                s.stacking_config()?;
            }
        }
        if let Some(s) = &self.stage2 {
            if s.k_min < 2 || s.k_max < s.k_min {
                return Err(Error::Config(format!("invalid k range {}..={}", s.k_min, s.k_max)));
            }
            if s.features.is_empty() {
                return Err(Error::Config("stage2.features is empty".into()));
            }
            if !(s.margin >= 0.0) {
                return Err(Error::Config("stage2.margin must be non-negative".into()));
            }
            if s.data.is_none() && self.stage1.is_none() {
                return Err(Error::Config("stage2 needs its own data path or a stage1 section".into()));
            }
        }
        if let Some(s) = &self.stage3 {
            if !(s.alpha > 0.0 && s.alpha < 1.0) {
                return Err(Error::Config("stage3.alpha must lie in (0, 1)".into()));
            }
            if s.group_test.is_none() && s.correlations.is_empty() {
                return Err(Error::Config("stage3 configures no hypotheses".into()));
            }
        }
        Ok(())
    }
}

impl Stage1Config {
    pub fn stacking_config(&self) -> Result<StackingConfig> {
        let base = match &self.stacking.base {
            None => self.models.clone(),
            Some(names) => names
                .iter()
                .map(|n| {
                    self.models
                        .iter()
                        .find(|m| m.name() == n)
                        .cloned()
                        .ok_or_else(|| Error::Config(format!("stacking base model {n:?} is not configured")))
                })
                .collect::<Result<_>>()?,
        };
        Ok(StackingConfig {
            base,
            n_folds: self.stacking.n_folds,
            meta: self.stacking.meta.clone(),
            ..StackingConfig::default()
        })
    }
}

/// Raw rows retained after IQR screening, with the imputation/outlier log.
struct CleanData {
    raw: TabularDataset,
    imputed: TabularDataset,
    /// Original row index of every retained row.
    kept: Vec<usize>,
    loaded: usize,
    report: PreprocessReport,
}

fn load_clean(data: &Path, schema: &[ColumnSchema]) -> Result<CleanData> {
    let raw = encode_binary(&load_csv(data, schema)?)?;
    let (imputed, imp) = impute_zero_median(&raw)?;
    let (filtered, filt) = iqr_filter(&imputed)?;
    let removed: BTreeSet<usize> = filt.removed.iter().map(|r| r.index).collect();
    let kept: Vec<usize> = (0..raw.n_rows()).filter(|i| !removed.contains(i)).collect();
    Ok(CleanData {
        raw: raw.select_rows(&kept, "IQR screen")?,
        imputed: filtered,
        loaded: raw.n_rows(),
        kept,
        report: imp.merge(filt),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub model: String,
    pub n_train: usize,
    pub n_test: usize,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricSet,
    pub roc: Vec<RocPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapModelSummary {
    pub model: String,
    pub output_space: OutputSpace,
    pub base_value: f64,
    pub mean_abs: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapReport {
    pub strongest_model: String,
    pub n_instances: usize,
    pub models: Vec<ShapModelSummary>,
    pub consensus: ConsensusRanking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    pub rows_loaded: usize,
    pub rows_retained: usize,
    pub feature_names: Vec<String>,
    pub preprocess: PreprocessReport,
    pub cv: Vec<CVSummary>,
    /// Out-of-fold meta-features never came from a model that saw the row.
    pub stacking_leakage_free: Option<bool>,
    pub test: TestReport,
    pub shap: Option<ShapReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    pub cohort_size: usize,
    pub features: Vec<String>,
    pub scaler: StandardizationParams,
    pub sweep: KSweepResult,
    pub selected_k: usize,
    pub inertia: f64,
    pub centroids_original: Matrix,
    pub profile: ClusterProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledResult {
    pub hypothesis: String,
    pub result: HypothesisResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalityResult {
    pub column: String,
    pub result: HypothesisResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage3Report {
    pub n_rows: usize,
    pub group_column: String,
    pub group_sizes: BTreeMap<String, usize>,
    pub normality: Vec<NormalityResult>,
    pub holm_family: HolmFamily,
    pub hypotheses: Vec<LabeledResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub stage1: Option<DatasetSummary>,
    pub stage3: Option<DatasetSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub toolkit_version: String,
    pub config: PipelineConfig,
    pub stage1: Option<Stage1Report>,
    pub stage2: Option<Stage2Report>,
    pub stage3: Option<Stage3Report>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
}

impl RunReport {
    fn new(config: &PipelineConfig) -> Self {
        Self {
            toolkit_version: TOOLKIT_VERSION.into(),
            config: config.clone(),
            stage1: None,
            stage2: None,
            stage3: None,
            timings: BTreeMap::new(),
        }
    }

    /// JSON view without timings; equal for runs that agree numerically.
    pub fn numeric_view(&self) -> Result<serde_json::Value> {
        let mut v = serde_json::to_value(self)?;
        if let Some(o) = v.as_object_mut() {
            o.remove("timings");
        }
        Ok(v)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn stage1_section(cfg: &PipelineConfig) -> Result<&Stage1Config> {
    cfg.stage1.as_ref().ok_or_else(|| Error::Config("config has no stage1 section".into()))
}

pub fn ingest(cfg: &PipelineConfig) -> Result<IngestReport> {
    let stage1 = match &cfg.stage1 {
        Some(s) => {
            let schema = s.schema.resolve()?;
            validate_stage1_schema(&schema)?;
            Some(summarize(&encode_binary(&load_csv(&s.data, &schema)?)?))
        }
        None => None,
    };
    let stage3 = match &cfg.stage3 {
        Some(s) => {
            let schema = s.schema.resolve()?;
            validate_stage3_schema(&schema)?;
            Some(summarize(&encode_binary(&load_csv(&s.data, &schema)?)?))
        }
        None => None,
    };
    Ok(IngestReport { stage1, stage3 })
}

pub fn run_stage1(cfg: &PipelineConfig, out: Option<&Path>) -> Result<Stage1Report> {
    stage1_inner(cfg, out).map_err(|e| e.in_stage("stage1"))
}

fn stage1_inner(cfg: &PipelineConfig, out: Option<&Path>) -> Result<Stage1Report> {
    let s1 = stage1_section(cfg)?;
    let schema = s1.schema.resolve()?;
    validate_stage1_schema(&schema)?;
    let clean = load_clean(&s1.data, &schema)?;
    let names = clean.raw.feature_names();
    let x = clean.raw.feature_matrix(&names)?;
    let y = clean.raw.target_labels()?;

    let split = stratified_split_labels(&y, s1.test_fraction, cfg.seed)?;
    let mut preprocess = clean.report.clone();
    preprocess.split = Some(SplitIndices {
        train: split.train.iter().map(|&i| clean.kept[i]).collect(),
        test: split.test.iter().map(|&i| clean.kept[i]).collect(),
    });
    let xtr_raw = x.select_rows(&split.train);
    let ytr: Vec<u8> = split.train.iter().map(|&i| y[i]).collect();
    let yte: Vec<u8> = split.test.iter().map(|&i| y[i]).collect();

    let cv_cfg = CvConfig {
        k: s1.cv_folds,
        seed: cfg.seed,
        mode: s1.preprocess,
    };
    let mut cv = Vec::new();
    for spec in &s1.models {
        cv.push(stratified_kfold_cv(&xtr_raw, &ytr, &names, spec, &cv_cfg)?.summary);
    }
    let stack_cfg = s1.stacking_config()?;
    if s1.stacking.enabled {
        let run = cross_validate(STACKING_NAME, ModelFamily::Stacking, &xtr_raw, &ytr, &names, &cv_cfg, |xt, yt, seed| {
            fit_stacking(xt, yt, &names, &stack_cfg, seed)
        })?;
        cv.push(run.summary);
    }

    // held-out evaluation: preprocessing fit on the training split
    let all_train: Vec<usize> = (0..split.train.len()).collect();
    let prep: FeaturePreprocessor = match s1.preprocess {
        PreprocessMode::FoldLocal => fit_fold_preprocessor(&xtr_raw, &names, &all_train, s1.preprocess)?,
        PreprocessMode::Global => FeaturePreprocessor::fit(&x, &names)?,
    };
    let xte_raw = x.select_rows(&split.test);
    let xtr = prep.transform(&xtr_raw)?;
    let xte = prep.transform(&xte_raw)?;

    let mut stacking_leakage_free = None;
    let scorer: Box<dyn Scorer> = if s1.test_model == STACKING_NAME {
        let m = fit_stacking(&xtr, &ytr, &names, &stack_cfg, cfg.seed)?;
        stacking_leakage_free = Some(m.plan.leakage_free());
        Box::new(m)
    } else {
        let spec = s1.models.iter().find(|m| m.name() == s1.test_model).expect("validated test model");
        Box::new(models::fit(spec, &xtr, &ytr, &names, cfg.seed)?)
    };
    let ev = evaluate_scores(&yte, &scorer.positive_proba(&xte)?, &scorer.ranking_score(&xte)?)?;
    let test = TestReport {
        model: s1.test_model.clone(),
        n_train: split.train.len(),
        n_test: split.test.len(),
        confusion: ev.confusion,
        metrics: ev.metrics,
        roc: ev.roc,
    };
    if stacking_leakage_free.is_none() && s1.stacking.enabled {
        let m = fit_stacking(&xtr, &ytr, &names, &stack_cfg, cfg.seed)?;
        stacking_leakage_free = Some(m.plan.leakage_free());
    }

    let mut shap = None;
    let mut attributions = Vec::new();
    let n_explain = s1.shap.max_instances.map_or(xte.rows(), |m| m.min(xte.rows()));
    let explain_rows: Vec<usize> = (0..n_explain).collect();
    if s1.shap.enabled {
        let ranked: Vec<String> = rank_tree_models(&cv)
            .into_iter()
            .take(s1.shap.top_models.max(1))
            .map(|s| s.model.clone())
            .collect();
        if !ranked.is_empty() {
            let xe = xte.select_rows(&explain_rows);
            for name in &ranked {
                let spec = s1.models.iter().find(|m| m.name() == name).expect("ranked from configured models");
                let model = models::fit(spec, &xtr, &ytr, &names, cfg.seed)?;
                attributions.push(tree_shap(&model, &xe)?);
            }
            shap = Some(ShapReport {
                strongest_model: ranked[0].clone(),
                n_instances: n_explain,
                models: attributions
                    .iter()
                    .map(|a| ShapModelSummary {
                        model: a.model.clone(),
                        output_space: a.output_space,
                        base_value: a.base_value,
                        mean_abs: mean_abs_summary(a),
                    })
                    .collect(),
                consensus: consensus_rank(&attributions)?,
            });
        }
    }

    let report = Stage1Report {
        rows_loaded: clean.loaded,
        rows_retained: clean.kept.len(),
        feature_names: names,
        preprocess,
        cv,
        stacking_leakage_free,
        test,
        shap,
    };
    if let Some(dir) = out {
        let test_ids: Vec<usize> = explain_rows.iter().map(|&i| clean.kept[split.test[i]]).collect();
        let values = prep.impute(&xte_raw.select_rows(&explain_rows));
        write_stage1(dir, &report, &attributions, &test_ids, &values)?;
    }
    Ok(report)
}

pub fn run_stage2(cfg: &PipelineConfig, out: Option<&Path>) -> Result<Stage2Report> {
    stage2_inner(cfg, out).map_err(|e| e.in_stage("stage2"))
}

fn stage2_inner(cfg: &PipelineConfig, out: Option<&Path>) -> Result<Stage2Report> {
    let s2 = cfg.stage2.clone().unwrap_or_default();
    let (data, schema) = match (&s2.data, &cfg.stage1) {
        (Some(d), _) => {
            let sc = s2
                .schema
                .as_ref()
                .or(cfg.stage1.as_ref().map(|s| &s.schema))
                .ok_or_else(|| Error::Config("stage2 data given without a schema".into()))?;
            (d.clone(), sc.resolve()?)
        }
        (None, Some(s1)) => (s1.data.clone(), s2.schema.as_ref().unwrap_or(&s1.schema).resolve()?),
        (None, None) => return Err(Error::Config("stage2 needs its own data path or a stage1 section".into())),
    };
    validate_stage1_schema(&schema)?;
    let clean = load_clean(&data, &schema)?;
    let y = clean.imputed.target_labels()?;
    let positives: Vec<usize> = (0..y.len()).filter(|&i| y[i] == 1).collect();
    if positives.is_empty() {
        return Err(Error::Dataset("no positive rows to cluster".into()));
    }
    let cohort = clean.imputed.select_rows(&positives, "positive sub-cohort")?;
    let features = s2.features.clone();
    let x = cohort.feature_matrix(&features)?;
    let prep = FeaturePreprocessor::fit(&x, &features)?;
    let original = prep.impute(&x);
    let z = prep.transform(&x)?;
    let (sweep, fitted) = sweep_k(&z, s2.k_min..=s2.k_max, cfg.seed, &s2.kmeans, s2.margin)?;
    let chosen = &fitted[sweep.selected_k - s2.k_min];
    let profile = profile_clusters(&original, &features, &chosen.labels, &s2.insulin_feature, &s2.age_feature)?;
    let report = Stage2Report {
        cohort_size: positives.len(),
        features,
        centroids_original: prep.scaler.inverse_transform(&chosen.centroids)?,
        scaler: prep.scaler,
        selected_k: sweep.selected_k,
        inertia: chosen.inertia,
        sweep,
        profile,
    };
    if let Some(dir) = out {
        let rows: Vec<usize> = positives.iter().map(|&i| clean.kept[i]).collect();
        write_stage2(dir, &report, &rows, &chosen.labels)?;
    }
    Ok(report)
}

pub fn run_stage3(cfg: &PipelineConfig, out: Option<&Path>) -> Result<Stage3Report> {
    stage3_inner(cfg, out).map_err(|e| e.in_stage("stage3"))
}

fn numeric_column(ds: &TabularDataset, name: &str) -> Result<Vec<Option<f64>>> {
    ds.require(name)?.observed().ok_or_else(|| Error::Schema {
        column: name.to_string(),
        reason: "stage-3 test variables must be numeric".into(),
    })
}

fn stage3_inner(cfg: &PipelineConfig, out: Option<&Path>) -> Result<Stage3Report> {
    let s3 = cfg.stage3.as_ref().ok_or_else(|| Error::Config("config has no stage3 section".into()))?;
    let schema = s3.schema.resolve()?;
    validate_stage3_schema(&schema)?;
    let ds = encode_binary(&load_csv(&s3.data, &schema)?)?;
    let group_column = ds.names_with_role(ColumnRole::GroupLabel).remove(0);
    let labels = ds.require(&group_column)?.text().ok_or_else(|| Error::Schema {
        column: group_column.clone(),
        reason: "group column must be categorical".into(),
    })?;
    if let Some(i) = labels.iter().position(|l| l.trim().is_empty()) {
        return Err(Error::Dataset(format!("group label missing at row {}", i + 1)));
    }
    let mut group_sizes = BTreeMap::new();
    for l in labels {
        *group_sizes.entry(l.trim().to_string()).or_insert(0) += 1;
    }

    let mut normality = Vec::new();
    for col in &s3.normality {
        let v: Vec<f64> = numeric_column(&ds, col)?.into_iter().flatten().collect();
        normality.push(NormalityResult {
            column: col.clone(),
            result: shapiro_wilk(&v)?.with_variables(col.clone()).with_alpha(s3.alpha),
        });
    }

    let mut hypotheses = Vec::new();
    let mut is_corr = Vec::new();
    if let Some(g) = &s3.group_test {
        let values = numeric_column(&ds, &g.value)?;
        let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for (l, v) in labels.iter().zip(&values) {
            if let Some(v) = v {
                groups.entry(l.trim()).or_default().push(*v);
            }
        }
        let groups: Vec<Vec<f64>> = groups.into_values().collect();
        let r = kruskal_wallis(&groups, s3.tie_correction)?
            .with_variables(format!("{} ~ {}", g.value, group_column))
            .with_alpha(s3.alpha);
        hypotheses.push(LabeledResult {
            hypothesis: g.hypothesis.clone(),
            result: r,
        });
        is_corr.push(false);
    }
    for (i, c) in s3.correlations.iter().enumerate() {
        let (xs, ys) = (numeric_column(&ds, &c.x)?, numeric_column(&ds, &c.y)?);
        let (a, b): (Vec<f64>, Vec<f64>) = xs
            .iter()
            .zip(&ys)
            .filter_map(|(a, b)| Some(((*a)?, (*b)?)))
            .unzip();
        let r = spearman_with(&a, &b, s3.spearman)?.to_hypothesis(&format!("{} x {}", c.x, c.y), s3.alpha);
        let offset = usize::from(s3.group_test.is_some());
        hypotheses.push(LabeledResult {
            hypothesis: c.hypothesis.clone().unwrap_or_else(|| format!("H{}", i + 1 + offset)),
            result: r,
        });
        is_corr.push(true);
    }
    let members: Vec<usize> = (0..hypotheses.len())
        .filter(|&i| match s3.holm {
            HolmFamily::Hypotheses => true,
            HolmFamily::Correlations => is_corr[i],
            HolmFamily::None => false,
        })
        .collect();
    if !members.is_empty() {
        let mut family: Vec<HypothesisResult> = members.iter().map(|&i| hypotheses[i].result.clone()).collect();
        adjust_family(&mut family);
        for (&i, r) in members.iter().zip(family) {
            hypotheses[i].result = r;
        }
    }
    let report = Stage3Report {
        n_rows: ds.n_rows(),
        group_column,
        group_sizes,
        normality,
        holm_family: s3.holm,
        hypotheses,
    };
    if let Some(dir) = out {
        write_stage3(dir, &report)?;
    }
    Ok(report)
}

/// Runs every configured stage in order and writes `report.json` when an
/// output directory is given.
pub fn run_all(cfg: &PipelineConfig, out: Option<&Path>) -> Result<RunReport> {
    let mut report = RunReport::new(cfg);
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    if cfg.stage1.is_some() {
        let t = Instant::now();
        report.stage1 = Some(run_stage1(cfg, out)?);
        report.timings.insert("stage1".into(), t.elapsed().as_secs_f64());
    }
    if cfg.stage2.is_some() {
        let t = Instant::now();
        report.stage2 = Some(run_stage2(cfg, out)?);
        report.timings.insert("stage2".into(), t.elapsed().as_secs_f64());
    }
    if cfg.stage3.is_some() {
        let t = Instant::now();
        report.stage3 = Some(run_stage3(cfg, out)?);
        report.timings.insert("stage3".into(), t.elapsed().as_secs_f64());
    }
    if let Some(dir) = out {
        report.save(dir.join("report.json"))?;
    }
    Ok(report)
}

/// Single-stage report, for running one stage on its own.
pub fn run_stage(cfg: &PipelineConfig, stage: u8, out: Option<&Path>) -> Result<RunReport> {
    let mut report = RunReport::new(cfg);
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let t = Instant::now();
    match stage {
        1 => report.stage1 = Some(run_stage1(cfg, out)?),
        2 => report.stage2 = Some(run_stage2(cfg, out)?),
        3 => report.stage3 = Some(run_stage3(cfg, out)?),
        _ => return Err(Error::Config(format!("no stage {stage}"))),
    }
    report.timings.insert(format!("stage{stage}"), t.elapsed().as_secs_f64());
    if let Some(dir) = out {
        report.save(dir.join(format!("stage{stage}_report.json")))?;
    }
    Ok(report)
}

/// Worker count from [`THREADS_ENV`], if set to a positive integer.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV}={v:?} is not a positive integer"))),
        },
    }
}

/// Runs `f` on a dedicated pool of `threads` workers (global pool when `None`).
pub fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn flush(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn write_stage1(dir: &Path, r: &Stage1Report, shap: &[ShapAttribution], ids: &[usize], values: &Matrix) -> Result<()> {
    let path = dir.join("stage1_table.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["model".to_string()];
    header.extend(TABLE_METRICS.iter().map(|m| m.to_string()));
    w.write_record(&header)?;
    for s in &r.cv {
        let mut row = vec![s.model.clone()];
        for m in TABLE_METRICS {
            row.push(format!("{:.3} ± {:.3}", s.mean.get(m).unwrap_or(f64::NAN), s.std.get(m).unwrap_or(f64::NAN)));
        }
        w.write_record(&row)?;
    }
    flush(w, &path)?;

    let path = dir.join("stage1_cv_folds.csv");
    let mut w = csv_writer(&path)?;
    let mut header = vec!["model".to_string(), "fold".into(), "tn".into(), "fp".into(), "fn".into(), "tp".into()];
    header.extend(crate::eval::ALL_METRICS.iter().map(|m| m.to_string()));
    w.write_record(&header)?;
    for s in &r.cv {
        for (f, (m, cm)) in s.folds.iter().zip(&s.confusion).enumerate() {
            let mut row = vec![
                s.model.clone(),
                f.to_string(),
                cm.tn.to_string(),
                cm.fp.to_string(),
                cm.fn_.to_string(),
                cm.tp.to_string(),
            ];
            row.extend(crate::eval::ALL_METRICS.iter().map(|n| m.get(n).unwrap_or(f64::NAN).to_string()));
            w.write_record(&row)?;
        }
    }
    flush(w, &path)?;

    let path = dir.join("stage1_confusion.csv");
    let mut w = csv_writer(&path)?;
    let cm = &r.test.confusion;
    w.write_record(["model", "tn", "fp", "fn", "tp"])?;
    w.write_record([r.test.model.clone(), cm.tn.to_string(), cm.fp.to_string(), cm.fn_.to_string(), cm.tp.to_string()])?;
    flush(w, &path)?;

    let path = dir.join("stage1_test_metrics.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["model", "metric", "value"])?;
    for m in crate::eval::ALL_METRICS {
        w.write_record([r.test.model.as_str(), m, &r.test.metrics.get(m).unwrap_or(f64::NAN).to_string()])?;
    }
    flush(w, &path)?;

    let path = dir.join("stage1_roc.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["fpr", "tpr", "threshold"])?;
    for p in &r.test.roc {
        w.write_record([p.fpr.to_string(), p.tpr.to_string(), p.threshold.to_string()])?;
    }
    flush(w, &path)?;

    if let Some(sr) = &r.shap {
        let path = dir.join("stage1_shap.csv");
        let mut w = csv_writer(&path)?;
        w.write_record(["model", "instance_id", "feature", "value", "phi"])?;
        for a in shap {
            for (i, &id) in ids.iter().enumerate() {
                for (j, f) in a.feature_names.iter().enumerate() {
                    w.write_record([
                        a.model.clone(),
                        id.to_string(),
                        f.clone(),
                        values.get(i, j).to_string(),
                        a.phi.get(i, j).to_string(),
                    ])?;
                }
            }
        }
        flush(w, &path)?;

        let path = dir.join("stage1_shap_consensus.csv");
        let mut w = csv_writer(&path)?;
        let mut header = vec!["feature".to_string(), "average_rank".into()];
        header.extend(sr.consensus.per_model.iter().map(|m| format!("mean_abs_{}", m.model)));
        w.write_record(&header)?;
        for name in &sr.consensus.order {
            let j = sr.consensus.feature_names.iter().position(|n| n == name).expect("ordered names");
            let mut row = vec![name.clone(), sr.consensus.average_rank[j].to_string()];
            row.extend(sr.consensus.per_model.iter().map(|m| m.mean_abs[j].to_string()));
            w.write_record(&row)?;
        }
        flush(w, &path)?;
    }
    Ok(())
}

fn write_stage2(dir: &Path, r: &Stage2Report, rows: &[usize], labels: &[usize]) -> Result<()> {
    let path = dir.join("stage2_sweep.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["k", "silhouette", "davies_bouldin", "calinski_harabasz", "inertia"])?;
    for e in &r.sweep.entries {
        w.write_record([
            e.k.to_string(),
            e.indices.silhouette.to_string(),
            e.indices.davies_bouldin.to_string(),
            e.indices.calinski_harabasz.to_string(),
            e.inertia.to_string(),
        ])?;
    }
    flush(w, &path)?;

    let path = dir.join("stage2_labels.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["row", "cluster"])?;
    for (row, c) in rows.iter().zip(labels) {
        w.write_record([row.to_string(), c.to_string()])?;
    }
    flush(w, &path)?;

    #[derive(Serialize)]
    struct Profile<'a> {
        selected_k: usize,
        rationale: &'a str,
        features: &'a [String],
        centroids_original: &'a Matrix,
        profile: &'a ClusterProfile,
    }
    write_json(
        &dir.join("stage2_profile.json"),
        &Profile {
            selected_k: r.selected_k,
            rationale: &r.sweep.rationale,
            features: &r.features,
            centroids_original: &r.centroids_original,
            profile: &r.profile,
        },
    )
}

fn write_stage3(dir: &Path, r: &Stage3Report) -> Result<()> {
    let path = dir.join("stage3_table.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["hypothesis", "test", "variables", "statistic", "p", "p_adjusted", "decision"])?;
    for h in &r.hypotheses {
        let x = &h.result;
        w.write_record([
            h.hypothesis.clone(),
            x.test.clone(),
            x.variables.clone(),
            x.statistic.to_string(),
            x.p_value.to_string(),
            x.p_adjusted.map_or(String::new(), |p| p.to_string()),
            x.decision.to_string(),
        ])?;
    }
    flush(w, &path)?;

    let path = dir.join("stage3_normality.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["column", "n", "w", "p", "decision"])?;
    for nr in &r.normality {
        let x = &nr.result;
        w.write_record([nr.column.clone(), x.n.to_string(), x.statistic.to_string(), x.p_value.to_string(), x.decision.to_string()])?;
    }
    flush(w, &path)
}
