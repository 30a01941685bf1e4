//! Nonparametric statistics: ranking, Spearman, Kruskal-Wallis, Shapiro-Wilk,
//! Holm step-down adjustment, and the distribution functions behind them.

pub mod descriptive;
pub mod distributions;
pub mod holm;
pub mod nonparametric;
pub mod rank;
pub mod shapiro;
pub mod special;

use serde::{Deserialize, Serialize};

pub use distributions::{chi2_sf, normal_cdf, normal_quantile, normal_sf, t_sf};
pub use holm::{holm_correct, HolmAdjustment};
pub use nonparametric::{
    kruskal_wallis, spearman, spearman_p_value, spearman_with, CorrelationResult, SpearmanMethod,
};
pub use rank::{average_ranks, RankVector};
pub use shapiro::shapiro_wilk;

pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Reject,
    FailToReject,
}

impl std::fmt::Display for Decision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Decision::Reject => "reject",
            Decision::FailToReject => "fail to reject",
        })
    }
}

/// One row of a Table-2-style results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisResult {
    pub test: String,
    pub variables: String,
    pub statistic: f64,
    pub df: Option<f64>,
    pub n: usize,
    pub p_value: f64,
    pub p_adjusted: Option<f64>,
    pub alpha: f64,
    pub decision: Decision,
    pub two_tailed: bool,
}

impl HypothesisResult {
    pub fn new(test: &str, statistic: f64, df: Option<f64>, n: usize, p_value: f64) -> Self {
        let mut r = Self {
            test: test.to_string(),
            variables: String::new(),
            statistic,
            df,
            n,
            p_value,
            p_adjusted: None,
            alpha: DEFAULT_ALPHA,
            decision: Decision::FailToReject,
            two_tailed: true,
        };
        r.decide();
        r
    }

    pub fn with_variables(mut self, variables: impl Into<String>) -> Self {
        self.variables = variables.into();
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self.decide();
        self
    }

    pub fn set_adjusted(&mut self, p: f64) {
        self.p_adjusted = Some(p);
        self.decide();
    }

    /// p used for the decision: adjusted when present, raw otherwise.
    pub fn effective_p(&self) -> f64 {
        self.p_adjusted.unwrap_or(self.p_value)
    }

    fn decide(&mut self) {
        self.decision = if self.effective_p() < self.alpha {
            Decision::Reject
        } else {
            Decision::FailToReject
        };
    }
}

/// Applies Holm adjustment across `family`, updating each decision.
pub fn adjust_family(family: &mut [HypothesisResult]) {
    let raw: Vec<f64> = family.iter().map(|h| h.p_value).collect();
    let adj = holm_correct(&raw).expect("p-values of computed tests lie in [0, 1]");
    for (h, p) in family.iter_mut().zip(adj.adjusted) {
        h.set_adjusted(p);
    }
}
