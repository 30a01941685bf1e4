use serde::{Deserialize, Serialize};

use super::distributions::{chi2_sf, t_sf};
use super::rank::average_ranks;
use super::HypothesisResult;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub rho_s: f64,
    pub n: usize,
    pub t_statistic: f64,
    pub p_value: f64,
}

impl CorrelationResult {
    pub fn to_hypothesis(&self, variables: &str, alpha: f64) -> HypothesisResult {
        HypothesisResult::new("Spearman", self.rho_s, Some((self.n - 2) as f64), self.n, self.p_value)
            .with_variables(variables)
            .with_alpha(alpha)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpearmanMethod {
    /// Student-t approximation with n - 2 degrees of freedom.
    #[default]
    TApprox,
    /// Enumerates every permutation; n ≤ 10 only.
    ExactPermutation,
}

pub const MAX_EXACT_N: usize = 10;

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// t statistic and two-tailed p for a Spearman coefficient at sample size n.
pub fn spearman_p_value(rho: f64, n: usize) -> Result<(f64, f64)> {
    if n < 3 {
        return Err(Error::UnsupportedSize {
            n,
            reason: "Spearman needs at least 3 pairs".into(),
        });
    }
    if rho.abs() >= 1.0 {
        return Ok((rho.signum() * f64::INFINITY, 0.0));
    }
    let df = (n - 2) as f64;
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    let p = (2.0 * t_sf(t.abs(), df)?).min(1.0);
    Ok((t, p))
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<CorrelationResult> {
    spearman_with(x, y, SpearmanMethod::TApprox)
}

pub fn spearman_with(x: &[f64], y: &[f64], method: SpearmanMethod) -> Result<CorrelationResult> {
    if x.len() != y.len() {
        return Err(Error::contract(format!(
            "spearman inputs differ in length ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::UnsupportedSize {
            n,
            reason: "Spearman needs at least 3 pairs".into(),
        });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::contract("spearman inputs must be finite"));
    }
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if constant(x) || constant(y) {
        return Err(Error::Degenerate("correlation undefined for a constant vector".into()));
    }
    let rx = average_ranks(x).ranks;
    let ry = average_ranks(y).ranks;
    let rho = pearson(&rx, &ry);
    let (t, p_t) = spearman_p_value(rho, n)?;
    let p = match method {
        SpearmanMethod::TApprox => p_t,
        SpearmanMethod::ExactPermutation => {
            if n > MAX_EXACT_N {
                return Err(Error::UnsupportedSize {
                    n,
                    reason: format!("exact permutation p limited to n <= {MAX_EXACT_N}"),
                });
            }
            exact_permutation_p(&rx, &ry, rho)
        }
    };
    Ok(CorrelationResult {
        rho_s: rho,
        n,
        t_statistic: t,
        p_value: p,
    })
}

// Two-sided P(|ρ| >= |ρ_obs|) over all n! pairings (Heap's algorithm).
fn exact_permutation_p(rx: &[f64], ry: &[f64], rho: f64) -> f64 {
    let n = ry.len();
    let mut perm = ry.to_vec();
    let target = rho.abs() - 1e-12;
    let mut hits = 0u64;
    let mut total = 0u64;
    let mut count = |p: &[f64]| {
        total += 1;
        if pearson(rx, p).abs() >= target {
            hits += 1;
        }
    };
    let mut c = vec![0usize; n];
    count(&perm);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            count(&perm);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    hits as f64 / total as f64
}

/// Kruskal-Wallis H over pooled average ranks; `tie_correction` divides by
/// 1 - Σ(t³ - t)/(N³ - N).
pub fn kruskal_wallis<G: AsRef<[f64]>>(groups: &[G], tie_correction: bool) -> Result<HypothesisResult> {
    if groups.len() < 2 {
        return Err(Error::contract("Kruskal-Wallis needs at least two groups"));
    }
    if groups.iter().any(|g| g.as_ref().is_empty()) {
        return Err(Error::contract("Kruskal-Wallis groups must be non-empty"));
    }
    let pooled: Vec<f64> = groups.iter().flat_map(|g| g.as_ref().iter().copied()).collect();
    let n = pooled.len();
    if n < 3 {
        return Err(Error::UnsupportedSize {
            n,
            reason: "Kruskal-Wallis needs at least 3 observations".into(),
        });
    }
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("Kruskal-Wallis inputs must be finite"));
    }
    let ranks = average_ranks(&pooled);
    let nf = n as f64;
    let centre = (nf + 1.0) / 2.0;
    let mut offset = 0;
    let mut between = 0.0;
    for g in groups {
        let len = g.as_ref().len();
        let mean_rank = ranks.ranks[offset..offset + len].iter().sum::<f64>() / len as f64;
        between += len as f64 * (mean_rank - centre) * (mean_rank - centre);
        offset += len;
    }
    let mut h = 12.0 / (nf * (nf + 1.0)) * between;
    if tie_correction {
        let c = 1.0 - ranks.tie_term() / (nf * nf * nf - nf);
        if c <= 0.0 {
            return Err(Error::Degenerate("all Kruskal-Wallis values are identical".into()));
        }
        h /= c;
    }
    let df = (groups.len() - 1) as f64;
    let p = chi2_sf(h, df)?;
    Ok(HypothesisResult::new("Kruskal-Wallis", h, Some(df), n, p))
}
