//! Soft-margin RBF SVM trained by sequential minimal optimization with
//! maximal-violating-pair working set selection, plus Platt scaling fit on
//! out-of-fold decision values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{sq_dist, Matrix};
use crate::preprocess::stratified_kfold;

const TAU: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gamma {
    /// 1 / (p · mean per-feature population variance).
    Scale,
    Value(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmParams {
    pub c: f64,
    pub gamma: Gamma,
    /// KKT violation tolerance (m(α) − M(α)).
    pub tol: f64,
    pub max_iter: usize,
    /// Folds used to produce decision values for Platt scaling.
    pub platt_folds: usize,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            c: 1.0,
            gamma: Gamma::Scale,
            tol: 1e-3,
            max_iter: 10_000_000,
            platt_folds: 3,
        }
    }
}

impl Gamma {
    pub fn resolve(self, x: &Matrix) -> f64 {
        match self {
            Gamma::Value(g) => g,
            Gamma::Scale => {
                let p = x.cols();
                let n = x.rows() as f64;
                let mean_var = (0..p)
                    .map(|j| {
                        let col = x.column(j);
                        let m = col.iter().sum::<f64>() / n;
                        col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n
                    })
                    .sum::<f64>()
                    / p as f64;
                if mean_var > 0.0 {
                    1.0 / (p as f64 * mean_var)
                } else {
                    1.0
                }
            }
        }
    }
}

#[inline]
pub fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    (-gamma * sq_dist(a, b)).exp()
}

/// Lazily computed kernel rows, kept once computed.
struct KernelCache<'a> {
    x: &'a Matrix,
    gamma: f64,
    rows: Vec<Option<Vec<f64>>>,
}

impl<'a> KernelCache<'a> {
    fn new(x: &'a Matrix, gamma: f64) -> Self {
        Self {
            x,
            gamma,
            rows: vec![None; x.rows()],
        }
    }

    fn row(&mut self, i: usize) -> &[f64] {
        if self.rows[i].is_none() {
            let xi = self.x.row(i);
            let r = (0..self.x.rows()).map(|j| rbf(xi, self.x.row(j), self.gamma)).collect();
            self.rows[i] = Some(r);
        }
        self.rows[i].as_deref().expect("filled above")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoSolution {
    pub alpha: Vec<f64>,
    /// Intercept: f(x) = Σ αᵢ yᵢ K(xᵢ, x) + b.
    pub b: f64,
    pub iterations: usize,
    /// Final m(α) − M(α).
    pub violation: f64,
}

/// Solves min ½ αᵀQα − eᵀα s.t. 0 ≤ α ≤ C, yᵀα = 0 with `y` in {−1, +1}.
pub fn solve_smo(x: &Matrix, y: &[f64], c: f64, gamma: f64, tol: f64, max_iter: usize) -> Result<SmoSolution> {
    let n = x.rows();
    let mut cache = KernelCache::new(x, gamma);
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let up = |a: f64, yt: f64| (yt > 0.0 && a < c) || (yt < 0.0 && a > 0.0);
    let low = |a: f64, yt: f64| (yt < 0.0 && a < c) || (yt > 0.0 && a > 0.0);

    let mut iterations = 0;
    let violation = loop {
        let mut i = usize::MAX;
        let mut gmax = f64::NEG_INFINITY;
        let mut j = usize::MAX;
        let mut gmin = f64::INFINITY;
        for t in 0..n {
            let v = -y[t] * grad[t];
            if up(alpha[t], y[t]) && v > gmax {
                gmax = v;
                i = t;
            }
            if low(alpha[t], y[t]) && v < gmin {
                gmin = v;
                j = t;
            }
        }
        if i == usize::MAX || j == usize::MAX {
            break 0.0;
        }
        let gap = gmax - gmin;
        if gap < tol {
            break gap;
        }
        if iterations >= max_iter {
            return Err(Error::Convergence {
                iterations,
                detail: format!("SMO KKT violation {gap:.3e} above tolerance {tol:.1e}"),
            });
        }
        iterations += 1;

        let ki = cache.row(i).to_vec();
        let kj = cache.row(j).to_vec();
        let (ai_old, aj_old) = (alpha[i], alpha[j]);
        let (mut ai, mut aj) = (ai_old, aj_old);
        if y[i] != y[j] {
            let mut quad = ki[i] + kj[j] - 2.0 * ki[j];
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = ai - aj;
            ai += delta;
            aj += delta;
            if diff > 0.0 {
                if aj < 0.0 {
                    aj = 0.0;
                    ai = diff;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = -diff;
            }
            if diff > 0.0 {
                if ai > c {
                    ai = c;
                    aj = c - diff;
                }
            } else if aj > c {
                aj = c;
                ai = c + diff;
            }
        } else {
            let mut quad = ki[i] + kj[j] - 2.0 * ki[j];
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (grad[i] - grad[j]) / quad;
            let sum = ai + aj;
            ai -= delta;
            aj += delta;
            if sum > c {
                if ai > c {
                    ai = c;
                    aj = sum - c;
                }
            } else if aj < 0.0 {
                aj = 0.0;
                ai = sum;
            }
            if sum > c {
                if aj > c {
                    aj = c;
                    ai = sum - c;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = sum;
            }
        }
        alpha[i] = ai;
        alpha[j] = aj;
        let dai = ai - ai_old;
        let daj = aj - aj_old;
        for t in 0..n {
            grad[t] += y[t] * (y[i] * ki[t] * dai + y[j] * kj[t] * daj);
        }
    };

    // intercept from free vectors, else midpoint of the feasible interval
    let mut ub = f64::INFINITY;
    let mut lb = f64::NEG_INFINITY;
    let mut sum_free = 0.0;
    let mut n_free = 0usize;
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    let rho = if n_free > 0 {
        sum_free / n_free as f64
    } else {
        (ub + lb) / 2.0
    };
    Ok(SmoSolution {
        alpha,
        b: -rho,
        iterations,
        violation,
    })
}

/// Dual objective in maximization form: Σα − ½ Σᵢⱼ αᵢαⱼyᵢyⱼK(xᵢ, xⱼ).
pub fn dual_objective(alpha: &[f64], y: &[f64], x: &Matrix, gamma: f64) -> f64 {
    let n = alpha.len();
    let mut quad = 0.0;
    for i in 0..n {
        if alpha[i] == 0.0 {
            continue;
        }
        for j in 0..n {
            quad += alpha[i] * alpha[j] * y[i] * y[j] * rbf(x.row(i), x.row(j), gamma);
        }
    }
    alpha.iter().sum::<f64>() - 0.5 * quad
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlattScaling {
    pub a: f64,
    pub b: f64,
}

impl PlattScaling {
    /// P(y = 1 | f) = 1 / (1 + exp(a·f + b)).
    pub fn probability(&self, f: f64) -> f64 {
        let z = self.a * f + self.b;
        if z >= 0.0 {
            let e = (-z).exp();
            e / (1.0 + e)
        } else {
            1.0 / (1.0 + z.exp())
        }
    }

    /// log-odds of the positive class.
    pub fn logit(&self, f: f64) -> f64 {
        -(self.a * f + self.b)
    }
}

/// Platt's sigmoid fit with target smoothing and a Newton/backtracking solver.
pub fn fit_platt(dec: &[f64], y: &[u8]) -> PlattScaling {
    let prior1 = y.iter().filter(|&&v| v == 1).count() as f64;
    let prior0 = y.len() as f64 - prior1;
    let hi = (prior1 + 1.0) / (prior1 + 2.0);
    let lo = 1.0 / (prior0 + 2.0);
    let t: Vec<f64> = y.iter().map(|&v| if v == 1 { hi } else { lo }).collect();
    let objective = |a: f64, b: f64| -> f64 {
        dec.iter()
            .zip(&t)
            .map(|(&f, &ti)| {
                let z = f * a + b;
                if z >= 0.0 {
                    ti * z + (-z).exp().ln_1p()
                } else {
                    (ti - 1.0) * z + z.exp().ln_1p()
                }
            })
            .sum()
    };
    let (mut a, mut b) = (0.0, ((prior0 + 1.0) / (prior1 + 1.0)).ln());
    let mut fval = objective(a, b);
    let sigma = 1e-12;
    for _ in 0..100 {
        let (mut h11, mut h22, mut h21, mut g1, mut g2) = (sigma, sigma, 0.0, 0.0, 0.0);
        for (&f, &ti) in dec.iter().zip(&t) {
            let z = f * a + b;
            let (p, q) = if z >= 0.0 {
                let e = (-z).exp();
                (e / (1.0 + e), 1.0 / (1.0 + e))
            } else {
                let e = z.exp();
                (1.0 / (1.0 + e), e / (1.0 + e))
            };
            let d2 = p * q;
            h11 += f * f * d2;
            h22 += d2;
            h21 += f * d2;
            let d1 = ti - p;
            g1 += f * d1;
            g2 += d1;
        }
        if g1.abs() < 1e-5 && g2.abs() < 1e-5 {
            break;
        }
        let det = h11 * h22 - h21 * h21;
        let da = -(h22 * g1 - h21 * g2) / det;
        let db = -(-h21 * g1 + h11 * g2) / det;
        let gd = g1 * da + g2 * db;
        let mut step = 1.0;
        while step >= 1e-10 {
            let (na, nb) = (a + step * da, b + step * db);
            let nf = objective(na, nb);
            if nf < fval + 1e-4 * step * gd {
                a = na;
                b = nb;
                fval = nf;
                break;
            }
            step /= 2.0;
        }
        if step < 1e-10 {
            break;
        }
    }
    PlattScaling { a, b }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub support_vectors: Matrix,
    /// αᵢ yᵢ for each support vector.
    pub dual_coef: Vec<f64>,
    pub intercept: f64,
    pub gamma: f64,
    pub c: f64,
    pub platt: PlattScaling,
    pub iterations: usize,
}

impl SvmModel {
    pub fn decision_value(&self, row: &[f64]) -> f64 {
        self.support_vectors
            .iter_rows()
            .zip(&self.dual_coef)
            .map(|(sv, &coef)| coef * rbf(sv, row, self.gamma))
            .sum::<f64>()
            + self.intercept
    }
}

fn signed(y: &[u8]) -> Vec<f64> {
    y.iter().map(|&v| if v == 1 { 1.0 } else { -1.0 }).collect()
}

fn fit_core(x: &Matrix, y: &[u8], params: &SvmParams, gamma: f64) -> Result<(SmoSolution, SvmModel)> {
    let ys = signed(y);
    let sol = solve_smo(x, &ys, params.c, gamma, params.tol, params.max_iter)?;
    let sv: Vec<usize> = (0..x.rows()).filter(|&i| sol.alpha[i] > 0.0).collect();
    let model = SvmModel {
        support_vectors: x.select_rows(&sv),
        dual_coef: sv.iter().map(|&i| sol.alpha[i] * ys[i]).collect(),
        intercept: sol.b,
        gamma,
        c: params.c,
        platt: PlattScaling { a: -1.0, b: 0.0 },
        iterations: sol.iterations,
    };
    Ok((sol, model))
}

pub fn fit_svm(x: &Matrix, y: &[u8], params: &SvmParams, seed: u64) -> Result<SvmModel> {
    if x.rows() != y.len() {
        return Err(Error::contract("label count differs from row count"));
    }
    let n1 = y.iter().filter(|&&v| v == 1).count();
    let n0 = y.len() - n1;
    if n0 == 0 || n1 == 0 {
        return Err(Error::Fit("SVM needs both classes".into()));
    }
    if !(params.c > 0.0) {
        return Err(Error::Config(format!("SVM C must be positive, got {}", params.c)));
    }
    let gamma = params.gamma.resolve(x);
    let (_, mut model) = fit_core(x, y, params, gamma)?;

    // out-of-fold decision values; in-sample when a class is too small to split
    let k = params.platt_folds;
    let dec: Vec<f64> = if k >= 2 && n0.min(n1) >= k {
        let folds = stratified_kfold(y, k, seed)?;
        let mut dec = vec![0.0; y.len()];
        for f in 0..k {
            let train: Vec<usize> = (0..y.len()).filter(|&i| folds[i] != f).collect();
            let test: Vec<usize> = (0..y.len()).filter(|&i| folds[i] == f).collect();
            let ytr: Vec<u8> = train.iter().map(|&i| y[i]).collect();
            let (_, m) = fit_core(&x.select_rows(&train), &ytr, params, gamma)?;
            for &i in &test {
                dec[i] = m.decision_value(x.row(i));
            }
        }
        dec
    } else {
        x.iter_rows().map(|r| model.decision_value(r)).collect()
    };
    model.platt = fit_platt(&dec, y);
    Ok(model)
}
