//! Class-weighted logistic regression fit by damped Newton iterations with a
//! backtracking (Armijo) line search. No penalty term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogRegParams {
    pub max_iter: usize,
    /// Weight each class by n / (2 · n_c).
    pub balanced: bool,
    /// Convergence threshold on the max-norm of the mean-loss gradient.
    pub tol: f64,
}

impl Default for LogRegParams {
    fn default() -> Self {
        Self {
            max_iter: 4000,
            balanced: true,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub class_weights: [f64; 2],
    pub iterations: usize,
    pub converged: bool,
}

impl LogisticModel {
    pub fn score(&self, row: &[f64]) -> f64 {
        self.bias + row.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()
    }
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Per-class weights: n / (2 · n_c) when balanced, else 1.
pub fn class_weights(y: &[u8], balanced: bool) -> [f64; 2] {
    if !balanced {
        return [1.0, 1.0];
    }
    let n = y.len() as f64;
    let n1 = y.iter().filter(|&&v| v == 1).count() as f64;
    let n0 = n - n1;
    [n / (2.0 * n0), n / (2.0 * n1)]
}

/// Mean weighted logistic loss and its gradient at `theta = [w..., b]`.
pub fn logistic_objective(theta: &[f64], x: &Matrix, y: &[u8], cw: [f64; 2]) -> (f64, Vec<f64>) {
    let p = x.cols();
    let n = x.rows() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; p + 1];
    for (i, row) in x.iter_rows().enumerate() {
        let z = theta[p] + row.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>();
        let s = cw[y[i] as usize];
        let yi = y[i] as f64;
        loss += s * (softplus(z) - yi * z);
        let r = s * (sigmoid(z) - yi);
        for j in 0..p {
            grad[j] += r * row[j];
        }
        grad[p] += r;
    }
    loss /= n;
    grad.iter_mut().for_each(|g| *g /= n);
    (loss, grad)
}

fn hessian(theta: &[f64], x: &Matrix, y: &[u8], cw: [f64; 2]) -> Vec<Vec<f64>> {
    let p = x.cols();
    let n = x.rows() as f64;
    let mut h = vec![vec![0.0; p + 1]; p + 1];
    let mut ext = vec![1.0; p + 1];
    for (i, row) in x.iter_rows().enumerate() {
        ext[..p].copy_from_slice(row);
        let z = theta[p] + row.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>();
        let s = sigmoid(z);
        let w = cw[y[i] as usize] * s * (1.0 - s) / n;
        for a in 0..=p {
            let wa = w * ext[a];
            for b in 0..=a {
                h[a][b] += wa * ext[b];
            }
        }
    }
    for a in 0..=p {
        for b in 0..a {
            h[b][a] = h[a][b];
        }
    }
    h
}

/// Solves (H + λI) d = rhs by Cholesky; None if not positive definite.
fn cholesky_solve(h: &[Vec<f64>], lambda: f64, rhs: &[f64]) -> Option<Vec<f64>> {
    let m = rhs.len();
    let mut l = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in 0..=i {
            let mut sum = h[i][j] + if i == j { lambda } else { 0.0 };
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return None;
                }
                l[i][i] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    let mut z = vec![0.0; m];
    for i in 0..m {
        let s: f64 = (0..i).map(|k| l[i][k] * z[k]).sum();
        z[i] = (rhs[i] - s) / l[i][i];
    }
    let mut d = vec![0.0; m];
    for i in (0..m).rev() {
        let s: f64 = (i + 1..m).map(|k| l[k][i] * d[k]).sum();
        d[i] = (z[i] - s) / l[i][i];
    }
    Some(d)
}

pub fn fit_logreg(x: &Matrix, y: &[u8], params: &LogRegParams) -> Result<LogisticModel> {
    if x.rows() != y.len() {
        return Err(Error::contract("label count differs from row count"));
    }
    if !(y.contains(&0) && y.contains(&1)) {
        return Err(Error::Fit("logistic regression needs both classes".into()));
    }
    let p = x.cols();
    let cw = class_weights(y, params.balanced);
    let mut theta = vec![0.0; p + 1];
    let (mut loss, mut grad) = logistic_objective(&theta, x, y, cw);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < params.max_iter {
        if grad.iter().fold(0.0f64, |m, g| m.max(g.abs())) < params.tol {
            converged = true;
            break;
        }
        iterations += 1;
        let h = hessian(&theta, x, y, cw);
        let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
        let scale = (0..=p).map(|i| h[i][i]).fold(0.0f64, f64::max).max(1e-300);
        let mut lambda = 0.0;
        let mut dir = None;
        for _ in 0..30 {
            if let Some(d) = cholesky_solve(&h, lambda, &neg) {
                dir = Some(d);
                break;
            }
            lambda = if lambda == 0.0 { 1e-12 * scale } else { lambda * 10.0 };
        }
        let mut d = dir.unwrap_or_else(|| neg.clone());
        let mut slope: f64 = d.iter().zip(&grad).map(|(a, b)| a * b).sum();
        if !(slope < 0.0) {
            d = neg.clone();
            slope = -grad.iter().map(|g| g * g).sum::<f64>();
        }
        let mut step = 1.0;
        let mut accepted = false;
        while step > 1e-12 {
            let cand: Vec<f64> = theta.iter().zip(&d).map(|(t, di)| t + step * di).collect();
            let (l_new, g_new) = logistic_objective(&cand, x, y, cw);
            if l_new <= loss + 1e-4 * step * slope {
                theta = cand;
                loss = l_new;
                grad = g_new;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // no further decrease representable in floating point
            converged = true;
            break;
        }
    }
    Ok(LogisticModel {
        weights: theta[..p].to_vec(),
        bias: theta[p],
        class_weights: cw,
        iterations,
        converged,
    })
}
