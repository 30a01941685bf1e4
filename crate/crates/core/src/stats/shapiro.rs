//! Shapiro-Wilk W with Royston's polynomial approximations (algorithm AS R94).

use super::distributions::{normal_quantile, normal_sf};
use super::HypothesisResult;
use crate::error::{Error, Result};

const SMALL: f64 = 1e-19;
const G: [f64; 2] = [-2.273, 0.459];
const C1: [f64; 6] = [0.0, 0.221_157, -0.147_981, -2.071_19, 4.434_685, -2.706_056];
const C2: [f64; 6] = [0.0, 0.042_981, -0.293_762, -1.752_461, 5.682_633, -3.582_633];
const C3: [f64; 4] = [0.544, -0.399_78, 0.025_054, -6.714e-4];
const C4: [f64; 4] = [1.3822, -0.778_57, 0.062_767, -0.002_032_2];
const C5: [f64; 4] = [-1.5861, -0.310_82, -0.083_751, 0.003_891_5];
const C6: [f64; 3] = [-0.4803, -0.082_676, 0.003_030_2];

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &k| acc * x + k)
}

/// Half of the antisymmetric coefficient vector, a₁ ≥ a₂ ≥ … (largest first).
fn coefficients(n: usize) -> Vec<f64> {
    let nn2 = n / 2;
    if n == 3 {
        return vec![std::f64::consts::FRAC_1_SQRT_2];
    }
    let an25 = n as f64 + 0.25;
    let m: Vec<f64> = (1..=nn2)
        .map(|i| normal_quantile((i as f64 - 0.375) / an25))
        .collect();
    let summ2 = 2.0 * m.iter().map(|v| v * v).sum::<f64>();
    let ssumm2 = summ2.sqrt();
    let rsn = 1.0 / (n as f64).sqrt();
    let a1 = poly(&C1, rsn) - m[0] / ssumm2;
    let mut a = vec![0.0; nn2];
    a[0] = a1;
    let (first, fac) = if n > 5 {
        let a2 = -m[1] / ssumm2 + poly(&C2, rsn);
        a[1] = a2;
        let fac = ((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1])
            / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2))
            .sqrt();
        (2, fac)
    } else {
        (1, ((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1)).sqrt())
    };
    for i in first..nn2 {
        a[i] = -m[i] / fac;
    }
    a
}

/// Shapiro-Wilk test for 3 ≤ n ≤ 5000.
pub fn shapiro_wilk(x: &[f64]) -> Result<HypothesisResult> {
    let n = x.len();
    if !(3..=5000).contains(&n) {
        return Err(Error::UnsupportedSize {
            n,
            reason: "Shapiro-Wilk supports 3 <= n <= 5000".into(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("Shapiro-Wilk inputs must be finite"));
    }
    let mut xs = x.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    let range = xs[n - 1] - xs[0];
    if range < SMALL {
        return Err(Error::Degenerate("zero sample variance".into()));
    }

    let half = coefficients(n);
    // full coefficient vector: -a on the lower half, +a mirrored on the upper
    let mut coef = vec![0.0; n];
    for (i, &a) in half.iter().enumerate() {
        coef[i] = -a;
        coef[n - 1 - i] = a;
    }
    let xr: Vec<f64> = xs.iter().map(|v| v / range).collect();
    let nf = n as f64;
    let sa = coef.iter().sum::<f64>() / nf;
    let sx = xr.iter().sum::<f64>() / nf;
    let (mut ssa, mut ssx, mut sax) = (0.0, 0.0, 0.0);
    for (c, v) in coef.iter().zip(&xr) {
        let asa = c - sa;
        let xsx = v - sx;
        ssa += asa * asa;
        ssx += xsx * xsx;
        sax += asa * xsx;
    }
    // 1 - W, computed this way to avoid cancellation when W is near 1
    let ssassx = (ssa * ssx).sqrt();
    let w1 = (ssassx - sax) * (ssassx + sax) / (ssa * ssx);
    let w = 1.0 - w1;

    let p = if n == 3 {
        let pi6 = 6.0 / std::f64::consts::PI;
        let stqr = std::f64::consts::FRAC_PI_3;
        (pi6 * (w.sqrt().asin() - stqr)).max(0.0)
    } else {
        let mut y = w1.ln();
        let lnn = nf.ln();
        let (m, s) = if n <= 11 {
            let gamma = poly(&G, nf);
            if y >= gamma {
                return Ok(HypothesisResult::new("Shapiro-Wilk", w, None, n, 1e-99));
            }
            y = -(gamma - y).ln();
            (poly(&C3, nf), poly(&C4, nf).exp())
        } else {
            (poly(&C5, lnn), poly(&C6, lnn).exp())
        };
        normal_sf((y - m) / s)
    };
    Ok(HypothesisResult::new("Shapiro-Wilk", w, None, n, p.clamp(0.0, 1.0)))
}
