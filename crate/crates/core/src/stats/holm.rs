use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolmAdjustment {
    pub raw: Vec<f64>,
    /// Adjusted p-values, in the order of `raw`.
    pub adjusted: Vec<f64>,
    pub m: usize,
}

/// Holm step-down adjustment; output keeps the input order.
pub fn holm_correct(p: &[f64]) -> Result<HolmAdjustment> {
    if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::contract(format!("p-value {bad} outside [0, 1]")));
    }
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let mut adjusted = vec![0.0; m];
    let mut running = 0.0f64;
    for (rank, &i) in order.iter().enumerate() {
        let scaled = ((m - rank) as f64 * p[i]).min(1.0);
        running = running.max(scaled);
        adjusted[i] = running;
    }
    Ok(HolmAdjustment {
        raw: p.to_vec(),
        adjusted,
        m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn family_of_two() {
        let a = holm_correct(&[5.29e-5, 0.541]).unwrap();
        assert!((a.adjusted[0] - 1.058e-4).abs() < 1e-12);
        assert_eq!(a.adjusted[1], 0.541);
        // order restored when the small p comes second
        let b = holm_correct(&[0.541, 5.29e-5]).unwrap();
        assert_eq!(b.adjusted[0], 0.541);
        assert!((b.adjusted[1] - 1.058e-4).abs() < 1e-12);
    }

    #[test]
    fn single_and_clipped() {
        assert_eq!(holm_correct(&[0.03]).unwrap().adjusted, vec![0.03]);
        assert_eq!(holm_correct(&[0.5, 0.6, 0.7]).unwrap().adjusted, vec![1.0, 1.0, 1.0]);
        assert!(holm_correct(&[1.2]).is_err());
    }

    proptest! {
        #[test]
        fn between_raw_and_bonferroni(p in prop::collection::vec(0.0f64..=1.0, 1..20)) {
            let a = holm_correct(&p).unwrap();
            let m = p.len() as f64;
            for (raw, adj) in p.iter().zip(&a.adjusted) {
                prop_assert!(*adj >= *raw);
                prop_assert!(*adj <= (m * raw).min(1.0) + 1e-15);
            }
            // monotone in sorted raw order
            let mut idx: Vec<usize> = (0..p.len()).collect();
            idx.sort_by(|&x, &y| p[x].total_cmp(&p[y]));
            for w in idx.windows(2) {
                prop_assert!(a.adjusted[w[0]] <= a.adjusted[w[1]]);
            }
        }
    }
}
