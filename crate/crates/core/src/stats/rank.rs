use serde::{Deserialize, Serialize};

use crate::scalar::Real;

/// 1-based average ranks plus the sizes of tied groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankVector {
    pub ranks: Vec<f64>,
    /// Size of every tie group with more than one member.
    pub ties: Vec<usize>,
}

impl RankVector {
    /// Σ (t³ - t) over tie groups.
    pub fn tie_term(&self) -> f64 {
        self.ties
            .iter()
            .map(|&t| {
                let t = t as f64;
                t * t * t - t
            })
            .sum()
    }
}

/// Ranks with ties receiving the mean of the positions they span.
pub fn average_ranks<T: Real>(x: &[T]) -> RankVector {
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; n];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && x[order[j]] == x[order[i]] {
            j += 1;
        }
        // positions i+1 ..= j share their mean
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        if j - i > 1 {
            ties.push(j - i);
        }
        i = j;
    }
    RankVector { ranks, ties }
}
