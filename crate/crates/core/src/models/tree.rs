//! CART trees over an index set of training rows (duplicates allowed, as
//! produced by bootstrap sampling).

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    Internal {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        cover: usize,
    },
    Leaf {
        value: f64,
        cover: usize,
    },
}

impl TreeNode {
    pub fn cover(&self) -> usize {
        match *self {
            TreeNode::Internal { cover, .. } | TreeNode::Leaf { cover, .. } => cover,
        }
    }
}

/// Flat node array, root at index 0. Rows go left when `x[feature] <= threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<TreeNode>", into = "Vec<TreeNode>")]
pub struct Tree {
    nodes: Vec<TreeNode>,
}

impl TryFrom<Vec<TreeNode>> for Tree {
    type Error = Error;
    fn try_from(nodes: Vec<TreeNode>) -> Result<Self> {
        Tree::from_nodes(nodes)
    }
}

impl From<Tree> for Vec<TreeNode> {
    fn from(t: Tree) -> Self {
        t.nodes
    }
}

impl Tree {
    /// Checks child links and cover conservation.
    pub fn from_nodes(nodes: Vec<TreeNode>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::contract("tree has no nodes"));
        }
        let mut seen = vec![false; nodes.len()];
        seen[0] = true;
        for (i, node) in nodes.iter().enumerate() {
            if let TreeNode::Internal {
                left, right, cover, ..
            } = *node
            {
                for c in [left, right] {
                    if c <= i || c >= nodes.len() || seen[c] {
                        return Err(Error::contract(format!("node {i} has invalid child {c}")));
                    }
                    seen[c] = true;
                }
                if cover != nodes[left].cover() + nodes[right].cover() {
                    return Err(Error::contract(format!(
                        "node {i} cover {cover} differs from its children's sum"
                    )));
                }
            }
        }
        if nodes[0].cover() == 0 {
            return Err(Error::contract("tree without cover counts"));
        }
        Ok(Self { nodes })
    }

    pub fn leaf(value: f64, cover: usize) -> Self {
        Self {
            nodes: vec![TreeNode::Leaf { value, cover }],
        }
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn leaf_index(&self, row: &[f64]) -> usize {
        let mut i = 0;
        while let TreeNode::Internal {
            feature,
            threshold,
            left,
            right,
            ..
        } = self.nodes[i]
        {
            i = if row[feature] <= threshold { left } else { right };
        }
        i
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        match self.nodes[self.leaf_index(row)] {
            TreeNode::Leaf { value, .. } => value,
            TreeNode::Internal { .. } => unreachable!("leaf_index stops at a leaf"),
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[TreeNode], i: usize) -> usize {
            match nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Internal { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
            }
        }
        go(&self.nodes, 0)
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Leaf { .. })).count()
    }

    pub(crate) fn set_leaf_value(&mut self, i: usize, v: f64) {
        if let TreeNode::Leaf { value, .. } = &mut self.nodes[i] {
            *value = v;
        }
    }

    /// Cover-weighted mean leaf value.
    pub fn expected_value(&self) -> f64 {
        let total = self.nodes[0].cover() as f64;
        self.nodes
            .iter()
            .map(|n| match *n {
                TreeNode::Leaf { value, cover } => value * cover as f64,
                TreeNode::Internal { .. } => 0.0,
            })
            .sum::<f64>()
            / total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Binary targets in {0, 1}; leaves hold the positive-class frequency.
    Gini,
    /// Real targets; leaves hold the mean.
    Variance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    Best,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CartParams {
    pub criterion: Criterion,
    pub split: SplitMode,
    pub max_depth: Option<usize>,
    /// Non-constant features examined per node; `None` means all.
    pub max_features: Option<usize>,
    pub min_samples_split: usize,
}

impl Default for CartParams {
    fn default() -> Self {
        Self {
            criterion: Criterion::Gini,
            split: SplitMode::Best,
            max_depth: None,
            max_features: None,
            min_samples_split: 2,
        }
    }
}

struct Builder<'a> {
    x: &'a Matrix,
    target: &'a [f64],
    params: &'a CartParams,
    nodes: Vec<TreeNode>,
}

struct Split {
    feature: usize,
    threshold: f64,
    score: f64,
}

impl Builder<'_> {
    /// Σ over channels of S² / n: larger means purer children.
    fn purity(&self, sum: f64, n: f64) -> f64 {
        match self.params.criterion {
            Criterion::Gini => (sum * sum + (n - sum) * (n - sum)) / n,
            Criterion::Variance => sum * sum / n,
        }
    }

    fn best_threshold(&self, samples: &[usize], feature: usize) -> Option<Split> {
        let mut pairs: Vec<(f64, f64)> = samples
            .iter()
            .map(|&i| (self.x.get(i, feature), self.target[i]))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = pairs.len() as f64;
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        let mut left = 0.0;
        let mut best: Option<Split> = None;
        for i in 0..pairs.len() - 1 {
            left += pairs[i].1;
            let (lo, hi) = (pairs[i].0, pairs[i + 1].0);
            if hi <= lo {
                continue;
            }
            let nl = (i + 1) as f64;
            let score = self.purity(left, nl) + self.purity(total - left, n - nl);
            if best.as_ref().map_or(true, |b| score > b.score) {
                let mut threshold = lo + (hi - lo) / 2.0;
                if threshold >= hi {
                    threshold = lo;
                }
                best = Some(Split {
                    feature,
                    threshold,
                    score,
                });
            }
        }
        best
    }

    fn random_threshold(&self, samples: &[usize], feature: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Split {
        let threshold = rng.gen_range(lo..hi);
        let (mut sl, mut nl, mut total) = (0.0, 0.0, 0.0);
        for &i in samples {
            total += self.target[i];
            if self.x.get(i, feature) <= threshold {
                sl += self.target[i];
                nl += 1.0;
            }
        }
        let n = samples.len() as f64;
        Split {
            feature,
            threshold,
            score: self.purity(sl, nl) + self.purity(total - sl, n - nl),
        }
    }

    fn find_split(&self, samples: &[usize], rng: &mut ChaCha8Rng) -> Option<Split> {
        let p = self.x.cols();
        let quota = self.params.max_features.unwrap_or(p).clamp(1, p);
        let mut features: Vec<usize> = (0..p).collect();
        features.shuffle(rng);
        let mut visited = 0;
        let mut best: Option<Split> = None;
        for f in features {
            if visited == quota {
                break;
            }
            let (lo, hi) = samples.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                let v = self.x.get(i, f);
                (lo.min(v), hi.max(v))
            });
            if hi <= lo {
                continue;
            }
            visited += 1;
            let cand = match self.params.split {
                SplitMode::Best => self.best_threshold(samples, f),
                SplitMode::Random => Some(self.random_threshold(samples, f, lo, hi, rng)),
            };
            if let Some(c) = cand {
                if best.as_ref().map_or(true, |b| c.score > b.score) {
                    best = Some(c);
                }
            }
        }
        best
    }

    fn grow(&mut self, samples: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let id = self.nodes.len();
        let n = samples.len();
        let sum: f64 = samples.iter().map(|&i| self.target[i]).sum();
        let mean = sum / n as f64;
        self.nodes.push(TreeNode::Leaf { value: mean, cover: n });
        let pure = match self.params.criterion {
            Criterion::Gini => sum == 0.0 || sum == n as f64,
            Criterion::Variance => samples.iter().all(|&i| self.target[i] == self.target[samples[0]]),
        };
        if pure || n < self.params.min_samples_split || self.params.max_depth.is_some_and(|d| depth >= d) {
            return id;
        }
        let Some(split) = self.find_split(samples, rng) else {
            return id;
        };
        let mut k = 0;
        for j in 0..n {
            if self.x.get(samples[j], split.feature) <= split.threshold {
                samples.swap(j, k);
                k += 1;
            }
        }
        let (ls, rs) = samples.split_at_mut(k);
        let left = self.grow(ls, depth + 1, rng);
        let right = self.grow(rs, depth + 1, rng);
        self.nodes[id] = TreeNode::Internal {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
            cover: n,
        };
        id
    }
}

/// Grows a tree on the rows listed in `samples` (may repeat).
pub fn fit_cart(x: &Matrix, target: &[f64], samples: &[usize], params: &CartParams, rng: &mut ChaCha8Rng) -> Result<Tree> {
    if samples.is_empty() {
        return Err(Error::Fit("tree needs at least one sample".into()));
    }
    if target.len() != x.rows() {
        return Err(Error::contract("target length differs from row count"));
    }
    let mut b = Builder {
        x,
        target,
        params,
        nodes: Vec::new(),
    };
    let mut idx = samples.to_vec();
    b.grow(&mut idx, 0, rng);
    Ok(Tree { nodes: b.nodes })
}
