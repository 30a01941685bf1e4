#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tristage::models::{Tree, TreeNode};
use tristage::stats::normal_quantile;
use tristage::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(r: &mut ChaCha8Rng) -> f64 {
    normal_quantile(r.gen_range(1e-12..1.0 - 1e-12))
}

// ---------------------------------------------------------------- trees

/// Random tree in preorder with positive covers; splits on features in
/// `0..p`, thresholds in (0, 1).
pub fn random_tree(r: &mut ChaCha8Rng, p: usize, max_depth: usize) -> Tree {
    fn grow(r: &mut ChaCha8Rng, p: usize, depth: usize, out: &mut Vec<TreeNode>) -> usize {
        let me = out.len();
        if depth == 0 || (me > 0 && r.gen_bool(0.25)) {
            out.push(TreeNode::Leaf {
                value: r.gen_range(-2.0..2.0),
                cover: r.gen_range(1..30),
            });
            return me;
        }
        out.push(TreeNode::Leaf { value: 0.0, cover: 0 });
        let feature = r.gen_range(0..p);
        let threshold = r.gen_range(0.05..0.95);
        let left = grow(r, p, depth - 1, out);
        let right = grow(r, p, depth - 1, out);
        let cover = out[left].cover() + out[right].cover();
        out[me] = TreeNode::Internal {
            feature,
            threshold,
            left,
            right,
            cover,
        };
        me
    }
    let mut nodes = Vec::new();
    grow(r, p, max_depth, &mut nodes);
    Tree::from_nodes(nodes).expect("generated tree is well formed")
}

/// Path-dependent conditional expectation: features in `known` follow `x`,
/// the others split the mass by child cover.
fn cond_expectation(nodes: &[TreeNode], i: usize, x: &[f64], known: u32) -> f64 {
    match nodes[i] {
        TreeNode::Leaf { value, .. } => value,
        TreeNode::Internal {
            feature,
            threshold,
            left,
            right,
            cover,
        } => {
            if known & (1 << feature) != 0 {
                let next = if x[feature] <= threshold { left } else { right };
                cond_expectation(nodes, next, x, known)
            } else {
                let (cl, cr) = (nodes[left].cover() as f64, nodes[right].cover() as f64);
                (cl * cond_expectation(nodes, left, x, known) + cr * cond_expectation(nodes, right, x, known))
                    / cover as f64
            }
        }
    }
}

/// Shapley values by enumerating every coalition.
pub fn brute_force_shap(tree: &Tree, x: &[f64]) -> Vec<f64> {
    let m = x.len();
    assert!(m <= 16);
    let fact: Vec<f64> = (0..=m).scan(1.0, |acc, k| {
        if k > 0 {
            *acc *= k as f64;
        }
        Some(*acc)
    })
    .collect();
    let v: Vec<f64> = (0u32..1 << m).map(|s| cond_expectation(tree.nodes(), 0, x, s)).collect();
    (0..m)
        .map(|i| {
            let bit = 1u32 << i;
            (0u32..1 << m)
                .filter(|s| s & bit == 0)
                .map(|s| {
                    let size = s.count_ones() as usize;
                    let w = fact[size] * fact[m - size - 1] / fact[m];
                    w * (v[(s | bit) as usize] - v[s as usize])
                })
                .sum()
        })
        .collect()
}

// ---------------------------------------------------------------- clustering

fn d(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn members(labels: &[usize], c: usize) -> Vec<usize> {
    (0..labels.len()).filter(|&i| labels[i] == c).collect()
}

fn n_clusters(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |m| m + 1)
}

fn centroid(x: &Matrix, idx: &[usize]) -> Vec<f64> {
    let mut c = vec![0.0; x.cols()];
    for &i in idx {
        for (j, v) in x.row(i).iter().enumerate() {
            c[j] += v;
        }
    }
    c.iter().map(|v| v / idx.len() as f64).collect()
}

/// Mean over points of (b - a) / max(a, b); singletons contribute 0.
pub fn silhouette_formula(x: &Matrix, labels: &[usize]) -> f64 {
    let k = n_clusters(labels);
    let n = x.rows();
    let mut total = 0.0;
    for i in 0..n {
        let own = members(labels, labels[i]);
        if own.len() == 1 {
            continue;
        }
        let a = own.iter().filter(|&&j| j != i).map(|&j| d(x.row(i), x.row(j))).sum::<f64>() / (own.len() - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != labels[i])
            .map(|c| {
                let m = members(labels, c);
                m.iter().map(|&j| d(x.row(i), x.row(j))).sum::<f64>() / m.len() as f64
            })
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    total / n as f64
}

/// (1/k) Σᵢ maxⱼ (σᵢ + σⱼ) / d(cᵢ, cⱼ) with σ the mean distance to the centroid.
pub fn davies_bouldin_formula(x: &Matrix, labels: &[usize]) -> f64 {
    let k = n_clusters(labels);
    let cents: Vec<Vec<f64>> = (0..k).map(|c| centroid(x, &members(labels, c))).collect();
    let sigma: Vec<f64> = (0..k)
        .map(|c| {
            let m = members(labels, c);
            m.iter().map(|&i| d(x.row(i), &cents[c])).sum::<f64>() / m.len() as f64
        })
        .collect();
    (0..k)
        .map(|i| {
            (0..k)
                .filter(|&j| j != i)
                .map(|j| (sigma[i] + sigma[j]) / d(&cents[i], &cents[j]))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum::<f64>()
        / k as f64
}

/// [tr(B) / (k − 1)] / [tr(W) / (n − k)].
pub fn calinski_harabasz_formula(x: &Matrix, labels: &[usize]) -> f64 {
    let k = n_clusters(labels);
    let n = x.rows();
    let all: Vec<usize> = (0..n).collect();
    let grand = centroid(x, &all);
    let (mut b, mut w) = (0.0, 0.0);
    for c in 0..k {
        let m = members(labels, c);
        let cent = centroid(x, &m);
        b += m.len() as f64 * d(&cent, &grand).powi(2);
        w += m.iter().map(|&i| d(x.row(i), &cent).powi(2)).sum::<f64>();
    }
    (b / (k - 1) as f64) / (w / (n - k) as f64)
}

/// Smallest within-cluster sum of squares over every 2-partition.
pub fn exhaustive_two_means(x: &Matrix) -> f64 {
    let n = x.rows();
    let mut best = f64::INFINITY;
    for mask in 1u32..(1 << (n - 1)) {
        let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
        let mut sse = 0.0;
        for c in 0..2 {
            let m = members(&labels, c);
            let cent = centroid(x, &m);
            sse += m.iter().map(|&i| d(x.row(i), &cent).powi(2)).sum::<f64>();
        }
        best = best.min(sse);
    }
    best
}

/// Points spread around `k` random centres.
pub fn random_blobs(r: &mut ChaCha8Rng, n: usize, p: usize, k: usize) -> Matrix {
    let centres: Vec<Vec<f64>> = (0..k).map(|_| (0..p).map(|_| r.gen_range(-5.0..5.0)).collect()).collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| centres[i % k].iter().map(|c| c + gaussian(r)).collect())
        .collect();
    Matrix::from_rows(&rows).unwrap()
}

// ---------------------------------------------------------------- datasets

pub const STAGE1_SCHEMA: &str = r#"[
  {"name": "Glucose", "kind": "numeric", "role": "feature", "zero_is_missing": true},
  {"name": "Insulin", "kind": "numeric", "role": "feature", "zero_is_missing": true},
  {"name": "Age", "kind": "numeric", "role": "feature"},
  {"name": "Polyuria", "kind": "binary_symptom", "role": "feature"},
  {"name": "Outcome", "kind": "numeric", "role": "target"}
]"#;

pub const STAGE3_SCHEMA: &str = r#"[
  {"name": "Group", "kind": "categorical_group", "role": "group_label"},
  {"name": "GlycemicControl", "kind": "numeric", "role": "feature"},
  {"name": "CogFunc", "kind": "numeric", "role": "feature"},
  {"name": "MMSE", "kind": "numeric", "role": "feature"}
]"#;

/// Labelled cohort whose positives form a young low-insulin group and an
/// older high-insulin group. Some Insulin cells are zero (missing).
pub fn stage1_csv(n: usize, seed: u64) -> String {
    let mut r = rng(seed);
    let mut s = String::from("Glucose,Insulin,Age,Polyuria,Outcome\n");
    for i in 0..n {
        let pos = i % 3 == 0;
        let (g, ins, age) = if !pos {
            (100.0 + 12.0 * gaussian(&mut r), 90.0 + 20.0 * gaussian(&mut r), 35.0 + 8.0 * gaussian(&mut r))
        } else if i % 2 == 0 {
            (150.0 + 12.0 * gaussian(&mut r), 40.0 + 8.0 * gaussian(&mut r), 25.0 + 3.0 * gaussian(&mut r))
        } else {
            (160.0 + 12.0 * gaussian(&mut r), 200.0 + 25.0 * gaussian(&mut r), 58.0 + 4.0 * gaussian(&mut r))
        };
        let ins = if i % 17 == 5 { 0.0 } else { ins.max(5.0) };
        let poly = if r.gen_bool(if pos { 0.7 } else { 0.2 }) { "Yes" } else { "No" };
        s.push_str(&format!("{g:.1},{ins:.1},{:.0},{poly},{}\n", age.max(18.0), u8::from(pos)));
    }
    s
}

/// Three-group cohort; CogFunc tracks GlycemicControl with rank correlation
/// near `rho`, and group membership is unrelated to either.
pub fn stage3_csv(n: usize, rho: f64, seed: u64) -> String {
    let mut r = rng(seed);
    let groups = ["Nondemented", "Demented", "Converted"];
    let mut s = String::from("Group,GlycemicControl,CogFunc,MMSE\n");
    // Pearson r of the latent normals that gives Spearman rho
    let r_latent = 2.0 * (std::f64::consts::PI * rho / 6.0).sin();
    for i in 0..n {
        let a = gaussian(&mut r);
        let b = r_latent * a + (1.0 - r_latent * r_latent).sqrt() * gaussian(&mut r);
        let mmse = (27.0 + 2.5 * gaussian(&mut r)).clamp(15.0, 30.0).round();
        s.push_str(&format!("{},{:.6},{:.6},{mmse}\n", groups[i % 3], 5.5 + a, 1.0 + b));
    }
    s
}

pub struct Workspace {
    pub dir: tempfile::TempDir,
}

impl Workspace {
    pub fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn write(&self, name: &str, text: &str) -> PathBuf {
        let p = self.dir.path().join(name);
        fs::write(&p, text).unwrap();
        p
    }

    /// Config covering all three stages on small synthetic data.
    pub fn synthetic_config(&self, n1: usize, n3: usize, seed: u64) -> PathBuf {
        self.write("s1.csv", &stage1_csv(n1, seed));
        self.write("s1_schema.json", STAGE1_SCHEMA);
        self.write("s3.csv", &stage3_csv(n3, 0.3, seed));
        self.write("s3_schema.json", STAGE3_SCHEMA);
        self.write(
            "config.json",
            &format!(
                r#"{{
  "seed": {seed},
  "stage1": {{
    "data": "s1.csv", "schema": "s1_schema.json",
    "models": [
      {{"variant": "log_reg"}},
      {{"variant": "svm_rbf"}},
      {{"variant": "random_forest", "n_trees": 30}},
      {{"variant": "extra_trees", "n_trees": 30}},
      {{"variant": "grad_boost", "n_trees": 30}}
    ],
    "cv_folds": 3
  }},
  "stage2": {{"k_max": 5}},
  "stage3": {{
    "data": "s3.csv", "schema": "s3_schema.json",
    "group_test": {{"value": "GlycemicControl"}},
    "correlations": [{{"x": "GlycemicControl", "y": "CogFunc"}}],
    "normality": ["MMSE"]
  }}
}}"#
            ),
        )
    }
}
