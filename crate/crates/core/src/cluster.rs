//! K-Means (k-means++ seeding, Lloyd iterations), internal validity indices,
//! the k sweep and subtype profiling of clusters.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dist, sq_dist, Matrix};
use crate::rng::stream_rng;
use crate::scalar::Real;
use crate::stats::descriptive::median;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansParams {
    pub n_init: usize,
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this.
    pub tol: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            n_init: 10,
            max_iter: 300,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansModel<T: Real = f64> {
    pub k: usize,
    pub centroids: Matrix<T>,
    pub labels: Vec<usize>,
    pub inertia: T,
    pub iterations: usize,
    /// Inertia after every assignment step of the winning run.
    pub inertia_history: Vec<T>,
    /// Index of the restart that produced this model.
    pub init_index: usize,
}

fn distinct_rows<T: Real>(x: &Matrix<T>) -> usize {
    let mut rows: Vec<&[T]> = x.iter_rows().collect();
    let cmp = |a: &&[T], b: &&[T]| {
        a.iter()
            .zip(b.iter())
            .map(|(u, v)| u.partial_cmp(v).unwrap_or(std::cmp::Ordering::Equal))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    };
    rows.sort_by(cmp);
    rows.dedup_by(|a, b| cmp(a, b).is_eq());
    rows.len()
}

fn nearest<T: Real>(row: &[T], centroids: &Matrix<T>) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (c, cent) in centroids.iter_rows().enumerate() {
        let d = sq_dist(row, cent);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign<T: Real>(x: &Matrix<T>, centroids: &Matrix<T>) -> (Vec<usize>, Vec<T>) {
    x.iter_rows().map(|r| nearest(r, centroids)).unzip()
}

fn plus_plus<T: Real>(x: &Matrix<T>, k: usize, rng: &mut impl Rng) -> Matrix<T> {
    let n = x.rows();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = x.iter_rows().map(|r| sq_dist(r, x.row(chosen[0])).f64()).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            // never land on a zero-weight (already covered) point
            while d2[pick] == 0.0 {
                pick = (pick + n - 1) % n;
            }
            pick
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (i, r) in x.iter_rows().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, x.row(next)).f64());
        }
    }
    x.select_rows(&chosen)
}

/// Centroids as cluster means. An empty cluster takes over the point
/// farthest from its centroid among clusters that can spare one.
fn update<T: Real>(x: &Matrix<T>, labels: &mut [usize], d2: &mut [T], k: usize) -> Matrix<T> {
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let far = (0..labels.len())
            .filter(|&i| counts[labels[i]] > 1)
            .fold(None::<usize>, |best, i| match best {
                Some(b) if d2[b] >= d2[i] => Some(b),
                _ => Some(i),
            })
            .expect("k <= n leaves a donor cluster");
        counts[labels[far]] -= 1;
        labels[far] = c;
        d2[far] = T::zero();
        counts[c] = 1;
    }
    let p = x.cols();
    let mut sums = Matrix::<T>::zeros(k, p);
    for (i, r) in x.iter_rows().enumerate() {
        for (s, &v) in sums.row_mut(labels[i]).iter_mut().zip(r) {
            *s = *s + v;
        }
    }
    for c in 0..k {
        let n = T::of_usize(counts[c]);
        for s in sums.row_mut(c) {
            *s = *s / n;
        }
    }
    sums
}

fn lloyd<T: Real>(x: &Matrix<T>, k: usize, seed: u64, init: usize, params: &KMeansParams) -> KMeansModel<T> {
    let mut rng = stream_rng(seed, init as u64);
    let mut centroids = plus_plus(x, k, &mut rng);
    let (mut labels, mut d2) = assign(x, &centroids);
    let mut history = vec![d2.iter().copied().sum::<T>()];
    let tol = T::of(params.tol);
    let mut iterations = 0;
    while iterations < params.max_iter {
        iterations += 1;
        let next = update(x, &mut labels, &mut d2, k);
        let shift = centroids
            .iter_rows()
            .zip(next.iter_rows())
            .map(|(a, b)| dist(a, b))
            .fold(T::zero(), T::max);
        centroids = next;
        let (new_labels, new_d2) = assign(x, &centroids);
        history.push(new_d2.iter().copied().sum());
        let stable = new_labels == labels;
        labels = new_labels;
        d2 = new_d2;
        if stable || shift < tol {
            break;
        }
    }
    // leave centroids equal to the means of the returned labels
    centroids = update(x, &mut labels, &mut d2, k);
    let inertia = x
        .iter_rows()
        .zip(&labels)
        .map(|(r, &l)| sq_dist(r, centroids.row(l)))
        .sum::<T>();
    history.push(inertia);
    KMeansModel {
        k,
        centroids,
        labels,
        inertia,
        iterations,
        inertia_history: history,
        init_index: init,
    }
}

pub fn kmeans_fit<T: Real>(x: &Matrix<T>, k: usize, seed: u64, params: &KMeansParams) -> Result<KMeansModel<T>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if params.n_init == 0 {
        return Err(Error::Config("n_init must be at least 1".into()));
    }
    let distinct = distinct_rows(x);
    if k > distinct {
        return Err(Error::Degenerate(format!("k = {k} exceeds the {distinct} distinct points")));
    }
    let runs: Vec<KMeansModel<T>> = (0..params.n_init)
        .into_par_iter()
        .map(|i| lloyd(x, k, seed, i, params))
        .collect();
    Ok(runs
        .into_iter()
        .reduce(|best, r| if r.inertia < best.inertia { r } else { best })
        .expect("n_init >= 1"))
}

fn cluster_count(labels: &[usize], n: usize) -> Result<usize> {
    if labels.len() != n {
        return Err(Error::contract("label count differs from row count"));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut seen = vec![false; k];
    for &l in labels {
        seen[l] = true;
    }
    if let Some(empty) = seen.iter().position(|s| !s) {
        return Err(Error::Degenerate(format!("cluster {empty} is empty")));
    }
    if k < 2 {
        return Err(Error::Degenerate("validity indices need at least 2 clusters".into()));
    }
    Ok(k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SilhouetteDetail<T: Real = f64> {
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub s: Vec<T>,
}

/// Mean silhouette and its per-point terms. Singletons score 0.
pub fn silhouette<T: Real>(x: &Matrix<T>, labels: &[usize]) -> Result<(T, SilhouetteDetail<T>)> {
    let n = x.rows();
    let k = cluster_count(labels, n)?;
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    let per_point: Vec<(T, T, T)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut sums = vec![T::zero(); k];
            for j in 0..n {
                if j != i {
                    sums[labels[j]] = sums[labels[j]] + dist(x.row(i), x.row(j));
                }
            }
            let own = labels[i];
            if sizes[own] == 1 {
                return (T::zero(), T::zero(), T::zero());
            }
            let a = sums[own] / T::of_usize(sizes[own] - 1);
            let b = (0..k)
                .filter(|&c| c != own)
                .map(|c| sums[c] / T::of_usize(sizes[c]))
                .fold(T::infinity(), T::min);
            let m = a.max(b);
            let s = if m > T::zero() { (b - a) / m } else { T::zero() };
            (a, b, s)
        })
        .collect();
    let mut detail = SilhouetteDetail {
        a: Vec::with_capacity(n),
        b: Vec::with_capacity(n),
        s: Vec::with_capacity(n),
    };
    for (a, b, s) in per_point {
        detail.a.push(a);
        detail.b.push(b);
        detail.s.push(s);
    }
    let mean = detail.s.iter().copied().sum::<T>() / T::of_usize(n);
    Ok((mean, detail))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterDecomposition<T: Real = f64> {
    pub trace_between: T,
    pub trace_within: T,
    pub total: T,
    pub sizes: Vec<usize>,
    pub centroids: Matrix<T>,
    /// Mean distance of each cluster's points to its centroid.
    pub sigma: Vec<T>,
    /// k × k inter-centroid distances.
    pub centroid_distances: Matrix<T>,
}

pub fn scatter<T: Real>(x: &Matrix<T>, labels: &[usize]) -> Result<ScatterDecomposition<T>> {
    let n = x.rows();
    let k = cluster_count(labels, n)?;
    let p = x.cols();
    let mut sizes = vec![0usize; k];
    let mut centroids = Matrix::<T>::zeros(k, p);
    let mut grand = vec![T::zero(); p];
    for (r, &l) in x.iter_rows().zip(labels) {
        sizes[l] += 1;
        for j in 0..p {
            centroids.row_mut(l)[j] = centroids.row(l)[j] + r[j];
            grand[j] = grand[j] + r[j];
        }
    }
    for c in 0..k {
        let m = T::of_usize(sizes[c]);
        for v in centroids.row_mut(c) {
            *v = *v / m;
        }
    }
    for g in &mut grand {
        *g = *g / T::of_usize(n);
    }
    let mut within = T::zero();
    let mut total = T::zero();
    let mut sigma = vec![T::zero(); k];
    for (r, &l) in x.iter_rows().zip(labels) {
        let d2 = sq_dist(r, centroids.row(l));
        within = within + d2;
        sigma[l] = sigma[l] + d2.sqrt();
        total = total + sq_dist(r, &grand);
    }
    for c in 0..k {
        sigma[c] = sigma[c] / T::of_usize(sizes[c]);
    }
    let between = (0..k)
        .map(|c| T::of_usize(sizes[c]) * sq_dist(centroids.row(c), &grand))
        .sum::<T>();
    let mut cd = Matrix::<T>::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            cd.set(i, j, dist(centroids.row(i), centroids.row(j)));
        }
    }
    Ok(ScatterDecomposition {
        trace_between: between,
        trace_within: within,
        total,
        sizes,
        centroids,
        sigma,
        centroid_distances: cd,
    })
}

pub fn davies_bouldin_from<T: Real>(sc: &ScatterDecomposition<T>) -> Result<T> {
    let k = sc.sizes.len();
    let mut total = T::zero();
    for i in 0..k {
        let mut worst = T::zero();
        for j in 0..k {
            if i == j {
                continue;
            }
            let d = sc.centroid_distances.get(i, j);
            if d == T::zero() {
                return Err(Error::Degenerate(format!("clusters {i} and {j} have coincident centroids")));
            }
            worst = worst.max((sc.sigma[i] + sc.sigma[j]) / d);
        }
        total = total + worst;
    }
    Ok(total / T::of_usize(k))
}

pub fn davies_bouldin<T: Real>(x: &Matrix<T>, labels: &[usize]) -> Result<T> {
    davies_bouldin_from(&scatter(x, labels)?)
}

/// Calinski-Harabasz score; `(T::max_value(), true)` when the within-cluster
/// scatter is zero.
pub fn calinski_harabasz_from<T: Real>(sc: &ScatterDecomposition<T>, n: usize) -> Result<(T, bool)> {
    let k = sc.sizes.len();
    if n <= k {
        return Err(Error::Degenerate(format!("Calinski-Harabasz needs n > k (n = {n}, k = {k})")));
    }
    if sc.trace_within == T::zero() {
        return Ok((T::max_value(), true));
    }
    let num = sc.trace_between / T::of_usize(k - 1);
    let den = sc.trace_within / T::of_usize(n - k);
    Ok((num / den, false))
}

pub fn calinski_harabasz<T: Real>(x: &Matrix<T>, labels: &[usize]) -> Result<(T, bool)> {
    calinski_harabasz_from(&scatter(x, labels)?, x.rows())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidityIndices<T: Real = f64> {
    pub silhouette: T,
    pub davies_bouldin: T,
    pub calinski_harabasz: T,
    /// CH hit the zero-within-scatter sentinel.
    pub ch_degenerate: bool,
}

pub fn validity_indices<T: Real>(x: &Matrix<T>, labels: &[usize]) -> Result<ValidityIndices<T>> {
    let (s, _) = silhouette(x, labels)?;
    let sc = scatter(x, labels)?;
    let (ch, flag) = calinski_harabasz_from(&sc, x.rows())?;
    Ok(ValidityIndices {
        silhouette: s,
        davies_bouldin: davies_bouldin_from(&sc)?,
        calinski_harabasz: ch,
        ch_degenerate: flag,
    })
}

pub const DEFAULT_MARGIN: f64 = 0.005;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSweepEntry<T: Real = f64> {
    pub k: usize,
    pub indices: ValidityIndices<T>,
    pub inertia: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSweepResult<T: Real = f64> {
    pub entries: Vec<KSweepEntry<T>>,
    pub margin: f64,
    pub selected_k: usize,
    pub best_silhouette_k: usize,
    pub best_db_k: usize,
    pub best_ch_k: usize,
    pub db_agrees: bool,
    pub ch_agrees: bool,
    pub rationale: String,
}

/// Smallest k whose silhouette is within `margin` of the best one.
pub fn select_k(silhouettes: &[(usize, f64)], margin: f64) -> Option<(usize, usize)> {
    let (best_k, best) = silhouettes
        .iter()
        .copied()
        .fold(None::<(usize, f64)>, |acc, (k, s)| match acc {
            Some((_, b)) if b >= s => acc,
            _ => Some((k, s)),
        })?;
    let chosen = silhouettes
        .iter()
        .filter(|(_, s)| *s >= best - margin)
        .map(|(k, _)| *k)
        .min()?;
    Some((chosen, best_k))
}

pub fn sweep_k<T: Real>(
    x: &Matrix<T>,
    ks: RangeInclusive<usize>,
    seed: u64,
    params: &KMeansParams,
    margin: f64,
) -> Result<(KSweepResult<T>, Vec<KMeansModel<T>>)> {
    if ks.is_empty() || *ks.start() < 2 {
        return Err(Error::Config(format!("k range {ks:?} must start at 2 or more")));
    }
    let mut entries = Vec::new();
    let mut models = Vec::new();
    for k in ks {
        let model = kmeans_fit(x, k, seed, params)?;
        entries.push(KSweepEntry {
            k,
            indices: validity_indices(x, &model.labels)?,
            inertia: model.inertia,
        });
        models.push(model);
    }
    let sil: Vec<(usize, f64)> = entries.iter().map(|e| (e.k, e.indices.silhouette.f64())).collect();
    let (selected_k, best_silhouette_k) = select_k(&sil, margin).expect("non-empty sweep");
    let arg = |better: fn(f64, f64) -> bool, f: fn(&ValidityIndices<T>) -> T| {
        entries
            .iter()
            .fold(None::<(usize, f64)>, |acc, e| {
                let v = f(&e.indices).f64();
                match acc {
                    Some((_, b)) if !better(v, b) => acc,
                    _ => Some((e.k, v)),
                }
            })
            .expect("non-empty sweep")
            .0
    };
    let best_db_k = arg(|v, b| v < b, |i| i.davies_bouldin);
    let best_ch_k = arg(|v, b| v > b, |i| i.calinski_harabasz);
    let rationale = if selected_k == best_silhouette_k {
        format!("k = {selected_k} maximises the silhouette")
    } else {
        format!(
            "k = {selected_k} is the smallest k within {margin} of the best silhouette (k = {best_silhouette_k})"
        )
    };
    Ok((
        KSweepResult {
            entries,
            margin,
            selected_k,
            best_silhouette_k,
            best_db_k,
            best_ch_k,
            db_agrees: best_db_k == selected_k,
            ch_agrees: best_ch_k == selected_k,
            rationale,
        },
        models,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// Lower-insulin, younger cluster vs the rest.
    Subtypes { t1dm_like: usize, t2dm_like: usize },
    /// Insulin and age point in different directions.
    Ambiguous,
    Indistinguishable,
    SingleCluster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster: usize,
    pub size: usize,
    pub medians: BTreeMap<String, f64>,
    pub subtype: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterProfile {
    pub clusters: Vec<ClusterSummary>,
    pub orientation: Orientation,
    pub note: String,
}

/// Per-cluster medians in original units plus an insulin/age orientation.
/// `x` columns follow `names`; `insulin` and `age` must be among them.
pub fn profile_clusters(x: &Matrix, names: &[String], labels: &[usize], insulin: &str, age: &str) -> Result<ClusterProfile> {
    if labels.len() != x.rows() || names.len() != x.cols() {
        return Err(Error::contract("profile inputs disagree in shape"));
    }
    let col = |name: &str| {
        names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Schema {
                column: name.to_string(),
                reason: "profiling feature not among clustering features".into(),
            })
    };
    let (ji, ja) = (col(insulin)?, col(age)?);
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut clusters: Vec<ClusterSummary> = (0..k)
        .map(|c| {
            let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            let medians = names
                .iter()
                .enumerate()
                .filter(|_| !rows.is_empty())
                .map(|(j, n)| (n.clone(), median(&rows.iter().map(|&i| x.get(i, j)).collect::<Vec<_>>())))
                .collect();
            ClusterSummary {
                cluster: c,
                size: rows.len(),
                medians,
                subtype: None,
            }
        })
        .filter(|c| c.size > 0)
        .collect();
    let orientation = if clusters.len() < 2 {
        Orientation::SingleCluster
    } else {
        let med = |c: &ClusterSummary, j: usize| c.medians[&names[j]];
        let lo = clusters
            .iter()
            .min_by(|a, b| med(a, ji).total_cmp(&med(b, ji)).then(med(a, ja).total_cmp(&med(b, ja))))
            .expect("two clusters");
        let hi = clusters
            .iter()
            .max_by(|a, b| med(a, ji).total_cmp(&med(b, ji)).then(med(a, ja).total_cmp(&med(b, ja))))
            .expect("two clusters");
        let (di, da) = (med(hi, ji) - med(lo, ji), med(hi, ja) - med(lo, ja));
        if di == 0.0 && da == 0.0 {
            Orientation::Indistinguishable
        } else if di > 0.0 && da > 0.0 {
            Orientation::Subtypes {
                t1dm_like: lo.cluster,
                t2dm_like: hi.cluster,
            }
        } else {
            Orientation::Ambiguous
        }
    };
    if let Orientation::Subtypes { t1dm_like, t2dm_like } = orientation {
        for c in &mut clusters {
            if c.cluster == t1dm_like {
                c.subtype = Some("T1DM-like".into());
            } else if c.cluster == t2dm_like {
                c.subtype = Some("T2DM-like".into());
            }
        }
    }
    let note = match orientation {
        Orientation::Subtypes { t1dm_like, t2dm_like } => format!(
            "inferential: cluster {t1dm_like} has lower median {insulin} and {age} (T1DM-like); \
             cluster {t2dm_like} is higher on both (T2DM-like)"
        ),
        Orientation::Ambiguous => format!("inferential: {insulin} and {age} medians order the clusters differently"),
        Orientation::Indistinguishable => format!("inferential: clusters are indistinguishable on {insulin} and {age}"),
        Orientation::SingleCluster => "inferential: a single cluster, no subtype contrast".into(),
    };
    Ok(ClusterProfile {
        clusters,
        orientation,
        note,
    })
}
