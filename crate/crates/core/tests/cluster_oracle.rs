mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use tristage::cluster::{calinski_harabasz, davies_bouldin, kmeans_fit, silhouette, sweep_k, KMeansParams};
use tristage::Matrix;

fn check_indices(x: &Matrix, labels: &[usize]) {
    let (s, _) = silhouette(x, labels).unwrap();
    assert!((s - silhouette_formula(x, labels)).abs() < 1e-10);
    let db = davies_bouldin(x, labels).unwrap();
    assert!((db - davies_bouldin_formula(x, labels)).abs() < 1e-10);
    let (ch, degenerate) = calinski_harabasz(x, labels).unwrap();
    assert!(!degenerate);
    let want = calinski_harabasz_formula(x, labels);
    assert!((ch - want).abs() < 1e-10 * want.abs().max(1.0));
}

#[test]
fn indices_match_formulas_on_random_data() {
    let mut r = rng(21);
    for _ in 0..100 {
        let k = r.gen_range(2..=4);
        let n = r.gen_range(3 * k..=30);
        let p = r.gen_range(1..=4);
        let x = random_blobs(&mut r, n, p, k);
        let m = kmeans_fit(&x, k, r.gen(), &KMeansParams::default()).unwrap();
        check_indices(&x, &m.labels);
    }
}

#[test]
fn inertia_history_never_increases() {
    let mut r = rng(5);
    for _ in 0..50 {
        let k = r.gen_range(2..=6);
        let blobs = r.gen_range(1..=5);
        let x = random_blobs(&mut r, 60, 3, blobs);
        let m = kmeans_fit(&x, k, r.gen(), &KMeansParams { n_init: 3, ..Default::default() }).unwrap();
        for w in m.inertia_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", m.inertia_history);
        }
    }
}

#[test]
fn six_points_reach_the_exhaustive_optimum() {
    let mut r = rng(8);
    for _ in 0..20 {
        let rows: Vec<Vec<f64>> = (0..6).map(|_| vec![r.gen_range(0.0..10.0), r.gen_range(0.0..10.0)]).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let m = kmeans_fit(&x, 2, 1, &KMeansParams::default()).unwrap();
        assert!((m.inertia - exhaustive_two_means(&x)).abs() < 1e-9);
    }
}

#[test]
fn sweep_prefers_two_for_two_blobs() {
    let mut r = rng(2);
    let rows: Vec<Vec<f64>> = (0..80)
        .map(|i| {
            let c = if i % 2 == 0 { -4.0 } else { 4.0 };
            vec![c + 0.5 * gaussian(&mut r), c + 0.5 * gaussian(&mut r)]
        })
        .collect();
    let x = Matrix::from_rows(&rows).unwrap();
    let (sweep, models) = sweep_k(&x, 2..=8, 3, &KMeansParams::default(), 0.005).unwrap();
    assert_eq!(sweep.entries.len(), 7);
    assert_eq!(sweep.selected_k, 2);
    assert_eq!(models.len(), 7);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn indices_are_label_permutation_invariant(seed in 0u64..1000, shift in 1usize..3) {
        let mut r = rng(seed);
        let x = random_blobs(&mut r, 24, 2, 3);
        let labels: Vec<usize> = (0..24).map(|i| i % 3).collect();
        let permuted: Vec<usize> = labels.iter().map(|l| (l + shift) % 3).collect();
        let (a, _) = silhouette(&x, &labels).unwrap();
        let (b, _) = silhouette(&x, &permuted).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        let (a, b) = (davies_bouldin(&x, &labels).unwrap(), davies_bouldin(&x, &permuted).unwrap());
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn silhouette_is_bounded(seed in 0u64..1000) {
        let mut r = rng(seed);
        let x = random_blobs(&mut r, 20, 3, 2);
        let m = kmeans_fit(&x, 3, seed, &KMeansParams::default()).unwrap();
        let (s, detail) = silhouette(&x, &m.labels).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!(detail.s.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
