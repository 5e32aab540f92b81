mod common;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cbcf::clustering::{
    affinity_from_distance, cluster_validity, fcm_cluster_traced, kmeans, median_distance, normalized_laplacian,
    spectral_cluster, spectral_embedding, ClusterMethod, ClusterModel, FcmConfig, SpectralConfig,
};
use cbcf::similarity::DistanceMatrix;

fn two_blocks(n: usize, half: usize, seed: u64) -> DistanceMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = vec![0.0; n * n];
    for a in 0..n {
        for b in (a + 1)..n {
            let d = if (a < half) == (b < half) { rng.gen_range(0.1..0.6) } else { rng.gen_range(1.2..1.9) };
            v[a * n + b] = d;
            v[b * n + a] = d;
        }
    }
    DistanceMatrix::from_values(n, v).unwrap()
}

/// Minimum normalized cut over all bipartitions, walked in Gray-code order
/// so each step moves one vertex.
fn brute_force_ncut(a: &DMatrix<f64>) -> Vec<bool> {
    let n = a.nrows();
    let deg: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
    let total: f64 = deg.iter().sum();
    let mut side = vec![false; n];
    let (mut cut, mut vol) = (0.0, 0.0);
    let mut best = (f64::INFINITY, side.clone());
    // vertex 0 stays on the `false` side to skip mirror images
    for step in 1u64..(1 << (n - 1)) {
        let v = step.trailing_zeros() as usize + 1;
        let to = !side[v];
        for u in 0..n {
            if u != v {
                let w = a[(v, u)];
                if side[u] == to {
                    cut -= w;
                } else {
                    cut += w;
                }
            }
        }
        vol += if to { deg[v] } else { -deg[v] };
        side[v] = to;
        if vol > 0.0 && vol < total {
            let ncut = cut / vol + cut / (total - vol);
            if ncut < best.0 {
                best = (ncut, side.clone());
            }
        }
    }
    best.1
}

#[test]
fn spectral_matches_brute_force_normalized_cut() {
    for seed in 0..3 {
        let n = 20;
        let dist = two_blocks(n, 9 + seed as usize, seed);
        let sigma = median_distance(&dist);
        let aff = affinity_from_distance(&dist, sigma).unwrap();
        let best = brute_force_ncut(&aff);
        let model = spectral_cluster(&dist, &SpectralConfig { c: 2, seed, ..Default::default() }).unwrap();
        let a = model.assignment();
        for u in 0..n {
            assert_eq!(a[u] != a[0], best[u], "seed {seed}, user {u}");
        }
    }
}

#[test]
fn laplacian_spectrum_in_unit_interval_times_two() {
    let data = common::synthetic(40, 30, 0.4, 3);
    let sims = cbcf::similarity::build_similarity_matrix(&data, cbcf::similarity::SimilarityKind::UserPcc);
    let dist = DistanceMatrix::from_similarity(&sims).unwrap();
    let aff = affinity_from_distance(&dist, median_distance(&dist)).unwrap();
    let lap = normalized_laplacian(&aff);
    assert_eq!(lap, lap.transpose());
    let eig = SymmetricEigen::new(lap);
    for v in eig.eigenvalues.iter() {
        assert!((-1e-8..=2.0 + 1e-8).contains(v), "eigenvalue {v}");
    }
    let emb = spectral_embedding(&dist, &SpectralConfig { c: 3, ..Default::default() }).unwrap();
    assert!(emb.eigenvalues[0].abs() < 1e-8);
    assert!(emb.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
    for r in emb.rows.row_iter() {
        assert!((r.norm() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn as_many_clusters_as_users_gives_singletons() {
    let dist = two_blocks(6, 3, 4);
    let model = spectral_cluster(&dist, &SpectralConfig { c: 6, ..Default::default() }).unwrap();
    let mut sizes = model.sizes();
    sizes.sort();
    assert_eq!(sizes, vec![1; 6]);
    let v = cluster_validity(&dist, &model).unwrap();
    assert!(v.clusters.iter().all(|c| c.singleton && c.mean_intra == Some(0.0)));
}

#[test]
fn more_clusters_than_users_is_rejected() {
    let dist = two_blocks(3, 1, 0);
    let err = spectral_cluster(&dist, &SpectralConfig { c: 4, ..Default::default() }).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn labels_follow_first_appearance() {
    let dist = two_blocks(12, 6, 8);
    // put the second block first in user order
    let order: Vec<usize> = (6..12).chain(0..6).collect();
    let dist = dist.submatrix(&order);
    let model = spectral_cluster(&dist, &SpectralConfig { c: 2, ..Default::default() }).unwrap();
    assert_eq!(model.assignment()[0], 0);
    assert!(model.assignment()[6..].iter().all(|&a| a == 1));
}

#[test]
fn fcm_on_a_line() {
    let xs = [0.0, 0.1, 0.2, 0.3, 0.5, 5.0, 5.2, 5.3, 5.5, 6.0];
    let features = DMatrix::from_column_slice(xs.len(), 1, &xs);
    for seed in 0..5 {
        let (model, trace) = fcm_cluster_traced(&features, &FcmConfig { c: 2, seed, ..Default::default() }).unwrap();
        for w in trace.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-10, "objective rose {} -> {}", w[0], w[1]);
        }
        assert!(trace.converged);
        let w = model.memberships().unwrap();
        for r in w.row_iter() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
            assert!(r.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        let a = model.assignment();
        assert!(a[..5].iter().all(|&k| k == a[0]));
        assert!(a[5..].iter().all(|&k| k != a[0]));
    }
}

#[test]
fn fcm_point_on_a_centroid_takes_full_membership() {
    // two identical pairs of points: once centroids land on them the
    // memberships must stay finite
    let features = DMatrix::from_column_slice(4, 1, &[1.0, 1.0, 9.0, 9.0]);
    let (model, _) = fcm_cluster_traced(&features, &FcmConfig { c: 2, ..Default::default() }).unwrap();
    let w = model.memberships().unwrap();
    assert!(w.iter().all(|x| x.is_finite()));
    assert_eq!(model.assignment()[0], model.assignment()[1]);
    assert_ne!(model.assignment()[0], model.assignment()[2]);
}

#[test]
fn kmeans_is_seed_deterministic() {
    let pts = DMatrix::from_fn(30, 2, |i, j| ((i * 7 + j * 3) % 11) as f64);
    let a = kmeans(&pts, 3, 5, 100, 42);
    let b = kmeans(&pts, 3, 5, 100, 42);
    assert_eq!(a.assignment, b.assignment);
}

#[test]
fn validity_of_blocks() {
    let dist = two_blocks(10, 5, 1);
    let model =
        ClusterModel::new(ClusterMethod::Spectral, 3, (0..10).map(|u| usize::from(u >= 5)).collect(), None).unwrap();
    let v = cluster_validity(&dist, &model).unwrap();
    assert_eq!(v.empty_clusters, vec![2]);
    assert_eq!(v.cohesive_clusters, 2);
    for c in &v.clusters[..2] {
        assert!(c.mean_intra.unwrap() < c.mean_inter.unwrap());
        assert!(!c.singleton);
    }
    assert_eq!(v.clusters[2].mean_intra, None);
    assert_eq!(v.inter[0][1], v.inter[1][0]);
}
