#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cbcf::clustering::{ClusterMethod, ClusterModel};
use cbcf::dataset::{Rating, RatingsDataset};
use cbcf::predictor::{PredictionMethod, PredictionSet};

/// MovieLens 100K location: `$CBCF_ML100K` or `data/ml-100k/u.data` at the
/// workspace root.
pub fn movielens_path() -> Option<PathBuf> {
    if let Ok(p) = std::env::var("CBCF_ML100K") {
        let p = PathBuf::from(p);
        return p.is_file().then_some(p);
    }
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/ml-100k/u.data");
    p.is_file().then_some(p)
}

pub fn dataset(rows: &[(u64, u64, f64)]) -> RatingsDataset {
    RatingsDataset::from_raw(rows.iter().map(|&(u, i, r)| (u, i, r, None))).unwrap()
}

/// Random integer-star ratings, each cell present with probability
/// `density`; users fall into two taste groups so that similarities and
/// clusters carry signal.
pub fn synthetic(users: u64, items: u64, density: f64, seed: u64) -> RatingsDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for u in 1..=users {
        let group = u % 2;
        for i in 1..=items {
            if !rng.gen_bool(density) {
                continue;
            }
            let likes = (i % 2) == group;
            let base: i32 = if likes { 4 } else { 2 };
            let r = (base + rng.gen_range(-1..=1)).clamp(1, 5);
            rows.push((u, i, r as f64, None));
        }
    }
    RatingsDataset::from_raw(rows).unwrap()
}

/// Builds a partition of `full` from raw `(user, item, rating)` rows,
/// sharing `full`'s id space.
pub fn partition(full: &RatingsDataset, rows: &[(u64, u64, f64)]) -> RatingsDataset {
    let ratings = rows
        .iter()
        .map(|&(u, i, r)| Rating {
            user: full.user_id(u).unwrap(),
            item: full.item_id(i).unwrap(),
            value: r,
            timestamp: None,
        })
        .collect();
    RatingsDataset::with_index(Arc::clone(full.user_index()), Arc::clone(full.item_index()), ratings).unwrap()
}

/// The four-cluster worked example: training ratings that fix the cluster
/// averages, and eight test pairs with given predictions and truths.
pub struct WorkedExample {
    pub train: RatingsDataset,
    pub test: RatingsDataset,
    pub preds: PredictionSet,
    pub model: ClusterModel,
}

pub const WORKED_CLUSTERS: [&[u64]; 4] = [&[1, 2, 6, 17], &[3, 4, 5, 7], &[19, 20, 21, 22, 23], &[8, 9, 28, 29, 30]];

/// (user, item, rating) used to compute cluster-item averages.
pub const WORKED_TRAIN: &[(u64, u64, f64)] = &[
    (1, 1, 5.0),
    (2, 1, 5.0),
    (6, 1, 4.0),
    (1, 2, 5.0),
    (2, 2, 4.0),
    (3, 1, 4.0),
    (5, 1, 3.0),
    (7, 1, 3.0),
    (3, 2, 2.0),
    (5, 2, 2.0),
    (20, 1, 5.0),
    (21, 1, 4.0),
    (22, 1, 4.0),
    (20, 2, 2.0),
    (21, 2, 2.0),
    (22, 2, 3.0),
    (28, 1, 2.0),
    (30, 1, 2.0),
    (28, 2, 4.0),
    (30, 2, 3.0),
];

/// (user, item, predicted, actual).
pub const WORKED_TEST: &[(u64, u64, f64, f64)] = &[
    (4, 1, 4.6, 5.0),
    (17, 1, 3.9, 4.0),
    (23, 1, 3.2, 4.0),
    (8, 1, 3.0, 2.0),
    (6, 2, 4.6, 3.0),
    (8, 2, 4.7, 5.0),
    (9, 2, 3.0, 2.0),
    (29, 2, 3.8, 4.0),
];

pub fn worked_example() -> WorkedExample {
    let mut all: Vec<(u64, u64, f64, Option<i64>)> = WORKED_TRAIN.iter().map(|&(u, i, r)| (u, i, r, None)).collect();
    all.extend(WORKED_TEST.iter().map(|&(u, i, _, r)| (u, i, r, None)));
    // users that only appear in the cluster table still need an index slot
    let full = RatingsDataset::from_raw(all).unwrap();
    let train = partition(&full, WORKED_TRAIN);
    let test_rows: Vec<_> = WORKED_TEST.iter().map(|&(u, i, _, r)| (u, i, r)).collect();
    let test = partition(&full, &test_rows);

    let mut preds = PredictionSet::new(PredictionMethod::ItemBased, 50);
    for &(u, i, p, _) in WORKED_TEST {
        preds.entries.insert((full.user_id(u).unwrap(), full.item_id(i).unwrap()), p);
    }

    let mut assignment = vec![usize::MAX; full.user_capacity()];
    for (c, members) in WORKED_CLUSTERS.iter().enumerate() {
        for &u in *members {
            if let Ok(id) = full.user_id(u) {
                assignment[id.index()] = c;
            }
        }
    }
    assert!(assignment.iter().all(|&a| a != usize::MAX), "every indexed user is clustered");
    let model = ClusterModel::new(ClusterMethod::Spectral, 4, assignment, None).unwrap();
    WorkedExample { train, test, preds, model }
}
