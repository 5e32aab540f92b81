//! Similarity and prediction formulas checked against dense, direct
//! implementations written here.

mod common;

use proptest::prelude::*;

use cbcf::clustering::affinity_from_distance;
use cbcf::dataset::RatingsDataset;
use cbcf::ipu::cluster_item_average;
use cbcf::predictor::{predict_item_based, predict_user_based, Unpredictable};
use cbcf::similarity::{build_similarity_matrix, cosine_items, pcc, DistanceMatrix, SimilarityKind};

type Dense = Vec<Vec<Option<f64>>>;

fn dense(rows: &[(u64, u64, f64)], users: usize, items: usize) -> Dense {
    let mut m = vec![vec![None; items]; users];
    for &(u, i, r) in rows {
        m[u as usize - 1][i as usize - 1] = Some(r);
    }
    m
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let (mx, my) = (mean(xs), mean(ys));
    let num: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if vx < 1e-20 || vy < 1e-20 {
        return None;
    }
    Some(num / (vx.sqrt() * vy.sqrt()))
}

fn naive_pcc(m: &Dense, a: usize, b: usize) -> Option<f64> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = m[a].iter().zip(&m[b]).filter_map(|(x, y)| Some(((*x)?, (*y)?))).unzip();
    pearson(&xs, &ys)
}

fn user_mean(m: &Dense, u: usize) -> Option<f64> {
    let xs: Vec<f64> = m[u].iter().flatten().copied().collect();
    (!xs.is_empty()).then(|| mean(&xs))
}

fn naive_adjusted_cosine(m: &Dense, i: usize, j: usize) -> Option<f64> {
    let mut num = 0.0;
    let (mut ni, mut nj) = (0.0, 0.0);
    let mut n = 0;
    for u in 0..m.len() {
        if let (Some(x), Some(y)) = (m[u][i], m[u][j]) {
            let mu = user_mean(m, u).unwrap();
            num += (x - mu) * (y - mu);
            ni += (x - mu).powi(2);
            nj += (y - mu).powi(2);
            n += 1;
        }
    }
    if n < 2 || ni < 1e-20 || nj < 1e-20 {
        return None;
    }
    Some(num / (ni.sqrt() * nj.sqrt()))
}

/// The k heaviest candidates. `Err` when the cut falls between weights that
/// differ only by rounding, where the selection is not well defined.
fn top<T>(mut cands: Vec<(usize, f64, T)>, k: usize) -> Result<Vec<(usize, f64, T)>, Ambiguous> {
    cands.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    if cands.len() > k && k > 0 && (cands[k - 1].1 - cands[k].1).abs() < 1e-9 {
        return Err(Ambiguous);
    }
    cands.truncate(k);
    Ok(cands)
}

#[derive(Debug)]
struct Ambiguous;

fn naive_user_based(m: &Dense, u: usize, i: usize, k: usize) -> Result<Option<f64>, Ambiguous> {
    let Some(mu) = user_mean(m, u) else {
        return Ok(None);
    };
    let cands = (0..m.len())
        .filter(|&v| v != u)
        .filter_map(|v| {
            let r = m[v][i]?;
            let s = naive_pcc(m, u, v)?;
            Some((v, s.abs(), (s, r - user_mean(m, v).unwrap())))
        })
        .collect();
    let nb = top(cands, k)?;
    let den: f64 = nb.iter().map(|n| n.1).sum();
    if nb.is_empty() || den == 0.0 {
        return Ok(None);
    }
    let num: f64 = nb.iter().map(|n| n.2 .0 * n.2 .1).sum();
    Ok(Some((mu + num / den).clamp(1.0, 5.0)))
}

fn naive_item_based(m: &Dense, u: usize, i: usize, k: usize) -> Result<Option<f64>, Ambiguous> {
    let cands = (0..m[u].len())
        .filter(|&j| j != i)
        .filter_map(|j| {
            let r = m[u][j]?;
            let s = naive_adjusted_cosine(m, i, j)?;
            (s > 0.0).then_some((j, s, r))
        })
        .collect();
    let nb = top(cands, k)?;
    let den: f64 = nb.iter().map(|n| n.1).sum();
    if nb.is_empty() || den == 0.0 {
        return Ok(None);
    }
    Ok(Some((nb.iter().map(|n| n.1 * n.2).sum::<f64>() / den).clamp(1.0, 5.0)))
}

fn uid(d: &RatingsDataset, raw: usize) -> cbcf::dataset::UserId {
    d.user_id(raw as u64 + 1).unwrap()
}

fn iid(d: &RatingsDataset, raw: usize) -> cbcf::dataset::ItemId {
    d.item_id(raw as u64 + 1).unwrap()
}

#[test]
fn pcc_three_common_items() {
    let d = common::dataset(&[(1, 1, 4.0), (1, 2, 2.0), (1, 3, 5.0), (2, 1, 3.0), (2, 2, 5.0), (2, 3, 4.0)]);
    let s = pcc(uid(&d, 0), uid(&d, 1), &d).unwrap().unwrap();
    // deviations (1/3, -5/3, 4/3) and (-1, 1, 0)
    let expected = -2.0 / ((42.0f64 / 9.0) * 2.0).sqrt();
    assert!((s - expected).abs() < 1e-12, "{s} vs {expected}");
    assert!((s + 0.654_653_670_707_977_1).abs() < 1e-12);
}

#[test]
fn pcc_perfect_agreement_and_opposition() {
    let d = common::dataset(&[
        (1, 1, 1.0),
        (1, 2, 3.0),
        (1, 3, 5.0),
        (2, 1, 2.0),
        (2, 2, 3.0),
        (2, 3, 4.0),
        (3, 1, 5.0),
        (3, 2, 3.0),
        (3, 3, 1.0),
    ]);
    assert!((pcc(uid(&d, 0), uid(&d, 1), &d).unwrap().unwrap() - 1.0).abs() < 1e-12);
    assert!((pcc(uid(&d, 0), uid(&d, 2), &d).unwrap().unwrap() + 1.0).abs() < 1e-12);
}

#[test]
fn pcc_uses_common_item_means_only() {
    // user 1's extra item must not shift its mean
    let d = common::dataset(&[(1, 1, 2.0), (1, 2, 4.0), (1, 3, 1.0), (2, 1, 3.0), (2, 2, 5.0)]);
    assert!((pcc(uid(&d, 0), uid(&d, 1), &d).unwrap().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn adjusted_cosine_three_users() {
    let rows = [(1, 1, 5.0), (1, 2, 4.0), (1, 3, 1.0), (2, 1, 3.0), (2, 2, 4.0), (2, 3, 2.0), (3, 1, 4.0), (3, 2, 5.0)];
    let d = common::dataset(&rows);
    let m = dense(&rows, 3, 3);
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let got = cosine_items(iid(&d, i), iid(&d, j), &d).unwrap();
        let want = naive_adjusted_cosine(&m, i, j);
        match (got, want) {
            (Some(g), Some(w)) => assert!((g - w).abs() < 1e-12, "items {i},{j}: {g} vs {w}"),
            (g, w) => assert_eq!(g, w, "items {i},{j}"),
        }
    }
    // user means 10/3, 3, 4.5; item 1 vs 2 worked by hand
    let (m1, m2, m3) = (10.0 / 3.0, 3.0, 4.5);
    let a = [5.0 - m1, 3.0 - m2, 4.0 - m3];
    let b = [4.0 - m1, 4.0 - m2, 5.0 - m3];
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let hand = dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt());
    let got = cosine_items(iid(&d, 0), iid(&d, 1), &d).unwrap().unwrap();
    assert!((got - hand).abs() < 1e-12);
}

#[test]
fn user_based_four_users_k2() {
    let rows = [
        (1, 1, 5.0),
        (1, 2, 3.0),
        (1, 3, 4.0),
        (2, 1, 4.0),
        (2, 2, 2.0),
        (2, 3, 4.0),
        (2, 4, 5.0),
        (3, 1, 1.0),
        (3, 2, 5.0),
        (3, 3, 2.0),
        (3, 4, 2.0),
        (4, 1, 4.0),
        (4, 2, 3.0),
        (4, 3, 5.0),
        (4, 4, 3.0),
    ];
    let d = common::dataset(&rows);
    let m = dense(&rows, 4, 4);
    let sims = build_similarity_matrix(&d, SimilarityKind::UserPcc);
    let got = predict_user_based(uid(&d, 0), iid(&d, 3), &d, &sims, 2).unwrap();
    let want = naive_user_based(&m, 0, 3, 2).unwrap().unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");

    // by hand: neighbors with the two largest |s| among users 2, 3, 4
    let s: Vec<(usize, f64)> = (1..4).map(|v| (v, naive_pcc(&m, 0, v).unwrap())).collect();
    let mut by_weight = s.clone();
    by_weight.sort_by(|a, b| b.1.abs().partial_cmp(&a.1.abs()).unwrap());
    let nb = &by_weight[..2];
    let mu = 4.0;
    let num: f64 = nb.iter().map(|&(v, sv)| sv * (m[v][3].unwrap() - user_mean(&m, v).unwrap())).sum();
    let den: f64 = nb.iter().map(|&(_, sv)| sv.abs()).sum();
    assert!((got - (mu + num / den).clamp(1.0, 5.0)).abs() < 1e-12);
}

#[test]
fn item_based_three_by_three_k2() {
    let rows = [(1, 1, 5.0), (1, 2, 4.0), (2, 1, 4.0), (2, 2, 5.0), (2, 3, 2.0), (3, 1, 2.0), (3, 2, 1.0), (3, 3, 5.0)];
    let d = common::dataset(&rows);
    let m = dense(&rows, 3, 3);
    let sims = build_similarity_matrix(&d, SimilarityKind::ItemCosine);
    let got = predict_item_based(uid(&d, 0), iid(&d, 2), &d, &sims, 2);
    match naive_item_based(&m, 0, 2, 2).unwrap() {
        Some(w) => assert!((got.unwrap() - w).abs() < 1e-12),
        None => assert!(got.is_err()),
    }
    let got = predict_item_based(uid(&d, 2), iid(&d, 0), &d, &sims, 2);
    match naive_item_based(&m, 2, 0, 2).unwrap() {
        Some(w) => assert!((got.unwrap() - w).abs() < 1e-12),
        None => assert!(got.is_err()),
    }
}

#[test]
fn user_with_no_ratings_cannot_be_predicted() {
    let full = common::dataset(&[(1, 1, 4.0), (1, 2, 3.0), (2, 1, 5.0), (2, 2, 2.0), (3, 1, 3.0)]);
    let train = common::partition(&full, &[(1, 1, 4.0), (1, 2, 3.0), (2, 1, 5.0), (2, 2, 2.0)]);
    let sims = build_similarity_matrix(&train, SimilarityKind::UserPcc);
    assert_eq!(
        predict_user_based(full.user_id(3).unwrap(), full.item_id(2).unwrap(), &train, &sims, 50),
        Err(Unpredictable::ColdUser)
    );
}

#[test]
fn gaussian_affinity_at_distance_two() {
    let dist = DistanceMatrix::from_values(2, vec![0.0, 2.0, 2.0, 0.0]).unwrap();
    let a = affinity_from_distance(&dist, 1.0).unwrap();
    assert!((a[(0, 1)] - (-2.0f64).exp()).abs() < 1e-15);
    assert!((a[(0, 1)] - 0.1353).abs() < 1e-4);
    assert_eq!(a[(0, 0)], 0.0);
}

#[test]
fn cluster_averages_of_worked_example() {
    let ex = common::worked_example();
    let avg = cluster_item_average(&ex.train, &ex.model).unwrap();
    let i1 = ex.train.item_id(1).unwrap();
    let c0 = ex.model.cluster_of(ex.train.user_id(1).unwrap()).unwrap();
    let c1 = ex.model.cluster_of(ex.train.user_id(3).unwrap()).unwrap();
    assert!((avg.get(c0, i1).unwrap() - 14.0 / 3.0).abs() < 1e-12);
    assert!((avg.get(c1, i1).unwrap() - 10.0 / 3.0).abs() < 1e-12);
    assert_eq!(format!("{:.2}", avg.get(c0, i1).unwrap()), "4.67");
    assert_eq!(format!("{:.2}", avg.get(c1, i1).unwrap()), "3.33");
    assert_eq!(avg.count(c0, i1), 3);
}

fn small_matrix() -> impl Strategy<Value = (usize, usize, Vec<(u64, u64, f64)>)> {
    (2usize..=5, 2usize..=5).prop_flat_map(|(users, items)| {
        prop::collection::vec(prop::option::weighted(0.7, 1u8..=5), users * items).prop_map(move |cells| {
            let rows = cells
                .iter()
                .enumerate()
                .filter_map(|(k, c)| c.map(|r| ((k / items) as u64 + 1, (k % items) as u64 + 1, r as f64)))
                .collect();
            (users, items, rows)
        })
    })
}

fn same(got: Option<f64>, want: Option<f64>) -> Result<(), TestCaseError> {
    match (got, want) {
        (Some(g), Some(w)) => prop_assert!((g - w).abs() < 1e-12, "{} vs {}", g, w),
        (g, w) => prop_assert_eq!(g, w),
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 400, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn matches_dense_formulas((users, items, rows) in small_matrix(), k in 1usize..=4) {
        // every user and item present so raw ids map one to one
        let mut rows = rows;
        for u in 1..=users as u64 {
            if !rows.iter().any(|r| r.0 == u) {
                rows.push((u, 1, 3.0));
            }
        }
        for i in 1..=items as u64 {
            if !rows.iter().any(|r| r.1 == i) {
                rows.push((1, i, 3.0));
            }
        }
        rows.sort_by_key(|r| (r.0, r.1));
        rows.dedup_by_key(|r| (r.0, r.1));
        let d = common::dataset(&rows);
        let m = dense(&rows, users, items);
        let user_sims = build_similarity_matrix(&d, SimilarityKind::UserPcc);
        let item_sims = build_similarity_matrix(&d, SimilarityKind::ItemCosine);
        for a in 0..users {
            for b in 0..users {
                if a != b {
                    same(pcc(uid(&d, a), uid(&d, b), &d).unwrap(), naive_pcc(&m, a, b))?;
                    same(user_sims.get(uid(&d, a).index(), uid(&d, b).index()), naive_pcc(&m, a, b))?;
                }
            }
        }
        for i in 0..items {
            for j in 0..items {
                if i != j {
                    same(cosine_items(iid(&d, i), iid(&d, j), &d).unwrap(), naive_adjusted_cosine(&m, i, j))?;
                    same(item_sims.get(iid(&d, i).index(), iid(&d, j).index()), naive_adjusted_cosine(&m, i, j))?;
                }
            }
        }
        for u in 0..users {
            for i in 0..items {
                if let Ok(want) = naive_user_based(&m, u, i, k) {
                    same(predict_user_based(uid(&d, u), iid(&d, i), &d, &user_sims, k).ok(), want)?;
                }
                if let Ok(want) = naive_item_based(&m, u, i, k) {
                    same(predict_item_based(uid(&d, u), iid(&d, i), &d, &item_sims, k).ok(), want)?;
                }
            }
        }
    }
}
