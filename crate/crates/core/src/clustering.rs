//! User clustering over shifted-PCC distances: spectral clustering on a
//! Gaussian affinity graph and fuzzy C-means on distance-row features.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{RatingsDataset, UserId};
use crate::error::{Error, Result};
use crate::similarity::DistanceMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMethod {
    Spectral,
    Fcm,
}

/// Hard assignment of every user to one of `c` clusters, plus fuzzy
/// memberships when produced by FCM.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    method: ClusterMethod,
    c: usize,
    assignment: Vec<usize>,
    memberships: Option<DMatrix<f64>>,
}

impl ClusterModel {
    pub fn new(
        method: ClusterMethod,
        c: usize,
        assignment: Vec<usize>,
        memberships: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        if c == 0 {
            return Err(Error::Config("cluster count must be positive".into()));
        }
        if let Some(bad) = assignment.iter().find(|&&a| a >= c) {
            return Err(Error::Validation(format!("cluster id {bad} outside 0..{c}")));
        }
        if let Some(w) = &memberships {
            if w.nrows() != assignment.len() || w.ncols() != c {
                return Err(Error::Validation("membership matrix shape does not match assignment".into()));
            }
        }
        Ok(ClusterModel { method, c, assignment, memberships })
    }

    pub fn method(&self) -> ClusterMethod {
        self.method
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn cluster_of(&self, user: UserId) -> Option<usize> {
        self.assignment.get(user.index()).copied()
    }

    pub fn memberships(&self) -> Option<&DMatrix<f64>> {
        self.memberships.as_ref()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.c];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }

    pub fn empty_clusters(&self) -> Vec<usize> {
        self.sizes().iter().enumerate().filter(|(_, &s)| s == 0).map(|(c, _)| c).collect()
    }

    /// Renames cluster ids through `perm` (old id → new id).
    pub fn relabel(&self, perm: &[usize]) -> Result<ClusterModel> {
        let mut seen = vec![false; self.c];
        if perm.len() != self.c || perm.iter().any(|&p| p >= self.c || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Validation("relabeling is not a permutation".into()));
        }
        let memberships = self.memberships.as_ref().map(|w| {
            let mut out = DMatrix::zeros(w.nrows(), w.ncols());
            for (old, &new) in perm.iter().enumerate() {
                out.set_column(new, &w.column(old));
            }
            out
        });
        ClusterModel::new(self.method, self.c, self.assignment.iter().map(|&a| perm[a]).collect(), memberships)
    }

    /// Numbers clusters by first appearance in user order; empty clusters
    /// take the remaining ids in their original order.
    fn canonical(self) -> Result<ClusterModel> {
        let mut perm = vec![usize::MAX; self.c];
        let mut next = 0;
        for &a in &self.assignment {
            if perm[a] == usize::MAX {
                perm[a] = next;
                next += 1;
            }
        }
        for p in perm.iter_mut().filter(|p| **p == usize::MAX) {
            *p = next;
            next += 1;
        }
        self.relabel(&perm)
    }

    /// CSV `user,cluster[,membership_0..]` with raw user ids.
    pub fn write_csv(&self, path: &Path, dataset: &RatingsDataset) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["user".to_string(), "cluster".to_string()];
        if self.memberships.is_some() {
            header.extend((0..self.c).map(|j| format!("membership_{j}")));
        }
        w.write_record(&header)?;
        for (u, &a) in self.assignment.iter().enumerate() {
            let mut rec = vec![dataset.raw_user(UserId(u as u32)).to_string(), a.to_string()];
            if let Some(m) = &self.memberships {
                rec.extend((0..self.c).map(|j| m[(u, j)].to_string()));
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, dataset: &RatingsDataset, method: ClusterMethod, c: usize) -> Result<ClusterModel> {
        let mut r = csv::Reader::from_path(path)?;
        let n = dataset.user_capacity();
        let mut assignment = vec![usize::MAX; n];
        let has_memberships = r.headers()?.len() > 2;
        let mut memberships = has_memberships.then(|| DMatrix::zeros(n, c));
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| Error::Parse { line: line + 2, message: format!("invalid {what}") };
            let raw: u64 = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| bad("user"))?;
            let u = dataset.user_id(raw)?.index();
            assignment[u] = rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| bad("cluster"))?;
            if let Some(m) = memberships.as_mut() {
                for j in 0..c {
                    m[(u, j)] = rec.get(2 + j).and_then(|s| s.parse().ok()).ok_or_else(|| bad("membership"))?;
                }
            }
        }
        if assignment.contains(&usize::MAX) {
            return Err(Error::Validation("cluster file does not cover every user".into()));
        }
        ClusterModel::new(method, c, assignment, memberships)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralConfig {
    pub c: usize,
    /// Gaussian width; `None` selects the median pairwise distance.
    pub sigma: Option<f64>,
    pub kmeans_restarts: usize,
    pub kmeans_max_iters: usize,
    pub seed: u64,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        SpectralConfig { c: 10, sigma: None, kmeans_restarts: 10, kmeans_max_iters: 300, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcmConfig {
    pub c: usize,
    pub fuzzy_degree: f64,
    pub epsilon: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for FcmConfig {
    fn default() -> Self {
        FcmConfig { c: 10, fuzzy_degree: 2.0, epsilon: 1e-4, max_iters: 1000, seed: 0 }
    }
}

/// Median of the strictly-upper-triangle distances, 1.0 if that is zero or
/// the matrix has fewer than two points.
pub fn median_distance(dist: &DistanceMatrix) -> f64 {
    let n = dist.len();
    let mut vals: Vec<f64> =
        (0..n).flat_map(|a| ((a + 1)..n).map(move |b| (a, b))).map(|(a, b)| dist.get(a, b)).collect();
    if vals.is_empty() {
        return 1.0;
    }
    vals.sort_by(f64::total_cmp);
    let m = vals.len();
    let med = if m % 2 == 1 { vals[m / 2] } else { 0.5 * (vals[m / 2 - 1] + vals[m / 2]) };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// `A[a][b] = exp(−d²/(2σ²))` off the diagonal, zero on it.
pub fn affinity_from_distance(dist: &DistanceMatrix, sigma: f64) -> Result<DMatrix<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    let n = dist.len();
    let denom = 2.0 * sigma * sigma;
    Ok(DMatrix::from_fn(n, n, |a, b| {
        if a == b {
            0.0
        } else {
            let d = dist.get(a, b);
            (-(d * d) / denom).exp()
        }
    }))
}

/// `L = I − D^{-1/2} A D^{-1/2}`; isolated vertices get a zero scaling.
pub fn normalized_laplacian(affinity: &DMatrix<f64>) -> DMatrix<f64> {
    let n = affinity.nrows();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|a| {
            let d: f64 = affinity.row(a).iter().sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    DMatrix::from_fn(n, n, |a, b| {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let off = affinity[(lo, hi)] * (inv_sqrt[lo] * inv_sqrt[hi]);
        if a == b {
            1.0 - off
        } else {
            -off
        }
    })
}

#[derive(Debug, Clone)]
pub struct SpectralEmbedding {
    /// n × c, rows normalized to unit length.
    pub rows: DMatrix<f64>,
    /// The c smallest Laplacian eigenvalues, ascending.
    pub eigenvalues: Vec<f64>,
    pub sigma: f64,
}

pub fn spectral_embedding(dist: &DistanceMatrix, cfg: &SpectralConfig) -> Result<SpectralEmbedding> {
    let n = dist.len();
    if cfg.c == 0 || n < cfg.c {
        return Err(Error::Config(format!("need at least c = {} users, have {n}", cfg.c)));
    }
    let sigma = cfg.sigma.unwrap_or_else(|| median_distance(dist));
    let affinity = affinity_from_distance(dist, sigma)?;
    let lap = normalized_laplacian(&affinity);
    let eig = SymmetricEigen::try_new(lap, f64::EPSILON, 100_000).ok_or_else(|| {
        Error::Numerical(format!("symmetric eigensolver did not converge (n = {n}, sigma = {sigma})"))
    })?;
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite Laplacian eigenvalue".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    order.truncate(cfg.c);
    let mut rows = DMatrix::zeros(n, cfg.c);
    for (j, &col) in order.iter().enumerate() {
        let v = eig.eigenvectors.column(col);
        // Fix the sign so the output does not depend on solver internals.
        let pivot = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for a in 0..n {
            rows[(a, j)] = sign * v[a];
        }
    }
    for mut r in rows.row_iter_mut() {
        let norm = r.norm();
        if norm > 0.0 {
            r /= norm;
        }
    }
    Ok(SpectralEmbedding { rows, eigenvalues: order.iter().map(|&i| eig.eigenvalues[i]).collect(), sigma })
}

/// Spectral clustering of users from their distance matrix.
pub fn spectral_cluster(dist: &DistanceMatrix, cfg: &SpectralConfig) -> Result<ClusterModel> {
    let emb = spectral_embedding(dist, cfg)?;
    let km = kmeans(&emb.rows, cfg.c, cfg.kmeans_restarts.max(1), cfg.kmeans_max_iters, cfg.seed);
    ClusterModel::new(ClusterMethod::Spectral, cfg.c, km.assignment, None)?.canonical()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignment: Vec<usize>,
    pub centroids: DMatrix<f64>,
    pub inertia: f64,
}

fn sq_dist(points: &DMatrix<f64>, i: usize, centroids: &DMatrix<f64>, j: usize) -> f64 {
    (0..points.ncols()).map(|d| (points[(i, d)] - centroids[(j, d)]).powi(2)).sum()
}

fn kmeans_plus_plus(points: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = points.nrows();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.gen_range(0..n));
    let mut best = vec![f64::INFINITY; n];
    while chosen.len() < k {
        let last = *chosen.last().unwrap();
        for (i, b) in best.iter_mut().enumerate() {
            let d: f64 = (0..points.ncols()).map(|d| (points[(i, d)] - points[(last, d)]).powi(2)).sum();
            *b = b.min(d);
        }
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &b) in best.iter().enumerate() {
                if b > 0.0 && target < b {
                    pick = i;
                    break;
                }
                target -= b;
            }
            pick
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
    }
    DMatrix::from_fn(k, points.ncols(), |j, d| points[(chosen[j], d)])
}

/// Lloyd's k-means with k-means++ seeding; keeps the lowest-inertia run.
pub fn kmeans(points: &DMatrix<f64>, k: usize, restarts: usize, max_iters: usize, seed: u64) -> KMeansResult {
    let n = points.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts {
        let mut centroids = kmeans_plus_plus(points, k, &mut rng);
        let mut assignment = vec![usize::MAX; n];
        for _ in 0..max_iters.max(1) {
            let mut changed = false;
            for (i, slot) in assignment.iter_mut().enumerate() {
                let mut arg = 0;
                let mut min = f64::INFINITY;
                for j in 0..k {
                    let d = sq_dist(points, i, &centroids, j);
                    if d < min {
                        min = d;
                        arg = j;
                    }
                }
                if *slot != arg {
                    *slot = arg;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            let mut sums = DMatrix::<f64>::zeros(k, points.ncols());
            let mut counts = vec![0usize; k];
            for (i, &a) in assignment.iter().enumerate() {
                counts[a] += 1;
                for d in 0..points.ncols() {
                    sums[(a, d)] += points[(i, d)];
                }
            }
            for j in 0..k {
                // An emptied cluster keeps its previous centroid.
                if counts[j] > 0 {
                    for d in 0..points.ncols() {
                        centroids[(j, d)] = sums[(j, d)] / counts[j] as f64;
                    }
                }
            }
        }
        let inertia = assignment.iter().enumerate().map(|(i, &a)| sq_dist(points, i, &centroids, a)).sum();
        if best.as_ref().is_none_or(|b| inertia < b.inertia) {
            best = Some(KMeansResult { assignment, centroids, inertia });
        }
    }
    best.expect("at least one restart")
}

/// Per-iteration record of an FCM run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcmTrace {
    /// `Σ w^m d²` after each membership update.
    pub objective: Vec<f64>,
    pub max_change: Vec<f64>,
    pub converged: bool,
}

/// User features for FCM: each user's row of the distance matrix.
pub fn distance_features(dist: &DistanceMatrix) -> DMatrix<f64> {
    let n = dist.len();
    DMatrix::from_fn(n, n, |a, b| dist.get(a, b))
}

pub fn fcm_cluster(features: &DMatrix<f64>, cfg: &FcmConfig) -> Result<ClusterModel> {
    fcm_cluster_traced(features, cfg).map(|(m, _)| m)
}

/// Fuzzy C-means. Alternates centroid and membership updates until the
/// largest membership change drops below `epsilon`.
pub fn fcm_cluster_traced(features: &DMatrix<f64>, cfg: &FcmConfig) -> Result<(ClusterModel, FcmTrace)> {
    let (n, dim) = features.shape();
    let c = cfg.c;
    let m = cfg.fuzzy_degree;
    if c == 0 || n < c {
        return Err(Error::Config(format!("need at least c = {c} points, have {n}")));
    }
    if !(m > 1.0 && m.is_finite()) {
        return Err(Error::Config(format!("fuzzy degree must exceed 1, got {m}")));
    }
    if cfg.epsilon.is_nan() || cfg.epsilon <= 0.0 {
        return Err(Error::Config(format!("epsilon must be positive, got {}", cfg.epsilon)));
    }
    let exponent = 2.0 / (m - 1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut w = DMatrix::from_fn(n, c, |_, _| rng.gen_range(f64::EPSILON..1.0));
    for mut row in w.row_iter_mut() {
        let s: f64 = row.sum();
        row /= s;
    }

    let mut trace = FcmTrace { objective: Vec::new(), max_change: Vec::new(), converged: false };
    let mut centroids = DMatrix::zeros(c, dim);
    let mut dists = DMatrix::zeros(n, c);
    for _ in 0..cfg.max_iters.max(1) {
        let wm = w.map(|x| x.powf(m));
        for j in 0..c {
            let total: f64 = wm.column(j).sum();
            for d in 0..dim {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += wm[(i, j)] * features[(i, d)];
                }
                centroids[(j, d)] = if total > 0.0 { acc / total } else { 0.0 };
            }
        }
        for i in 0..n {
            for j in 0..c {
                dists[(i, j)] = sq_dist(features, i, &centroids, j).sqrt();
            }
        }
        let mut next = DMatrix::zeros(n, c);
        for i in 0..n {
            if let Some(hit) = (0..c).find(|&j| dists[(i, j)] == 0.0) {
                next[(i, hit)] = 1.0;
                continue;
            }
            for j in 0..c {
                let s: f64 = (0..c).map(|k| (dists[(i, j)] / dists[(i, k)]).powf(exponent)).sum();
                next[(i, j)] = 1.0 / s;
            }
        }
        let change = (&next - &w).abs().max();
        w = next;
        let objective: f64 = (0..n)
            .flat_map(|i| (0..c).map(move |j| (i, j)))
            .map(|(i, j)| w[(i, j)].powf(m) * dists[(i, j)].powi(2))
            .sum();
        if !objective.is_finite() {
            return Err(Error::Numerical("FCM objective became non-finite".into()));
        }
        trace.objective.push(objective);
        trace.max_change.push(change);
        if change < cfg.epsilon {
            trace.converged = true;
            break;
        }
    }
    if !trace.converged {
        log::warn!("FCM stopped after {} iterations without reaching epsilon", cfg.max_iters);
    }
    let assignment = (0..n)
        .map(|i| {
            let row = w.row(i);
            // argmax, first index wins ties
            (0..c).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect();
    let model = ClusterModel::new(ClusterMethod::Fcm, c, assignment, Some(w))?.canonical()?;
    Ok((model, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterCohesion {
    pub cluster: usize,
    pub size: usize,
    /// Mean distance over member pairs; `None` for empty clusters.
    pub mean_intra: Option<f64>,
    pub singleton: bool,
    /// Mean distance to members of all other clusters.
    pub mean_inter: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub clusters: Vec<ClusterCohesion>,
    /// c × c mean cross-cluster distances; diagonal holds the intra means.
    pub inter: Vec<Vec<Option<f64>>>,
    pub empty_clusters: Vec<usize>,
    /// Non-empty clusters whose intra mean is below their inter mean.
    pub cohesive_clusters: usize,
}

pub fn cluster_validity(dist: &DistanceMatrix, model: &ClusterModel) -> Result<ValidityReport> {
    let n = dist.len();
    if model.len() != n {
        return Err(Error::Validation(format!("cluster model covers {} users, distance matrix {n}", model.len())));
    }
    let c = model.c();
    let mut sum = vec![vec![0.0; c]; c];
    let mut cnt = vec![vec![0usize; c]; c];
    let asg = model.assignment();
    for a in 0..n {
        for b in (a + 1)..n {
            let (x, y) = (asg[a].min(asg[b]), asg[a].max(asg[b]));
            sum[x][y] += dist.get(a, b);
            cnt[x][y] += 1;
        }
    }
    let mut inter = vec![vec![None; c]; c];
    for x in 0..c {
        for y in x..c {
            let v = (cnt[x][y] > 0).then(|| sum[x][y] / cnt[x][y] as f64);
            inter[x][y] = v;
            inter[y][x] = v;
        }
    }
    let sizes = model.sizes();
    let mut clusters = Vec::with_capacity(c);
    let mut cohesive = 0;
    for k in 0..c {
        let size = sizes[k];
        let mean_intra = match size {
            0 => None,
            1 => Some(0.0),
            _ => inter[k][k],
        };
        let (s, m) = (0..c)
            .filter(|&o| o != k)
            .fold((0.0, 0usize), |(s, m), o| (s + sum[k.min(o)][k.max(o)], m + cnt[k.min(o)][k.max(o)]));
        let mean_inter = (m > 0).then(|| s / m as f64);
        if let (Some(i), Some(e)) = (mean_intra, mean_inter) {
            if size > 0 && i < e {
                cohesive += 1;
            }
        }
        clusters.push(ClusterCohesion { cluster: k, size, mean_intra, singleton: size == 1, mean_inter });
    }
    Ok(ValidityReport { clusters, inter, empty_clusters: model.empty_clusters(), cohesive_clusters: cohesive })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSidecar {
    pub method: ClusterMethod,
    pub c: usize,
    pub config: serde_json::Value,
    pub seed: u64,
    pub sizes: Vec<usize>,
    pub empty_clusters: Vec<usize>,
    pub dataset_hash: String,
}

pub fn write_sidecar(path: &Path, sidecar: &ClusterSidecar) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(sidecar)? + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two blocks of `half` users: distance 0 inside, 2 across.
    fn two_blocks(half: usize) -> DistanceMatrix {
        let n = 2 * half;
        let vals = (0..n * n)
            .map(|k| {
                let (a, b) = (k / n, k % n);
                if a == b || (a < half) == (b < half) {
                    0.0
                } else {
                    2.0
                }
            })
            .collect();
        DistanceMatrix::from_values(n, vals).unwrap()
    }

    #[test]
    fn affinity_values() {
        let d = DistanceMatrix::from_values(2, vec![0.0, 2.0, 2.0, 0.0]).unwrap();
        let a = affinity_from_distance(&d, 1.0).unwrap();
        assert_eq!(a[(0, 0)], 0.0);
        assert!((a[(0, 1)] - (-2.0f64).exp()).abs() < 1e-15);
        assert!((a[(0, 1)] - 0.1353).abs() < 1e-4);
        let d = DistanceMatrix::from_values(2, vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(affinity_from_distance(&d, 0.7).unwrap()[(1, 0)], 1.0);
        assert!(matches!(affinity_from_distance(&d, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn spectral_separates_blocks() {
        let d = two_blocks(4);
        let cfg = SpectralConfig { c: 2, ..Default::default() };
        let m = spectral_cluster(&d, &cfg).unwrap();
        assert_eq!(m.assignment(), &[0, 0, 0, 0, 1, 1, 1, 1]);
    }

    #[test]
    fn spectral_n_equals_c() {
        let d = DistanceMatrix::from_values(3, vec![0.0, 1.0, 2.0, 1.0, 0.0, 1.5, 2.0, 1.5, 0.0]).unwrap();
        let m = spectral_cluster(&d, &SpectralConfig { c: 3, ..Default::default() }).unwrap();
        let mut sizes = m.sizes();
        sizes.sort();
        assert_eq!(sizes, vec![1, 1, 1]);
        assert!(spectral_cluster(&d, &SpectralConfig { c: 4, ..Default::default() }).is_err());
    }

    #[test]
    fn fcm_recovers_separated_groups() {
        let pts = DMatrix::from_row_slice(6, 1, &[0.0, 0.1, 0.2, 10.0, 10.1, 10.2]);
        let cfg = FcmConfig { c: 2, ..Default::default() };
        let (m, trace) = fcm_cluster_traced(&pts, &cfg).unwrap();
        assert_eq!(m.assignment(), &[0, 0, 0, 1, 1, 1]);
        assert!(trace.converged);
        for row in m.memberships().unwrap().row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn fcm_point_on_centroid_gets_full_membership() {
        // Identical points collapse onto their centroid.
        let pts = DMatrix::from_row_slice(4, 1, &[1.0, 1.0, 5.0, 5.0]);
        let cfg = FcmConfig { c: 2, ..Default::default() };
        let m = fcm_cluster(&pts, &cfg).unwrap();
        let w = m.memberships().unwrap();
        for i in 0..4 {
            assert!(w.row(i).iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        assert_ne!(m.assignment()[0], m.assignment()[2]);
    }

    #[test]
    fn fcm_rejects_bad_config() {
        let pts = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let bad_m = FcmConfig { c: 2, fuzzy_degree: 1.0, ..Default::default() };
        assert!(matches!(fcm_cluster(&pts, &bad_m), Err(Error::Config(_))));
        let bad_c = FcmConfig { c: 3, ..Default::default() };
        assert!(matches!(fcm_cluster(&pts, &bad_c), Err(Error::Config(_))));
    }

    #[test]
    fn validity_blocks_and_identical() {
        let d = two_blocks(3);
        let m = ClusterModel::new(ClusterMethod::Spectral, 2, vec![0, 0, 0, 1, 1, 1], None).unwrap();
        let v = cluster_validity(&d, &m).unwrap();
        assert_eq!(v.cohesive_clusters, 2);
        assert_eq!(v.clusters[0].mean_intra, Some(0.0));
        assert_eq!(v.inter[0][1], Some(2.0));

        let zero = DistanceMatrix::from_values(3, vec![0.0; 9]).unwrap();
        let m = ClusterModel::new(ClusterMethod::Spectral, 3, vec![0, 0, 1], None).unwrap();
        let v = cluster_validity(&zero, &m).unwrap();
        assert_eq!(v.clusters[0].mean_intra, Some(0.0));
        assert!(v.clusters[1].singleton);
        assert_eq!(v.clusters[2].mean_intra, None);
        assert_eq!(v.empty_clusters, vec![2]);
    }

    #[test]
    fn relabel_requires_permutation() {
        let m = ClusterModel::new(ClusterMethod::Spectral, 2, vec![0, 1, 1], None).unwrap();
        assert_eq!(m.relabel(&[1, 0]).unwrap().assignment(), &[1, 0, 0]);
        assert!(m.relabel(&[0, 0]).is_err());
    }

    #[test]
    fn laplacian_spectrum_in_range() {
        let d = two_blocks(5);
        let a = affinity_from_distance(&d, median_distance(&d)).unwrap();
        let l = normalized_laplacian(&a);
        let eig = SymmetricEigen::new(l);
        for v in eig.eigenvalues.iter() {
            assert!((-1e-8..=2.0 + 1e-8).contains(v), "{v}");
        }
    }
}
