//! Memory-based rating prediction: user-based (mean-centered, PCC weighted)
//! and item-based (positive-similarity weighted average).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ItemId, RatingsDataset, UserId, MAX_RATING, MIN_RATING};
use crate::error::{Error, Result};
use crate::similarity::{SimilarityKind, SimilarityMatrix};

pub const DEFAULT_NEIGHBORS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMethod {
    UserBased,
    ItemBased,
}

impl PredictionMethod {
    pub fn similarity_kind(self) -> SimilarityKind {
        match self {
            PredictionMethod::UserBased => SimilarityKind::UserPcc,
            PredictionMethod::ItemBased => SimilarityKind::ItemCosine,
        }
    }
}

/// Why a pair could not be predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unpredictable {
    /// The user has no training ratings.
    ColdUser,
    /// Index outside the similarity matrix.
    UnknownId,
    WrongSimilarityKind,
    EmptyNeighborhood,
    ZeroDenominator,
}

fn clamp_rating(r: f64) -> f64 {
    r.clamp(MIN_RATING, MAX_RATING)
}

/// Orders candidates by descending key, breaking ties on the lower index.
fn top_k<T: Copy>(mut cands: Vec<(usize, f64, T)>, k: usize) -> Vec<(usize, f64, T)> {
    cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cands.truncate(k);
    cands
}

/// Resnick prediction:
/// `r̄_u + Σ s(u,v)(r_vi − r̄_v) / Σ |s(u,v)|` over the `k` raters of `i`
/// with the largest `|s(u,v)|`.
pub fn predict_user_based(
    u: UserId,
    i: ItemId,
    train: &RatingsDataset,
    sims: &SimilarityMatrix,
    k: usize,
) -> Result<f64, Unpredictable> {
    if sims.kind() != SimilarityKind::UserPcc {
        return Err(Unpredictable::WrongSimilarityKind);
    }
    if u.index() >= sims.len() || i.index() >= train.item_capacity() {
        return Err(Unpredictable::UnknownId);
    }
    let mean_u = train.user_mean(u).ok_or(Unpredictable::ColdUser)?;
    let cands: Vec<(usize, f64, (f64, f64))> = train
        .item_ratings(i)
        .iter()
        .filter(|(v, _)| *v != u)
        .filter_map(|&(v, r)| {
            let s = sims.get(u.index(), v.index())?;
            let mean_v = train.user_mean(v)?;
            Some((v.index(), s.abs(), (s, r - mean_v)))
        })
        .collect();
    let neighbors = top_k(cands, k);
    if neighbors.is_empty() {
        return Err(Unpredictable::EmptyNeighborhood);
    }
    let (num, den) = neighbors.iter().fold((0.0, 0.0), |(n, d), &(_, abs, (s, dev))| (n + s * dev, d + abs));
    if den == 0.0 {
        return Err(Unpredictable::ZeroDenominator);
    }
    Ok(clamp_rating(mean_u + num / den))
}

/// Weighted average of the user's own ratings on the `k` items most similar
/// to `i`, restricted to positive similarity.
pub fn predict_item_based(
    u: UserId,
    i: ItemId,
    train: &RatingsDataset,
    sims: &SimilarityMatrix,
    k: usize,
) -> Result<f64, Unpredictable> {
    if sims.kind() != SimilarityKind::ItemCosine {
        return Err(Unpredictable::WrongSimilarityKind);
    }
    if i.index() >= sims.len() || u.index() >= train.user_capacity() {
        return Err(Unpredictable::UnknownId);
    }
    let row = train.user_ratings(u);
    if row.is_empty() {
        return Err(Unpredictable::ColdUser);
    }
    let cands: Vec<(usize, f64, f64)> = row
        .iter()
        .filter(|r| r.item != i)
        .filter_map(|r| {
            let s = sims.get(i.index(), r.item.index())?;
            (s > 0.0).then_some((r.item.index(), s, r.value))
        })
        .collect();
    let neighbors = top_k(cands, k);
    if neighbors.is_empty() {
        return Err(Unpredictable::EmptyNeighborhood);
    }
    let (num, den) = neighbors.iter().fold((0.0, 0.0), |(n, d), &(_, s, r)| (n + s * r, d + s));
    if den == 0.0 {
        return Err(Unpredictable::ZeroDenominator);
    }
    Ok(clamp_rating(num / den))
}

/// Binds a training set, its similarity matrix and the neighborhood size.
#[derive(Debug, Clone, Copy)]
pub struct Predictor<'a> {
    pub method: PredictionMethod,
    pub train: &'a RatingsDataset,
    pub sims: &'a SimilarityMatrix,
    pub k: usize,
}

impl<'a> Predictor<'a> {
    pub fn new(
        method: PredictionMethod,
        train: &'a RatingsDataset,
        sims: &'a SimilarityMatrix,
        k: usize,
    ) -> Result<Self> {
        if sims.kind() != method.similarity_kind() {
            return Err(Error::Config(format!(
                "{method:?} prediction needs a {} matrix, got {}",
                method.similarity_kind().as_str(),
                sims.kind().as_str()
            )));
        }
        if k == 0 {
            return Err(Error::Config("neighborhood size k must be positive".into()));
        }
        Ok(Predictor { method, train, sims, k })
    }

    pub fn predict(&self, u: UserId, i: ItemId) -> Result<f64, Unpredictable> {
        match self.method {
            PredictionMethod::UserBased => predict_user_based(u, i, self.train, self.sims, self.k),
            PredictionMethod::ItemBased => predict_item_based(u, i, self.train, self.sims, self.k),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub method: PredictionMethod,
    pub k: usize,
    pub entries: BTreeMap<(UserId, ItemId), f64>,
    pub failures: BTreeMap<(UserId, ItemId), Unpredictable>,
}

impl PredictionSet {
    pub fn new(method: PredictionMethod, k: usize) -> Self {
        PredictionSet { method, k, entries: BTreeMap::new(), failures: BTreeMap::new() }
    }

    pub fn get(&self, u: UserId, i: ItemId) -> Option<f64> {
        self.entries.get(&(u, i)).copied()
    }

    pub fn requested(&self) -> usize {
        self.entries.len() + self.failures.len()
    }

    /// Fraction of requested pairs that received a prediction.
    pub fn coverage(&self) -> f64 {
        match self.requested() {
            0 => 0.0,
            n => self.entries.len() as f64 / n as f64,
        }
    }

    pub fn failure_counts(&self) -> BTreeMap<Unpredictable, usize> {
        let mut out = BTreeMap::new();
        for reason in self.failures.values() {
            *out.entry(*reason).or_insert(0) += 1;
        }
        out
    }

    /// CSV `user,item,predicted` with raw ids.
    pub fn write_csv(&self, path: &Path, dataset: &RatingsDataset) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["user", "item", "predicted"])?;
        for (&(u, i), &p) in &self.entries {
            w.write_record([dataset.raw_user(u).to_string(), dataset.raw_item(i).to_string(), p.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a CSV written by [`write_csv`](Self::write_csv). The CSV holds
    /// predicted pairs only, so the result has no failures.
    pub fn read_csv(
        path: &Path,
        dataset: &RatingsDataset,
        method: PredictionMethod,
        k: usize,
    ) -> Result<PredictionSet> {
        let mut set = PredictionSet::new(method, k);
        let mut r = csv::Reader::from_path(path)?;
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let parse = |idx: usize| -> Result<&str> {
                rec.get(idx).ok_or(Error::Parse { line: line + 2, message: "missing column".into() })
            };
            let bad = |what: &str| Error::Parse { line: line + 2, message: format!("invalid {what}") };
            let u = dataset.user_id(parse(0)?.parse().map_err(|_| bad("user"))?)?;
            let i = dataset.item_id(parse(1)?.parse().map_err(|_| bad("item"))?)?;
            let p: f64 = parse(2)?.parse().map_err(|_| bad("prediction"))?;
            set.entries.insert((u, i), p);
        }
        Ok(set)
    }

    /// Lossless dense-index form used by the stage cache.
    pub fn to_cache(&self) -> PredictionCache {
        PredictionCache {
            method: self.method,
            k: self.k,
            entries: self.entries.iter().map(|(&(u, i), &p)| (u.0, i.0, p.to_bits())).collect(),
            failures: self.failures.iter().map(|(&(u, i), &r)| (u.0, i.0, r)).collect(),
        }
    }

    pub fn from_cache(cache: PredictionCache) -> Self {
        PredictionSet {
            method: cache.method,
            k: cache.k,
            entries: cache
                .entries
                .into_iter()
                .map(|(u, i, bits)| ((UserId(u), ItemId(i)), f64::from_bits(bits)))
                .collect(),
            failures: cache.failures.into_iter().map(|(u, i, r)| ((UserId(u), ItemId(i)), r)).collect(),
        }
    }

    pub fn sidecar(&self, dataset_hash: &str) -> PredictionSidecar {
        PredictionSidecar {
            method: self.method,
            k: self.k,
            requested: self.requested(),
            predicted: self.entries.len(),
            coverage: self.coverage(),
            failures: self.failure_counts().into_iter().map(|(k, v)| (format!("{k:?}"), v)).collect(),
            dataset_hash: dataset_hash.to_string(),
        }
    }

    pub fn write_sidecar(&self, path: &Path, dataset_hash: &str) -> Result<()> {
        let body = serde_json::to_string_pretty(&self.sidecar(dataset_hash))? + "\n";
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionCache {
    pub method: PredictionMethod,
    pub k: usize,
    pub entries: Vec<(u32, u32, u64)>,
    pub failures: Vec<(u32, u32, Unpredictable)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSidecar {
    pub method: PredictionMethod,
    pub k: usize,
    pub requested: usize,
    pub predicted: usize,
    pub coverage: f64,
    pub failures: BTreeMap<String, usize>,
    pub dataset_hash: String,
}

/// Predicts every requested pair in parallel; unpredictable pairs are kept
/// as data with their reason.
pub fn predict_all(test_pairs: &[(UserId, ItemId)], predictor: &Predictor<'_>) -> Result<PredictionSet> {
    if test_pairs.is_empty() {
        return Err(Error::Validation("no pairs to predict".into()));
    }
    let results: Vec<_> = test_pairs.par_iter().map(|&(u, i)| ((u, i), predictor.predict(u, i))).collect();
    let mut set = PredictionSet::new(predictor.method, predictor.k);
    for (pair, res) in results {
        match res {
            Ok(p) => {
                set.entries.insert(pair, p);
            }
            Err(reason) => {
                set.failures.insert(pair, reason);
            }
        }
    }
    Ok(set)
}
