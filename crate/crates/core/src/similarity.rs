//! Pearson correlation between users, adjusted cosine between items, and
//! the shifted-PCC distance used for clustering.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ItemId, RatingsDataset, UserId};
use crate::error::{Error, Result};

/// Both PCC and cosine need at least this many co-ratings.
pub const MIN_CO_RATINGS: usize = 2;

/// Distance given to user pairs whose correlation is undefined: the shift
/// of zero correlation.
pub const NEUTRAL_DISTANCE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    UserPcc,
    ItemCosine,
}

impl SimilarityKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SimilarityKind::UserPcc => "user_pcc",
            SimilarityKind::ItemCosine => "item_cosine",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "user_pcc" => Some(SimilarityKind::UserPcc),
            "item_cosine" => Some(SimilarityKind::ItemCosine),
            _ => None,
        }
    }
}

/// Pearson correlation of paired samples with means taken over the pairs
/// themselves. `None` when fewer than two pairs or either side is constant.
fn correlation(pairs: &[(f64, f64)]) -> Option<f64> {
    if pairs.len() < MIN_CO_RATINGS {
        return None;
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    centered_cosine(pairs.iter().map(|&(x, y)| (x - mx, y - my)))
}

/// Squared norms at or below this are rounding residue, not variance.
const ZERO_NORM: f64 = 1e-20;

/// Cosine of already-centered pairs; `None` if either norm vanishes.
fn centered_cosine(pairs: impl Iterator<Item = (f64, f64)>) -> Option<f64> {
    let (mut num, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for (x, y) in pairs {
        num += x * y;
        sx += x * x;
        sy += y * y;
    }
    // means of equal values can round off by an ulp; treat that as constant
    if sx <= ZERO_NORM || sy <= ZERO_NORM {
        return None;
    }
    Some((num / (sx * sy).sqrt()).clamp(-1.0, 1.0))
}

fn co_rated_users(train: &RatingsDataset, a: UserId, b: UserId, buf: &mut Vec<(f64, f64)>) {
    buf.clear();
    let (ra, rb) = (train.user_ratings(a), train.user_ratings(b));
    let (mut i, mut j) = (0, 0);
    while i < ra.len() && j < rb.len() {
        match ra[i].item.cmp(&rb[j].item) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                buf.push((ra[i].value, rb[j].value));
                i += 1;
                j += 1;
            }
        }
    }
}

/// (rating_a − mean_u, rating_b − mean_u) over users who rated both items.
fn co_rated_items(train: &RatingsDataset, a: ItemId, b: ItemId, buf: &mut Vec<(f64, f64)>) {
    buf.clear();
    let (ra, rb) = (train.item_ratings(a), train.item_ratings(b));
    let (mut i, mut j) = (0, 0);
    while i < ra.len() && j < rb.len() {
        match ra[i].0.cmp(&rb[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                let mean = train.user_mean(ra[i].0).expect("user with ratings has a mean");
                buf.push((ra[i].1 - mean, rb[j].1 - mean));
                i += 1;
                j += 1;
            }
        }
    }
}

fn check_user(train: &RatingsDataset, u: UserId) -> Result<()> {
    if u.index() >= train.user_capacity() {
        return Err(Error::UnknownId { kind: "user", id: u.0 as u64 });
    }
    Ok(())
}

fn check_item(train: &RatingsDataset, i: ItemId) -> Result<()> {
    if i.index() >= train.item_capacity() {
        return Err(Error::UnknownId { kind: "item", id: i.0 as u64 });
    }
    Ok(())
}

/// Pearson correlation over the items both users rated, with each user's
/// mean taken over that common set. `Ok(None)` when undefined.
pub fn pcc(u1: UserId, u2: UserId, train: &RatingsDataset) -> Result<Option<f64>> {
    check_user(train, u1)?;
    check_user(train, u2)?;
    let mut buf = Vec::new();
    co_rated_users(train, u1, u2, &mut buf);
    Ok(correlation(&buf))
}

/// Maps a correlation in [−1, 1] to a distance in [0, 2].
pub fn shift_pcc(s: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&s) {
        return Err(Error::Validation(format!("correlation {s} outside [-1, 1]")));
    }
    Ok(if s >= 0.0 { 1.0 - s } else { -(s - 1.0) })
}

/// Adjusted cosine between two items: each co-rater's ratings are centered
/// on that user's mean over all of their training ratings.
pub fn cosine_items(i1: ItemId, i2: ItemId, train: &RatingsDataset) -> Result<Option<f64>> {
    check_item(train, i1)?;
    check_item(train, i2)?;
    let mut buf = Vec::new();
    co_rated_items(train, i1, i2, &mut buf);
    if buf.len() < MIN_CO_RATINGS {
        return Ok(None);
    }
    Ok(centered_cosine(buf.iter().copied()))
}

/// Dense symmetric similarity matrix over a dataset's user or item index
/// space. The diagonal is 1.0 and marked defined.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    kind: SimilarityKind,
    n: usize,
    scores: Vec<f64>,
    co_count: Vec<u32>,
    defined: Vec<bool>,
}

impl SimilarityMatrix {
    pub fn kind(&self) -> SimilarityKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn score(&self, a: usize, b: usize) -> f64 {
        self.scores[a * self.n + b]
    }

    /// The score if defined.
    #[inline]
    pub fn get(&self, a: usize, b: usize) -> Option<f64> {
        let k = a * self.n + b;
        self.defined[k].then(|| self.scores[k])
    }

    #[inline]
    pub fn is_defined(&self, a: usize, b: usize) -> bool {
        self.defined[a * self.n + b]
    }

    #[inline]
    pub fn co_count(&self, a: usize, b: usize) -> u32 {
        self.co_count[a * self.n + b]
    }

    /// Similarity with undefined entries read as 0.
    pub fn weight(&self, a: usize, b: usize) -> f64 {
        self.get(a, b).unwrap_or(0.0)
    }

    pub fn write_cache(&self, path: &Path, dataset_hash: &str) -> Result<()> {
        let mut out = Vec::with_capacity(self.n * self.n * 13 + 128);
        writeln!(out, "CBCF-SIM v1 kind={} n={} hash={}", self.kind.as_str(), self.n, dataset_hash).unwrap();
        for v in &self.scores {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for c in &self.co_count {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out.extend(self.defined.iter().map(|&d| d as u8));
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a cache file, returning `None` when its header does not match
    /// the expected kind and dataset hash.
    pub fn read_cache(path: &Path, kind: SimilarityKind, dataset_hash: &str) -> Result<Option<Self>> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let mut header = String::new();
        reader.read_line(&mut header).map_err(|e| Error::io(path, e))?;
        let mut fields = header.trim().split(' ');
        if fields.next() != Some("CBCF-SIM") || fields.next() != Some("v1") {
            return Ok(None);
        }
        let mut file_kind = None;
        let mut n = None;
        let mut hash = None;
        for f in fields {
            match f.split_once('=') {
                Some(("kind", v)) => file_kind = SimilarityKind::parse(v),
                Some(("n", v)) => n = v.parse::<usize>().ok(),
                Some(("hash", v)) => hash = Some(v.to_string()),
                _ => {}
            }
        }
        let (Some(file_kind), Some(n), Some(hash)) = (file_kind, n, hash) else {
            return Ok(None);
        };
        if file_kind != kind || hash != dataset_hash {
            return Ok(None);
        }
        let mut body = Vec::new();
        reader.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
        let cells = n * n;
        if body.len() != cells * 13 {
            return Ok(None);
        }
        let (s, rest) = body.split_at(cells * 8);
        let (c, d) = rest.split_at(cells * 4);
        Ok(Some(SimilarityMatrix {
            kind,
            n,
            scores: s.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect(),
            co_count: c.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect(),
            defined: d.iter().map(|&b| b != 0).collect(),
        }))
    }
}

/// Computes every pair once (upper triangle) and mirrors it.
pub fn build_similarity_matrix(train: &RatingsDataset, kind: SimilarityKind) -> SimilarityMatrix {
    let n = match kind {
        SimilarityKind::UserPcc => train.user_capacity(),
        SimilarityKind::ItemCosine => train.item_capacity(),
    };
    let rows: Vec<Vec<(u32, Option<f64>)>> = (0..n)
        .into_par_iter()
        .map_init(Vec::new, |buf, a| {
            ((a + 1)..n)
                .map(|b| match kind {
                    SimilarityKind::UserPcc => {
                        co_rated_users(train, UserId(a as u32), UserId(b as u32), buf);
                        (buf.len() as u32, correlation(buf))
                    }
                    SimilarityKind::ItemCosine => {
                        co_rated_items(train, ItemId(a as u32), ItemId(b as u32), buf);
                        let s = if buf.len() >= MIN_CO_RATINGS { centered_cosine(buf.iter().copied()) } else { None };
                        (buf.len() as u32, s)
                    }
                })
                .collect()
        })
        .collect();

    let mut scores = vec![0.0; n * n];
    let mut co_count = vec![0u32; n * n];
    let mut defined = vec![false; n * n];
    for a in 0..n {
        let k = a * n + a;
        scores[k] = 1.0;
        defined[k] = true;
        co_count[k] = match kind {
            SimilarityKind::UserPcc => train.user_ratings(UserId(a as u32)).len(),
            SimilarityKind::ItemCosine => train.item_ratings(ItemId(a as u32)).len(),
        } as u32;
    }
    for (a, row) in rows.into_iter().enumerate() {
        for (off, (count, s)) in row.into_iter().enumerate() {
            let b = a + 1 + off;
            for k in [a * n + b, b * n + a] {
                co_count[k] = count;
                if let Some(s) = s {
                    scores[k] = s;
                    defined[k] = true;
                }
            }
        }
    }
    SimilarityMatrix { kind, n, scores, co_count, defined }
}

/// Shifted-PCC distances between users: `1 − s` where defined, the neutral
/// distance otherwise, zero on the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_similarity(sims: &SimilarityMatrix) -> Result<Self> {
        if sims.kind() != SimilarityKind::UserPcc {
            return Err(Error::Config("distances are derived from user PCC similarities".into()));
        }
        let n = sims.len();
        let mut values = vec![NEUTRAL_DISTANCE; n * n];
        for a in 0..n {
            for b in 0..n {
                values[a * n + b] = if a == b {
                    0.0
                } else {
                    match sims.get(a, b) {
                        Some(s) => shift_pcc(s)?,
                        None => NEUTRAL_DISTANCE,
                    }
                };
            }
        }
        Ok(DistanceMatrix { n, values })
    }

    /// Builds from explicit values; they must be square, symmetric and in [0, 2].
    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::Validation(format!("expected {} distances, got {}", n * n, values.len())));
        }
        for a in 0..n {
            for b in 0..n {
                let v = values[a * n + b];
                if !(0.0..=2.0).contains(&v) {
                    return Err(Error::Validation(format!("distance {v} at ({a}, {b}) outside [0, 2]")));
                }
                if v != values[b * n + a] {
                    return Err(Error::Validation(format!("distance matrix asymmetric at ({a}, {b})")));
                }
            }
        }
        Ok(DistanceMatrix { n, values })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.n + b]
    }

    pub fn row(&self, a: usize) -> &[f64] {
        &self.values[a * self.n..(a + 1) * self.n]
    }

    /// Restricts to the given indices, in order.
    pub fn submatrix(&self, keep: &[usize]) -> DistanceMatrix {
        let m = keep.len();
        let mut values = Vec::with_capacity(m * m);
        for &a in keep {
            for &b in keep {
                values.push(self.get(a, b));
            }
        }
        DistanceMatrix { n: m, values }
    }
}
