//! Rating data: MovieLens ingestion, the sparse user×item matrix, and
//! train/test splitting (per-user random holdout and cold-start masking).
//!
//! Raw user/item ids from the input file are mapped onto dense 0-based
//! indices ([`UserId`], [`ItemId`]). Datasets derived from one another by
//! splitting share the same index space, so a user index means the same
//! person in the full dataset, the train partition and the test partition.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MIN_RATING: f64 = 1.0;
pub const MAX_RATING: f64 = 5.0;

/// Dense index of a user inside a dataset's index space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UserId(pub u32);

/// Dense index of an item inside a dataset's index space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ItemId(pub u32);

impl UserId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl ItemId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Bidirectional map between raw ids and dense indices. Raw ids are sorted
/// ascending before numbering so the mapping is independent of file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdIndex {
    raw: Vec<u64>,
    lookup: HashMap<u64, u32>,
}

impl IdIndex {
    fn from_raw(mut raw: Vec<u64>) -> Self {
        raw.sort_unstable();
        raw.dedup();
        let lookup = raw.iter().enumerate().map(|(i, &r)| (r, i as u32)).collect();
        IdIndex { raw, lookup }
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn raw(&self, dense: usize) -> u64 {
        self.raw[dense]
    }

    pub fn dense(&self, raw: u64) -> Option<u32> {
        self.lookup.get(&raw).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub user: UserId,
    pub item: ItemId,
    pub value: f64,
    pub timestamp: Option<i64>,
}

/// Sparse rating matrix with row (per-user) and column (per-item) views.
#[derive(Debug, Clone)]
pub struct RatingsDataset {
    users: Arc<IdIndex>,
    items: Arc<IdIndex>,
    /// Sorted by (user, item).
    ratings: Vec<Rating>,
    /// CSR offsets into `ratings`, one slot per user index plus a sentinel.
    user_offsets: Vec<usize>,
    /// Per item: (user, rating) sorted by user.
    by_item: Vec<Vec<(UserId, f64)>>,
    user_means: Vec<Option<f64>>,
    n_users: usize,
    n_items: usize,
    duplicates: usize,
}

impl RatingsDataset {
    /// Builds a dataset with a fresh index space from raw-id tuples.
    /// Duplicate (user, item) pairs keep the last occurrence.
    pub fn from_raw<I>(rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (u64, u64, f64, Option<i64>)>,
    {
        let rows: Vec<_> = rows.into_iter().collect();
        for &(u, i, v, _) in &rows {
            validate_rating(v).map_err(|m| Error::Validation(format!("user {u} item {i}: {m}")))?;
        }
        let users = Arc::new(IdIndex::from_raw(rows.iter().map(|r| r.0).collect()));
        let items = Arc::new(IdIndex::from_raw(rows.iter().map(|r| r.1).collect()));
        let ratings = rows
            .into_iter()
            .map(|(u, i, value, timestamp)| Rating {
                user: UserId(users.dense(u).expect("indexed")),
                item: ItemId(items.dense(i).expect("indexed")),
                value,
                timestamp,
            })
            .collect();
        Ok(Self::assemble(users, items, ratings))
    }

    /// Builds a dataset over an existing index space (used by splits).
    pub fn with_index(users: Arc<IdIndex>, items: Arc<IdIndex>, ratings: Vec<Rating>) -> Result<Self> {
        for r in &ratings {
            if r.user.index() >= users.len() {
                return Err(Error::UnknownId { kind: "user", id: r.user.0 as u64 });
            }
            if r.item.index() >= items.len() {
                return Err(Error::UnknownId { kind: "item", id: r.item.0 as u64 });
            }
            validate_rating(r.value).map_err(Error::Validation)?;
        }
        Ok(Self::assemble(users, items, ratings))
    }

    fn assemble(users: Arc<IdIndex>, items: Arc<IdIndex>, mut ratings: Vec<Rating>) -> Self {
        // Stable sort keeps file order among duplicates, so dedup-by-last works.
        ratings.sort_by_key(|r| (r.user, r.item));
        let before = ratings.len();
        let mut deduped: Vec<Rating> = Vec::with_capacity(before);
        for r in ratings {
            match deduped.last_mut() {
                Some(last) if last.user == r.user && last.item == r.item => *last = r,
                _ => deduped.push(r),
            }
        }
        let duplicates = before - deduped.len();
        if duplicates > 0 {
            log::warn!("{duplicates} duplicate (user, item) ratings replaced by their last occurrence");
        }
        let ratings = deduped;

        let mut user_offsets = vec![0usize; users.len() + 1];
        for r in &ratings {
            user_offsets[r.user.index() + 1] += 1;
        }
        for u in 0..users.len() {
            user_offsets[u + 1] += user_offsets[u];
        }
        let mut by_item: Vec<Vec<(UserId, f64)>> = vec![Vec::new(); items.len()];
        for r in &ratings {
            by_item[r.item.index()].push((r.user, r.value));
        }
        let user_means = (0..users.len())
            .map(|u| {
                let row = &ratings[user_offsets[u]..user_offsets[u + 1]];
                (!row.is_empty()).then(|| row.iter().map(|r| r.value).sum::<f64>() / row.len() as f64)
            })
            .collect();
        let n_users = (0..users.len()).filter(|&u| user_offsets[u + 1] > user_offsets[u]).count();
        let n_items = by_item.iter().filter(|v| !v.is_empty()).count();

        RatingsDataset { users, items, ratings, user_offsets, by_item, user_means, n_users, n_items, duplicates }
    }

    /// Ratings sorted by (user, item).
    pub fn ratings(&self) -> &[Rating] {
        &self.ratings
    }

    pub fn len(&self) -> usize {
        self.ratings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratings.is_empty()
    }

    /// Distinct users holding at least one rating.
    pub fn n_users(&self) -> usize {
        self.n_users
    }

    /// Distinct items holding at least one rating.
    pub fn n_items(&self) -> usize {
        self.n_items
    }

    /// Size of the shared user index space.
    pub fn user_capacity(&self) -> usize {
        self.users.len()
    }

    pub fn item_capacity(&self) -> usize {
        self.items.len()
    }

    pub fn user_index(&self) -> &Arc<IdIndex> {
        &self.users
    }

    pub fn item_index(&self) -> &Arc<IdIndex> {
        &self.items
    }

    /// Duplicate input lines dropped by last-wins deduplication.
    pub fn duplicates(&self) -> usize {
        self.duplicates
    }

    pub fn user_id(&self, raw: u64) -> Result<UserId> {
        self.users.dense(raw).map(UserId).ok_or(Error::UnknownId { kind: "user", id: raw })
    }

    pub fn item_id(&self, raw: u64) -> Result<ItemId> {
        self.items.dense(raw).map(ItemId).ok_or(Error::UnknownId { kind: "item", id: raw })
    }

    pub fn raw_user(&self, user: UserId) -> u64 {
        self.users.raw(user.index())
    }

    pub fn raw_item(&self, item: ItemId) -> u64 {
        self.items.raw(item.index())
    }

    /// The user's ratings, sorted by item. Empty for unknown or unrated users.
    pub fn user_ratings(&self, user: UserId) -> &[Rating] {
        let u = user.index();
        if u >= self.users.len() {
            return &[];
        }
        &self.ratings[self.user_offsets[u]..self.user_offsets[u + 1]]
    }

    pub fn user_vector(&self, user: UserId) -> UserVector {
        UserVector {
            user_id: self.raw_user(user),
            entries: self.user_ratings(user).iter().map(|r| (self.raw_item(r.item), r.value)).collect(),
        }
    }

    /// (user, rating) pairs for an item, sorted by user.
    pub fn item_ratings(&self, item: ItemId) -> &[(UserId, f64)] {
        self.by_item.get(item.index()).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn rating(&self, user: UserId, item: ItemId) -> Option<f64> {
        let row = self.user_ratings(user);
        row.binary_search_by_key(&item, |r| r.item).ok().map(|p| row[p].value)
    }

    /// Mean over all of the user's ratings in this dataset.
    pub fn user_mean(&self, user: UserId) -> Option<f64> {
        self.user_means.get(user.index()).copied().flatten()
    }

    /// Users that hold at least one rating, in index order.
    pub fn active_users(&self) -> impl Iterator<Item = UserId> + '_ {
        (0..self.users.len()).filter(|&u| self.user_offsets[u + 1] > self.user_offsets[u]).map(|u| UserId(u as u32))
    }

    pub fn pairs(&self) -> Vec<(UserId, ItemId)> {
        self.ratings.iter().map(|r| (r.user, r.item)).collect()
    }

    /// SHA-256 over the rating set, expressed in raw ids so that it does not
    /// depend on the index space.
    pub fn content_hash(&self) -> String {
        let mut rows: Vec<(u64, u64, u64, Option<i64>)> = self
            .ratings
            .iter()
            .map(|r| (self.raw_user(r.user), self.raw_item(r.item), r.value.to_bits(), r.timestamp))
            .collect();
        rows.sort_unstable();
        let mut h = Sha256::new();
        for (u, i, v, t) in rows {
            h.update(u.to_le_bytes());
            h.update(i.to_le_bytes());
            h.update(v.to_le_bytes());
            match t {
                Some(t) => {
                    h.update([1u8]);
                    h.update(t.to_le_bytes());
                }
                None => h.update([0u8]),
            }
        }
        hex::encode(h.finalize())
    }

    /// Writes the ratings in `user\titem\trating[\ttimestamp]` form, raw ids.
    pub fn write_movielens(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.ratings {
            let res = match r.timestamp {
                Some(t) => writeln!(w, "{}\t{}\t{}\t{}", self.raw_user(r.user), self.raw_item(r.item), r.value, t),
                None => writeln!(w, "{}\t{}\t{}", self.raw_user(r.user), self.raw_item(r.item), r.value),
            };
            res.map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Loads a partition file into this dataset's index space.
    pub fn load_partition(&self, path: &Path) -> Result<RatingsDataset> {
        let rows = read_rows(path)?;
        let ratings = rows
            .into_iter()
            .map(|(u, i, value, timestamp)| {
                Ok(Rating { user: self.user_id(u)?, item: self.item_id(i)?, value, timestamp })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::with_index(self.users.clone(), self.items.clone(), ratings)
    }

    fn subset(&self, ratings: Vec<Rating>) -> RatingsDataset {
        Self::assemble(self.users.clone(), self.items.clone(), ratings)
    }
}

/// A user's row of the rating matrix, keyed by raw item id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserVector {
    pub user_id: u64,
    pub entries: std::collections::BTreeMap<u64, f64>,
}

fn validate_rating(v: f64) -> std::result::Result<(), String> {
    if v.is_finite() && (MIN_RATING..=MAX_RATING).contains(&v) {
        Ok(())
    } else {
        Err(format!("rating {v} outside [{MIN_RATING}, {MAX_RATING}]"))
    }
}

type RawRow = (u64, u64, f64, Option<i64>);

fn read_rows(path: &Path) -> Result<Vec<RawRow>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut rows = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line_no = n + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let row = parse_line(trimmed).map_err(|message| Error::Parse { line: line_no, message })?;
        validate_rating(row.2).map_err(|m| Error::Validation(format!("line {line_no}: {m}")))?;
        rows.push(row);
    }
    Ok(rows)
}

fn parse_line(line: &str) -> std::result::Result<RawRow, String> {
    let fields: Vec<&str> = line.split(['\t', '|']).map(str::trim).collect();
    if fields.len() < 3 {
        return Err(format!("expected at least 3 fields, found {}", fields.len()));
    }
    let user = fields[0].parse::<u64>().map_err(|_| format!("invalid user id `{}`", fields[0]))?;
    let item = fields[1].parse::<u64>().map_err(|_| format!("invalid item id `{}`", fields[1]))?;
    let rating = fields[2].parse::<f64>().map_err(|_| format!("invalid rating `{}`", fields[2]))?;
    let timestamp = match fields.get(3) {
        Some(t) if !t.is_empty() => Some(t.parse::<i64>().map_err(|_| format!("invalid timestamp `{t}`"))?),
        _ => None,
    };
    Ok((user, item, rating, timestamp))
}

/// Reads a MovieLens `u.data`-style file (tab or `|` separated).
pub fn load_movielens(path: &Path) -> Result<RatingsDataset> {
    RatingsDataset::from_raw(read_rows(path)?)
}

/// Fraction of empty cells in the `n_users × n_items` matrix.
pub fn sparsity(dataset: &RatingsDataset) -> Result<f64> {
    let cells = dataset.n_users() as f64 * dataset.n_items() as f64;
    if cells == 0.0 {
        return Err(Error::UndefinedSparsity);
    }
    Ok(1.0 - dataset.len() as f64 / cells)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    RandomHoldout,
    ColdStartMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub test_fraction: f64,
    pub seed: u64,
    /// Inclusive rating-count range selecting cold-start test users.
    pub test_user_rating_range: (usize, usize),
    /// Inclusive range for the number of ratings a test user keeps.
    pub retained_ratings_range: (usize, usize),
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            mode: SplitMode::RandomHoldout,
            test_fraction: 0.2,
            seed: 0,
            test_user_rating_range: (20, 30),
            retained_ratings_range: (3, 20),
        }
    }
}

impl SplitSpec {
    pub fn random_holdout(test_fraction: f64, seed: u64) -> Self {
        SplitSpec { mode: SplitMode::RandomHoldout, test_fraction, seed, ..Default::default() }
    }

    pub fn cold_start(seed: u64) -> Self {
        SplitSpec { mode: SplitMode::ColdStartMask, seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            SplitMode::RandomHoldout => {
                if !(0.0..1.0).contains(&self.test_fraction) {
                    return Err(Error::Config(format!("test_fraction must lie in [0, 1), got {}", self.test_fraction)));
                }
            }
            SplitMode::ColdStartMask => {
                let (lo, hi) = self.test_user_rating_range;
                let (klo, khi) = self.retained_ratings_range;
                if lo > hi || klo > khi {
                    return Err(Error::Config("cold-start ranges must satisfy min <= max".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: RatingsDataset,
    pub test: RatingsDataset,
    /// Cold-start test users; empty for random holdout.
    pub test_users: BTreeSet<UserId>,
}

/// Per-user stratified holdout: each user sends `ceil(fraction·n_u)` ratings
/// to test, capped so at least one rating stays in train.
pub fn split_random(dataset: &RatingsDataset, spec: &SplitSpec) -> Result<(RatingsDataset, RatingsDataset)> {
    if spec.mode != SplitMode::RandomHoldout {
        return Err(Error::Config("split_random requires mode = random_holdout".into()));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::with_capacity(dataset.len());
    let mut test = Vec::new();
    let mut singletons = 0usize;
    for user in dataset.active_users() {
        let row = dataset.user_ratings(user);
        let n = row.len();
        // Guard against 0.2 * 10 landing a hair above 2.
        let wanted = ((spec.test_fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
        let take = wanted.min(n - 1);
        if n == 1 && wanted > 0 {
            singletons += 1;
        }
        let mut chosen = vec![false; n];
        for p in index::sample(&mut rng, n, take) {
            chosen[p] = true;
        }
        for (r, to_test) in row.iter().zip(chosen) {
            if to_test {
                test.push(*r);
            } else {
                train.push(*r);
            }
        }
    }
    if singletons > 0 {
        log::warn!("{singletons} users with a single rating kept entirely in train");
    }
    Ok((dataset.subset(train), dataset.subset(test)))
}

/// Cold-start masking: users whose rating count falls in the configured
/// range become test users and keep only a random `k` of their ratings in
/// train; everyone else stays wholly in train.
pub fn split_cold_start(dataset: &RatingsDataset, spec: &SplitSpec) -> Result<Split> {
    if spec.mode != SplitMode::ColdStartMask {
        return Err(Error::Config("split_cold_start requires mode = cold_start_mask".into()));
    }
    spec.validate()?;
    let (lo, hi) = spec.test_user_rating_range;
    let (klo, khi) = spec.retained_ratings_range;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::with_capacity(dataset.len());
    let mut test = Vec::new();
    let mut test_users = BTreeSet::new();
    for user in dataset.active_users() {
        let row = dataset.user_ratings(user);
        let n = row.len();
        if !(lo..=hi).contains(&n) {
            train.extend_from_slice(row);
            continue;
        }
        test_users.insert(user);
        let keep = rng.gen_range(klo..=khi).min(n);
        let mut retained = vec![false; n];
        for p in index::sample(&mut rng, n, keep) {
            retained[p] = true;
        }
        for (r, keep) in row.iter().zip(retained) {
            if keep {
                train.push(*r);
            } else {
                test.push(*r);
            }
        }
    }
    if test_users.is_empty() {
        log::warn!("no user has between {lo} and {hi} ratings; cold-start test set is empty");
    }
    Ok(Split { train: dataset.subset(train), test: dataset.subset(test), test_users })
}

/// Dispatches on `spec.mode`.
pub fn split(dataset: &RatingsDataset, spec: &SplitSpec) -> Result<Split> {
    match spec.mode {
        SplitMode::RandomHoldout => {
            let (train, test) = split_random(dataset, spec)?;
            Ok(Split { train, test, test_users: BTreeSet::new() })
        }
        SplitMode::ColdStartMask => split_cold_start(dataset, spec),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub file: String,
    pub ratings: usize,
    pub users: usize,
    pub items: usize,
    pub content_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub spec: SplitSpec,
    pub source_hash: String,
    pub train: PartitionSummary,
    pub test: PartitionSummary,
    pub test_users: usize,
    pub training_only_users: usize,
}

/// Writes `train.data`, `test.data` and `split.json` into `dir`.
pub fn write_split(dir: &Path, source: &RatingsDataset, spec: &SplitSpec, split: &Split) -> Result<SplitManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let summary = |name: &str, d: &RatingsDataset| -> Result<PartitionSummary> {
        d.write_movielens(&dir.join(name))?;
        Ok(PartitionSummary {
            file: name.to_string(),
            ratings: d.len(),
            users: d.n_users(),
            items: d.n_items(),
            content_hash: d.content_hash(),
        })
    };
    let manifest = SplitManifest {
        seed: spec.seed,
        spec: spec.clone(),
        source_hash: source.content_hash(),
        train: summary("train.data", &split.train)?,
        test: summary("test.data", &split.test)?,
        test_users: split.test_users.len(),
        training_only_users: source.n_users() - split.test_users.len(),
    };
    let path = dir.join("split.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
