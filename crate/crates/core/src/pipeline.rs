//! Declarative experiments: ingest → split → similarity → predict → cluster
//! → average → evaluate/sweep, with content-addressed stage caches and a
//! manifest of every artifact written.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::{
    cluster_validity, distance_features, fcm_cluster, spectral_cluster, write_sidecar, ClusterMethod, ClusterModel,
    ClusterSidecar, FcmConfig, SpectralConfig,
};
use crate::dataset::{load_movielens, sparsity, split, write_split, RatingsDataset, Split, SplitMode, SplitSpec};
use crate::error::{Error, Result};
use crate::ipu::{
    cluster_item_average, ClusterItemAverages, DecisionRule, EvaluationReport, EvaluationSet, ThresholdConfig,
    DEFAULT_DELTA_PREF, REPORT_CSV_HEADER,
};
use crate::optimizer::{
    matched_precision, sweep_baseline, sweep_pairs, validation_split, Axis, Constraint, GridPoint, GridSpec,
    MatchedPrecision, Objective, SweepResult,
};
use crate::predictor::{predict_all, PredictionCache, PredictionMethod, PredictionSet, Predictor, DEFAULT_NEIGHBORS};
use crate::similarity::{build_similarity_matrix, DistanceMatrix, SimilarityKind, SimilarityMatrix};

/// Folded into every stage key; bump when a stage's output format or
/// semantics change.
pub const CODE_VERSION: &str = concat!("cbcf-", env!("CARGO_PKG_VERSION"), "/stages-1");

pub const MANIFEST_FILE: &str = "manifest.json";

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub dataset: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub predictor: PredictorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clustering: Option<ClusteringConfig>,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub mode: SplitMode,
    pub test_fraction: f64,
    pub test_user_rating_range: (usize, usize),
    pub retained_ratings_range: (usize, usize),
}

impl Default for SplitConfig {
    fn default() -> Self {
        let s = SplitSpec::default();
        SplitConfig {
            mode: s.mode,
            test_fraction: s.test_fraction,
            test_user_rating_range: s.test_user_rating_range,
            retained_ratings_range: s.retained_ratings_range,
        }
    }
}

impl SplitConfig {
    pub fn spec(&self, seed: u64) -> SplitSpec {
        SplitSpec {
            mode: self.mode,
            test_fraction: self.test_fraction,
            seed,
            test_user_rating_range: self.test_user_rating_range,
            retained_ratings_range: self.retained_ratings_range,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub method: PredictionMethod,
    pub k: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig { method: PredictionMethod::ItemBased, k: DEFAULT_NEIGHBORS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringConfig {
    pub algorithm: ClusterMethod,
    pub c: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    pub kmeans_restarts: usize,
    pub kmeans_max_iters: usize,
    pub fuzzy_degree: f64,
    pub epsilon: f64,
    pub max_iters: usize,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        let s = SpectralConfig::default();
        let f = FcmConfig::default();
        ClusteringConfig {
            algorithm: ClusterMethod::Spectral,
            c: s.c,
            sigma: s.sigma,
            kmeans_restarts: s.kmeans_restarts,
            kmeans_max_iters: s.kmeans_max_iters,
            fuzzy_degree: f.fuzzy_degree,
            epsilon: f.epsilon,
            max_iters: f.max_iters,
        }
    }
}

impl ClusteringConfig {
    pub fn spectral(&self, seed: u64) -> SpectralConfig {
        SpectralConfig {
            c: self.c,
            sigma: self.sigma,
            kmeans_restarts: self.kmeans_restarts,
            kmeans_max_iters: self.kmeans_max_iters,
            seed,
        }
    }

    pub fn fcm(&self, seed: u64) -> FcmConfig {
        FcmConfig { c: self.c, fuzzy_degree: self.fuzzy_degree, epsilon: self.epsilon, max_iters: self.max_iters, seed }
    }

    /// Only the fields the chosen algorithm reads, so unrelated edits do
    /// not invalidate the cache.
    fn effective(&self, seed: u64) -> serde_json::Value {
        match self.algorithm {
            ClusterMethod::Spectral => serde_json::to_value(self.spectral(seed)),
            ClusterMethod::Fcm => serde_json::to_value(self.fcm(seed)),
        }
        .expect("plain config serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub delta_pref: f64,
    /// Fixed thresholds for `evaluate`; all three or none.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Fixed threshold of the no-clustering rule for `evaluate`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub objective: Objective,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision_floor: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall_floor: Option<f64>,
    pub grid_min: f64,
    pub grid_max: f64,
    pub grid_step: f64,
    pub precision_levels: Vec<f64>,
    /// Non-default mode: tune thresholds on this fraction-complement of
    /// each user's test pairs and score them on the held-out fraction.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tuning_holdout: Option<f64>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            delta_pref: DEFAULT_DELTA_PREF,
            alpha: None,
            beta: None,
            gamma: None,
            threshold: None,
            objective: Objective::F1,
            precision_floor: None,
            recall_floor: None,
            grid_min: 0.0,
            grid_max: 5.0,
            grid_step: 0.1,
            precision_levels: Vec::new(),
            tuning_holdout: None,
        }
    }
}

impl EvaluationConfig {
    pub fn fixed_thresholds(&self) -> Result<Option<ThresholdConfig>> {
        match (self.alpha, self.beta, self.gamma) {
            (None, None, None) => Ok(None),
            (Some(a), Some(b), Some(g)) => {
                let mut cfg = ThresholdConfig::new(a, b, g).with_delta_pref(self.delta_pref);
                cfg.delta_precision = self.precision_floor;
                cfg.delta_recall = self.recall_floor;
                cfg.validate()?;
                Ok(Some(cfg))
            }
            _ => Err(Error::Config("alpha, beta and gamma must be given together".into())),
        }
    }

    pub fn constraint(&self) -> Result<Constraint> {
        match (self.precision_floor, self.recall_floor) {
            (Some(_), Some(_)) => Err(Error::Config("set at most one of precision_floor and recall_floor".into())),
            (Some(p), None) => Ok(Constraint::PrecisionFloor(p)),
            (None, Some(r)) => Ok(Constraint::RecallFloor(r)),
            (None, None) => Ok(Constraint::None),
        }
    }

    pub fn axis(&self) -> Axis {
        Axis::new(self.grid_min, self.grid_max, self.grid_step)
    }

    pub fn grid(&self) -> Result<GridSpec> {
        let axis = self.axis();
        let grid = GridSpec {
            alpha: axis,
            beta: axis,
            gamma: axis,
            objective: self.objective,
            constraint: self.constraint()?,
            precision_levels: self.precision_levels.clone(),
        };
        grid.validate()?;
        Ok(grid)
    }
}

impl ExperimentConfig {
    pub fn new(dataset: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            name: default_name(),
            dataset: dataset.into(),
            seed: 0,
            out: default_out(),
            cache: None,
            jobs: None,
            split: SplitConfig::default(),
            predictor: PredictorConfig::default(),
            clustering: None,
            evaluation: EvaluationConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML file and applies `key=value` overrides (dotted paths or
    /// bare leaf names) before validation. Relative paths in the file are
    /// resolved against the current directory.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut value: toml::Table =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        apply_overrides(&mut value, overrides)?;
        Self::from_table(value)
    }

    /// Builds a config from overrides alone; `dataset` must be among them.
    pub fn from_overrides(overrides: &[(String, String)]) -> Result<Self> {
        let mut value = toml::Table::new();
        apply_overrides(&mut value, overrides)?;
        Self::from_table(value)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to toml")
    }

    pub fn validate(&self) -> Result<()> {
        self.split.spec(self.seed).validate()?;
        if self.predictor.k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if let Some(c) = &self.clustering {
            if c.c == 0 {
                return Err(Error::Config("c must be positive".into()));
            }
            if c.algorithm == ClusterMethod::Fcm && (c.fuzzy_degree.is_nan() || c.fuzzy_degree <= 1.0) {
                return Err(Error::Config("fuzzy_degree must exceed 1".into()));
            }
            if c.epsilon.is_nan() || c.epsilon <= 0.0 {
                return Err(Error::Config("epsilon must be positive".into()));
            }
            if c.sigma.is_some_and(|s| s.is_nan() || s <= 0.0) {
                return Err(Error::Config("sigma must be positive".into()));
            }
        }
        if self.jobs == Some(0) {
            return Err(Error::Config("jobs must be positive".into()));
        }
        self.evaluation.fixed_thresholds()?;
        self.evaluation.grid()?;
        if let Some(t) = self.evaluation.threshold {
            ThresholdConfig::baseline(t, self.evaluation.delta_pref).validate()?;
        }
        if let Some(h) = self.evaluation.tuning_holdout {
            if !(h > 0.0 && h < 1.0) {
                return Err(Error::Config("tuning_holdout must lie in (0, 1)".into()));
            }
        }
        Ok(())
    }

    /// Checks that referenced input files exist.
    pub fn check_inputs(&self) -> Result<()> {
        if !self.dataset.is_file() {
            return Err(Error::Config(format!("dataset {} does not exist", self.dataset.display())));
        }
        Ok(())
    }
}

/// Config keys reachable by bare leaf name; every leaf is unique.
pub const CONFIG_KEYS: &[&str] = &[
    "name",
    "dataset",
    "seed",
    "out",
    "cache",
    "jobs",
    "split.mode",
    "split.test_fraction",
    "split.test_user_rating_range",
    "split.retained_ratings_range",
    "predictor.method",
    "predictor.k",
    "clustering.algorithm",
    "clustering.c",
    "clustering.sigma",
    "clustering.kmeans_restarts",
    "clustering.kmeans_max_iters",
    "clustering.fuzzy_degree",
    "clustering.epsilon",
    "clustering.max_iters",
    "evaluation.delta_pref",
    "evaluation.alpha",
    "evaluation.beta",
    "evaluation.gamma",
    "evaluation.threshold",
    "evaluation.objective",
    "evaluation.precision_floor",
    "evaluation.recall_floor",
    "evaluation.grid_min",
    "evaluation.grid_max",
    "evaluation.grid_step",
    "evaluation.precision_levels",
    "evaluation.tuning_holdout",
];

/// Resolves a bare leaf name (`k`, `test-fraction`) or dotted path to its
/// full dotted path.
pub fn resolve_key(key: &str) -> Result<&'static str> {
    let key = key.replace('-', "_");
    CONFIG_KEYS
        .iter()
        .find(|full| **full == key || full.rsplit('.').next() == Some(key.as_str()))
        .copied()
        .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))
}

/// Parses `raw` as a TOML literal, falling back to a plain string.
fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies overrides in order. `clustering.algorithm = none` removes the
/// clustering section.
pub fn apply_overrides(root: &mut toml::Table, overrides: &[(String, String)]) -> Result<()> {
    for (key, raw) in overrides {
        let path = resolve_key(key)?;
        if path == "clustering.algorithm" && raw == "none" {
            root.remove("clustering");
            continue;
        }
        let mut table = &mut *root;
        let mut parts = path.split('.').peekable();
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                table.insert(part.to_string(), parse_literal(raw));
                break;
            }
            table = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{part}` is not a section")))?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// hashing and caching

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Key of a stage: code version, stage name, upstream keys and the stage's
/// own configuration.
pub fn stage_key(stage: &str, upstream: &[&str], config: &serde_json::Value) -> String {
    let mut h = Sha256::new();
    for part in [CODE_VERSION, stage].into_iter().chain(upstream.iter().copied()) {
        h.update(part.as_bytes());
        h.update([0]);
    }
    h.update(config.to_string().as_bytes());
    hex::encode(h.finalize())
}

/// Content-addressed cache. Each entry is a payload file plus a `.sha256`
/// companion holding the stage key and the payload digest; an entry whose
/// digest does not match is ignored and recomputed.
#[derive(Debug, Clone)]
pub struct StageCache {
    dir: Option<PathBuf>,
}

impl StageCache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        StageCache { dir }
    }

    pub fn disabled() -> Self {
        StageCache { dir: None }
    }

    fn paths(&self, stage: &str, key: &str, ext: &str) -> Option<(PathBuf, PathBuf)> {
        let dir = self.dir.as_ref()?;
        let payload = dir.join(format!("{stage}-{}.{ext}", &key[..16]));
        let mut check = payload.clone().into_os_string();
        check.push(".sha256");
        Some((payload, check.into()))
    }

    /// Payload path if a verified entry exists.
    fn verified(&self, stage: &str, key: &str, ext: &str) -> Option<PathBuf> {
        let (payload, check) = self.paths(stage, key, ext)?;
        let recorded = fs::read_to_string(&check).ok()?;
        let mut it = recorded.split_whitespace();
        if it.next() != Some(key) {
            return None;
        }
        let digest = it.next()?;
        match file_sha256(&payload) {
            Ok(actual) if actual == digest => Some(payload),
            Ok(_) => {
                warn!("cache entry {} failed verification, recomputing", payload.display());
                None
            }
            Err(_) => None,
        }
    }

    fn seal(&self, payload: &Path, check: &Path, key: &str) -> Result<()> {
        let digest = file_sha256(payload)?;
        fs::write(check, format!("{key} {digest}\n")).map_err(|e| Error::io(check, e))
    }

    fn ensure_dir(&self) -> Result<()> {
        if let Some(dir) = &self.dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(())
    }

    pub fn load_json<T: DeserializeOwned>(&self, stage: &str, key: &str) -> Option<T> {
        let path = self.verified(stage, key, "json")?;
        let text = fs::read_to_string(path).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn store_json<T: Serialize>(&self, stage: &str, key: &str, value: &T) -> Result<()> {
        let Some((payload, check)) = self.paths(stage, key, "json") else {
            return Ok(());
        };
        self.ensure_dir()?;
        fs::write(&payload, serde_json::to_vec(value)?).map_err(|e| Error::io(&payload, e))?;
        self.seal(&payload, &check, key)
    }

    pub fn load_similarity(&self, key: &str, kind: SimilarityKind) -> Option<SimilarityMatrix> {
        let path = self.verified("similarity", key, "bin")?;
        SimilarityMatrix::read_cache(&path, kind, key).ok().flatten()
    }

    pub fn store_similarity(&self, key: &str, sims: &SimilarityMatrix) -> Result<()> {
        let Some((payload, check)) = self.paths("similarity", key, "bin") else {
            return Ok(());
        };
        self.ensure_dir()?;
        sims.write_cache(&payload, key)?;
        self.seal(&payload, &check, key)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub key: String,
    pub cache_hit: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClusterCache {
    method: ClusterMethod,
    c: usize,
    assignment: Vec<usize>,
}

// ---------------------------------------------------------------------------
// artifacts

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub code_version: String,
    pub config_sha256: String,
    pub artifacts: Vec<Artifact>,
}

/// Writes `manifest.json` listing every file under `out` (sorted), skipping
/// the manifest itself and anything under `skip_dirs`.
pub fn write_manifest(out: &Path, name: &str, config_toml: &str, skip_dirs: &[&Path]) -> Result<Manifest> {
    fn walk(dir: &Path, files: &mut Vec<PathBuf>, skip: &[&Path]) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if skip.iter().any(|s| path.starts_with(s)) {
                continue;
            }
            if path.is_dir() {
                walk(&path, files, skip)?;
            } else {
                files.push(path);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(out, &mut files, skip_dirs)?;
    let mut artifacts = Vec::new();
    for f in files {
        let rel = f.strip_prefix(out).unwrap_or(&f).to_string_lossy().replace('\\', "/");
        if rel == MANIFEST_FILE {
            continue;
        }
        let bytes = fs::read(&f).map_err(|e| Error::io(&f, e))?;
        artifacts.push(Artifact { path: rel, sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 });
    }
    artifacts.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest {
        name: name.to_string(),
        code_version: CODE_VERSION.to_string(),
        config_sha256: sha256_hex(config_toml.as_bytes()),
        artifacts,
    };
    let path = out.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// running

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Ingest,
    Split,
    Similarity,
    Predict,
    Cluster,
    Evaluate,
    Sweep,
}

impl Target {
    pub fn as_str(self) -> &'static str {
        match self {
            Target::Ingest => "ingest",
            Target::Split => "split",
            Target::Similarity => "similarity",
            Target::Predict => "predict",
            Target::Cluster => "cluster",
            Target::Evaluate => "evaluate",
            Target::Sweep => "sweep",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub ratings: usize,
    pub users: usize,
    pub items: usize,
    pub duplicates: usize,
    pub sparsity: f64,
    pub content_hash: String,
}

/// Best points of a sweep pair, plus the matched-precision rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    /// `test` when thresholds are chosen on the scored pairs themselves,
    /// `validation` in tuning mode.
    pub selection: String,
    pub proposed: Option<GridPoint>,
    pub proposed_evaluated: usize,
    pub proposed_feasible: usize,
    pub baseline: Option<GridPoint>,
    pub matched_precision: Vec<MatchedPrecision>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub held_out: Option<HeldOut>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOut {
    pub tuning_pairs: usize,
    pub holdout_pairs: usize,
    pub proposed: Option<EvaluationReport>,
    pub baseline: Option<EvaluationReport>,
}

/// Everything a run produced. Only `stages` differs between a cold and a
/// warm run; it is never written to disk.
#[derive(Debug, Clone)]
pub struct RunBundle {
    pub out: PathBuf,
    pub stages: Vec<StageRecord>,
    pub ingest: Option<IngestSummary>,
    pub split_users: Option<(usize, usize)>,
    pub reports: BTreeMap<String, EvaluationReport>,
    pub sweep: Option<SweepResult>,
    pub baseline_sweep: Option<SweepResult>,
    pub summary: Option<SweepSummary>,
    pub manifest: Option<Manifest>,
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    cache: StageCache,
    out: PathBuf,
    stages: Vec<StageRecord>,
}

impl Runner<'_> {
    fn record(&mut self, stage: &str, key: &str, cache_hit: bool) {
        info!("{stage}: {} ({})", if cache_hit { "cache hit" } else { "computed" }, &key[..12]);
        self.stages.push(StageRecord { stage: stage.into(), key: key.into(), cache_hit });
    }

    fn similarity(&mut self, train: &RatingsDataset, kind: SimilarityKind) -> Result<(SimilarityMatrix, String)> {
        let key = stage_key("similarity", &[&train.content_hash()], &serde_json::json!(kind.as_str()));
        if let Some(m) = self.cache.load_similarity(&key, kind) {
            self.record("similarity", &key, true);
            return Ok((m, key));
        }
        let m = build_similarity_matrix(train, kind);
        self.cache.store_similarity(&key, &m)?;
        self.record("similarity", &key, false);
        Ok((m, key))
    }

    fn predictions(
        &mut self,
        train: &RatingsDataset,
        test: &RatingsDataset,
        sims: &SimilarityMatrix,
        sim_key: &str,
    ) -> Result<(PredictionSet, String)> {
        let p = &self.cfg.predictor;
        let key = stage_key("predict", &[sim_key, &test.content_hash()], &serde_json::to_value(p)?);
        if let Some(c) = self.cache.load_json::<PredictionCache>("predict", &key) {
            self.record("predict", &key, true);
            return Ok((PredictionSet::from_cache(c), key));
        }
        let predictor = Predictor::new(p.method, train, sims, p.k)?;
        let set = predict_all(&test.pairs(), &predictor)?;
        self.cache.store_json("predict", &key, &set.to_cache())?;
        self.record("predict", &key, false);
        Ok((set, key))
    }

    fn clusters(&mut self, dist: &DistanceMatrix, user_sim_key: &str, cc: &ClusteringConfig) -> Result<ClusterModel> {
        let key = stage_key("cluster", &[user_sim_key], &cc.effective(self.cfg.seed));
        if let Some(c) = self.cache.load_json::<ClusterCache>("cluster", &key) {
            if let Ok(model) = ClusterModel::new(c.method, c.c, c.assignment, None) {
                self.record("cluster", &key, true);
                return Ok(model);
            }
        }
        let model = match cc.algorithm {
            ClusterMethod::Spectral => spectral_cluster(dist, &cc.spectral(self.cfg.seed))?,
            ClusterMethod::Fcm => fcm_cluster(&distance_features(dist), &cc.fcm(self.cfg.seed))?,
        };
        let entry = ClusterCache { method: model.method(), c: model.c(), assignment: model.assignment().to_vec() };
        self.cache.store_json("cluster", &key, &entry)?;
        self.record("cluster", &key, false);
        Ok(model)
    }
}

/// Runs every stage up to `target`, writing artifacts under `cfg.out`.
pub fn run_pipeline(cfg: &ExperimentConfig, target: Target) -> Result<RunBundle> {
    match cfg.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(|| run_inner(cfg, target)),
        None => run_inner(cfg, target),
    }
}

fn staged<T>(stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(stage))
}

fn run_inner(cfg: &ExperimentConfig, target: Target) -> Result<RunBundle> {
    cfg.validate()?;
    cfg.check_inputs()?;
    let out = cfg.out.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let config_toml = cfg.to_toml();
    write_text(&out.join("config.toml"), &config_toml)?;

    let mut run = Runner { cfg, cache: StageCache::new(cfg.cache.clone()), out: out.clone(), stages: Vec::new() };
    let mut bundle = RunBundle {
        out: out.clone(),
        stages: Vec::new(),
        ingest: None,
        split_users: None,
        reports: BTreeMap::new(),
        sweep: None,
        baseline_sweep: None,
        summary: None,
        manifest: None,
    };

    // ingest
    let data = staged("ingest", load_movielens(&cfg.dataset))?;
    let ingest = IngestSummary {
        ratings: data.len(),
        users: data.n_users(),
        items: data.n_items(),
        duplicates: data.duplicates(),
        sparsity: staged("ingest", sparsity(&data))?,
        content_hash: data.content_hash(),
    };
    write_json(&out.join("ingest.json"), &ingest)?;
    run.record("ingest", &ingest.content_hash, false);
    bundle.ingest = Some(ingest);

    let finish = |mut bundle: RunBundle, run: Runner<'_>| -> Result<RunBundle> {
        bundle.manifest = Some(write_manifest(&run.out, &cfg.name, &config_toml, &[])?);
        bundle.stages = run.stages;
        Ok(bundle)
    };
    if target == Target::Ingest {
        return finish(bundle, run);
    }

    // split
    let spec = cfg.split.spec(cfg.seed);
    let Split { train, test, test_users } = staged("split", split(&data, &spec))?;
    let split_manifest = staged(
        "split",
        write_split(
            &out.join("split"),
            &data,
            &spec,
            &Split { train: train.clone(), test: test.clone(), test_users: test_users.clone() },
        ),
    )?;
    bundle.split_users = Some((split_manifest.test_users, split_manifest.training_only_users));
    run.record("split", &split_manifest.train.content_hash, false);
    if target == Target::Split {
        return finish(bundle, run);
    }

    // similarity: the predictor's kind, and user PCC for clustering
    let pred_kind = cfg.predictor.method.similarity_kind();
    let (pred_sims, pred_sim_key) = staged("similarity", run.similarity(&train, pred_kind))?;
    let user_sims = match (&cfg.clustering, pred_kind) {
        (Some(_), SimilarityKind::ItemCosine) => {
            Some(staged("similarity", run.similarity(&train, SimilarityKind::UserPcc))?)
        }
        _ => None,
    };
    let sim_summary = serde_json::json!({
        "kind": pred_kind.as_str(),
        "n": pred_sims.len(),
        "key": pred_sim_key,
    });
    write_json(&out.join("similarity.json"), &sim_summary)?;
    if target == Target::Similarity {
        return finish(bundle, run);
    }

    // predict
    let (preds, _) = staged("predict", run.predictions(&train, &test, &pred_sims, &pred_sim_key))?;
    staged("predict", preds.write_csv(&out.join("predictions.csv"), &train))?;
    staged("predict", preds.write_sidecar(&out.join("predictions.json"), &test.content_hash()))?;
    if target == Target::Predict {
        return finish(bundle, run);
    }

    // cluster
    let clustering = match &cfg.clustering {
        Some(cc) => {
            let (user_sims, user_key) = match &user_sims {
                Some((m, k)) => (m, k.as_str()),
                None => (&pred_sims, pred_sim_key.as_str()),
            };
            let dist = staged("cluster", DistanceMatrix::from_similarity(user_sims))?;
            let model = staged("cluster", run.clusters(&dist, user_key, cc))?;
            staged("cluster", model.write_csv(&out.join("clusters.csv"), &train))?;
            write_sidecar(
                &out.join("clusters.json"),
                &ClusterSidecar {
                    method: model.method(),
                    c: model.c(),
                    config: cc.effective(cfg.seed),
                    seed: cfg.seed,
                    sizes: model.sizes(),
                    empty_clusters: model.empty_clusters(),
                    dataset_hash: train.content_hash(),
                },
            )?;
            let validity = staged("cluster", cluster_validity(&dist, &model))?;
            write_json(&out.join("validity.json"), &validity)?;
            let averages = staged("cluster", cluster_item_average(&train, &model))?;
            Some((model, averages))
        }
        None if target == Target::Cluster => {
            return Err(Error::Config("the cluster stage needs a [clustering] section".into()));
        }
        None => None,
    };
    if target == Target::Cluster {
        return finish(bundle, run);
    }

    let set = EvaluationSet::build(
        &test,
        &preds,
        clustering.as_ref().map(|(m, a): &(ClusterModel, ClusterItemAverages)| (a, m)),
    );
    let ev = &cfg.evaluation;

    if target == Target::Evaluate {
        let fixed = ev.fixed_thresholds()?;
        if fixed.is_none() && ev.threshold.is_none() {
            return Err(Error::Config("evaluate needs alpha/beta/gamma or threshold; use sweep to search".into()));
        }
        if let Some(t) = fixed {
            if clustering.is_none() {
                return Err(Error::Config("alpha/beta/gamma need a [clustering] section".into()));
            }
            let report = set.report(DecisionRule::Ipu(t));
            report.write_json(&out.join("report_proposed.json"))?;
            bundle.reports.insert("proposed".into(), report);
        }
        if let Some(t) = ev.threshold {
            let report = set.report(DecisionRule::Baseline { threshold: t, delta_pref: ev.delta_pref });
            report.write_json(&out.join("report_baseline.json"))?;
            bundle.reports.insert("baseline".into(), report);
        }
        let mut csv = format!("rule,{REPORT_CSV_HEADER}\n");
        for (name, r) in &bundle.reports {
            let _ = writeln!(csv, "{name},{}", r.csv_row());
        }
        write_text(&out.join("reports.csv"), &csv)?;
        return finish(bundle, run);
    }

    // sweep
    let (tune, hold) = match ev.tuning_holdout {
        Some(h) => {
            let (a, b) = staged("sweep", validation_split(&set, h, cfg.seed))?;
            (a, Some(b))
        }
        None => (set, None),
    };
    let grid = ev.grid()?;
    let base = staged("sweep", sweep_baseline(&tune, &ev.axis(), grid.objective, grid.constraint, ev.delta_pref))?;
    base.write_csv(&out.join("sweep_baseline.csv"), false)?;
    base.write_summary(&out.join("sweep_baseline.json"))?;
    let proposed = match &clustering {
        Some(_) => {
            let r = staged("sweep", sweep_pairs(&tune, &grid, ev.delta_pref))?;
            r.write_csv(&out.join("sweep.csv"), false)?;
            r.write_summary(&out.join("sweep.json"))?;
            Some(r)
        }
        None => None,
    };
    let matched = match &proposed {
        Some(p) => ev.precision_levels.iter().filter_map(|&lvl| matched_precision(&base, p, lvl)).collect(),
        None => Vec::new(),
    };
    let held_out = hold.map(|hold| {
        let proposed = proposed.as_ref().and_then(|p| p.best).map(|b| {
            let t = ThresholdConfig::new(b.alpha, b.beta, b.gamma).with_delta_pref(ev.delta_pref);
            hold.report(DecisionRule::Ipu(t))
        });
        let baseline =
            base.best.map(|b| hold.report(DecisionRule::Baseline { threshold: b.alpha, delta_pref: ev.delta_pref }));
        HeldOut { tuning_pairs: tune.pairs.len(), holdout_pairs: hold.pairs.len(), proposed, baseline }
    });
    let summary = SweepSummary {
        selection: if held_out.is_some() { "validation" } else { "test" }.into(),
        proposed: proposed.as_ref().and_then(|p| p.best),
        proposed_evaluated: proposed.as_ref().map_or(0, |p| p.evaluated),
        proposed_feasible: proposed.as_ref().map_or(0, |p| p.feasible),
        baseline: base.best,
        matched_precision: matched,
        held_out,
    };
    write_json(&out.join("summary.json"), &summary)?;
    bundle.summary = Some(summary);
    bundle.sweep = proposed;
    bundle.baseline_sweep = Some(base);
    finish(bundle, run)
}

// ---------------------------------------------------------------------------
// table reproduction

/// Precision targets for the matched-precision table.
pub const DEFAULT_PRECISION_TARGETS: &[f64] = &[0.745, 0.72, 0.707, 0.652, 0.604];

/// The five experiment families, as configs rooted at `out`.
pub fn family_configs(dataset: &Path, seed: u64, out: &Path, cache: Option<&Path>) -> Vec<ExperimentConfig> {
    let families: [(&str, PredictionMethod, ClusterMethod, SplitMode); 5] = [
        ("item_spectral", PredictionMethod::ItemBased, ClusterMethod::Spectral, SplitMode::RandomHoldout),
        ("item_fcm", PredictionMethod::ItemBased, ClusterMethod::Fcm, SplitMode::RandomHoldout),
        ("user_spectral", PredictionMethod::UserBased, ClusterMethod::Spectral, SplitMode::RandomHoldout),
        ("user_fcm", PredictionMethod::UserBased, ClusterMethod::Fcm, SplitMode::RandomHoldout),
        ("cold_start", PredictionMethod::ItemBased, ClusterMethod::Spectral, SplitMode::ColdStartMask),
    ];
    families
        .into_iter()
        .map(|(name, method, algorithm, mode)| {
            let mut cfg = ExperimentConfig::new(dataset);
            cfg.name = name.into();
            cfg.seed = seed;
            cfg.out = out.join(name);
            cfg.cache = cache.map(Path::to_path_buf);
            cfg.split.mode = mode;
            cfg.predictor.method = method;
            cfg.clustering = Some(ClusteringConfig { algorithm, ..Default::default() });
            cfg.evaluation.precision_levels = DEFAULT_PRECISION_TARGETS.to_vec();
            cfg
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyResult {
    pub name: String,
    pub proposed: Option<GridPoint>,
    pub baseline: Option<GridPoint>,
    pub matched_precision: Vec<MatchedPrecision>,
    pub test_users: usize,
    pub training_only_users: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reproduction {
    pub seed: u64,
    pub families: Vec<FamilyResult>,
}

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

fn point_row(label: &str, p: Option<&GridPoint>, with_thresholds: bool) -> String {
    match p {
        Some(p) if with_thresholds => format!(
            "{label},{},{},{},{},{},{}",
            p.gamma,
            p.alpha,
            p.beta,
            fmt4(p.precision),
            fmt4(p.recall),
            fmt4(p.f1)
        ),
        Some(p) => format!("{label},{},{},{}", fmt4(p.precision), fmt4(p.recall), fmt4(p.f1)),
        None if with_thresholds => format!("{label},,,,,,"),
        None => format!("{label},,,"),
    }
}

/// Runs every family sweep and writes side-by-side tables under `out`:
/// `matched_precision.csv`, `item_based.csv`, `user_based.csv`,
/// `cold_start.csv`, and `tables.json`.
pub fn reproduce_tables(dataset: &Path, seed: u64, out: &Path, cache: Option<&Path>) -> Result<Reproduction> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let default_cache = out.join("cache");
    let cache = cache.unwrap_or(&default_cache);
    let mut families = Vec::new();
    for cfg in family_configs(dataset, seed, out, Some(cache)) {
        let bundle = run_pipeline(&cfg, Target::Sweep)?;
        let summary = bundle.summary.expect("sweep target writes a summary");
        let (test_users, training_only_users) = bundle.split_users.unwrap_or_default();
        families.push(FamilyResult {
            name: cfg.name,
            proposed: summary.proposed,
            baseline: summary.baseline,
            matched_precision: summary.matched_precision,
            test_users,
            training_only_users,
        });
    }
    let by_name = |n: &str| families.iter().find(|f| f.name == n).expect("family present");

    let mut matched = String::from("target,precision,baseline_recall,baseline_f1,proposed_recall,proposed_f1\n");
    for m in &by_name("item_spectral").matched_precision {
        let opt = |v: Option<f64>| v.map(fmt4).unwrap_or_default();
        let _ = writeln!(
            matched,
            "{},{},{},{},{},{}",
            m.target,
            fmt4(m.baseline.precision),
            fmt4(m.baseline.recall),
            fmt4(m.baseline.f1),
            opt(m.proposed_recall),
            opt(m.proposed_f1)
        );
    }
    write_text(&out.join("matched_precision.csv"), &matched)?;

    for (file, spectral, fcm) in
        [("item_based.csv", "item_spectral", "item_fcm"), ("user_based.csv", "user_spectral", "user_fcm")]
    {
        let mut t = String::from("clustering,gamma,alpha,beta,precision,recall,f1\n");
        for (label, fam) in [("Spectral", spectral), ("FCM", fcm), ("Baseline", spectral)] {
            let f = by_name(fam);
            let p = if label == "Baseline" { f.baseline.as_ref() } else { f.proposed.as_ref() };
            let _ = writeln!(t, "{}", point_row(label, p, true));
        }
        write_text(&out.join(file), &t)?;
    }

    let cold = by_name("cold_start");
    let mut t = String::from("method,precision,recall,f1\n");
    let _ = writeln!(t, "{}", point_row("Baseline", cold.baseline.as_ref(), false));
    let _ = writeln!(t, "{}", point_row("Proposed", cold.proposed.as_ref(), false));
    write_text(&out.join("cold_start.csv"), &t)?;

    let repro = Reproduction { seed, families };
    write_json(&out.join("tables.json"), &repro)?;
    Ok(repro)
}
