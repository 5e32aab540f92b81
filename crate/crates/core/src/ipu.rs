//! The cluster-gated decision rule (incentive and penalty thresholds) and its
//! evaluation.
//!
//! Every test pair `(u, i)` with a predicted rating `r̂` is routed by the
//! cluster-item average `C̄` of `u`'s cluster on `i`:
//!
//! * `C̄ ≥ γ` (incentive): recommend iff `r̂ ≥ β`;
//! * `C̄ < γ` or no cluster member rated `i` (penalty): recommend iff `r̂ ≥ α`.
//!
//! The recommendation is then scored against the real rating with the
//! satisfaction cutoff `δ_pref`. All comparisons are closed (`≥`).

use std::fs;
use std::ops::{Add, AddAssign};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterModel;
use crate::dataset::{ItemId, RatingsDataset, UserId};
use crate::error::{Error, Result};
use crate::predictor::PredictionSet;

pub const DEFAULT_DELTA_PREF: f64 = 4.0;

/// Mean training rating of each item inside each cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterItemAverages {
    c: usize,
    n_items: usize,
    sums: Vec<f64>,
    counts: Vec<u32>,
}

impl ClusterItemAverages {
    #[inline]
    pub fn get(&self, cluster: usize, item: ItemId) -> Option<f64> {
        if cluster >= self.c || item.index() >= self.n_items {
            return None;
        }
        let k = cluster * self.n_items + item.index();
        (self.counts[k] > 0).then(|| self.sums[k] / self.counts[k] as f64)
    }

    /// Number of cluster members who rated the item in training.
    pub fn count(&self, cluster: usize, item: ItemId) -> u32 {
        if cluster >= self.c || item.index() >= self.n_items {
            return 0;
        }
        self.counts[cluster * self.n_items + item.index()]
    }

    pub fn clusters(&self) -> usize {
        self.c
    }
}

/// `C̄_c^i = Σ_{u ∈ U_{i,c}} r_{u,i} / |U_{i,c}|` for every (cluster, item)
/// with at least one training rating.
pub fn cluster_item_average(train: &RatingsDataset, model: &ClusterModel) -> Result<ClusterItemAverages> {
    if model.len() < train.user_capacity() {
        return Err(Error::Validation(format!(
            "cluster model covers {} users, training set indexes {}",
            model.len(),
            train.user_capacity()
        )));
    }
    let c = model.c();
    let n_items = train.item_capacity();
    let mut sums = vec![0.0; c * n_items];
    let mut counts = vec![0u32; c * n_items];
    for r in train.ratings() {
        let k = model.assignment()[r.user.index()] * n_items + r.item.index();
        sums[k] += r.value;
        counts[k] += 1;
    }
    Ok(ClusterItemAverages { c, n_items, sums, counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    /// Bar for items that fail the cluster gate.
    pub alpha: f64,
    /// Bar for items that pass the cluster gate.
    pub beta: f64,
    /// Cluster-average gate.
    pub gamma: f64,
    /// Real ratings at or above this count as satisfied.
    #[serde(default = "default_delta_pref")]
    pub delta_pref: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_recall: Option<f64>,
}

fn default_delta_pref() -> f64 {
    DEFAULT_DELTA_PREF
}

impl ThresholdConfig {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        ThresholdConfig {
            alpha,
            beta,
            gamma,
            delta_pref: DEFAULT_DELTA_PREF,
            delta_precision: None,
            delta_recall: None,
        }
    }

    /// The rule without clustering: one threshold, gate at zero.
    pub fn baseline(threshold: f64, delta_pref: f64) -> Self {
        ThresholdConfig { delta_pref, ..Self::new(threshold, threshold, 0.0) }
    }

    pub fn with_delta_pref(mut self, delta_pref: f64) -> Self {
        self.delta_pref = delta_pref;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.delta_pref];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("thresholds must be finite and non-negative: {self:?}")));
        }
        if self.alpha < self.beta {
            return Err(Error::Config(format!("alpha ({}) must be at least beta ({})", self.alpha, self.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Recommend,
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    TruePositive,
    FalsePositive,
    FalseNegative,
    TrueNegative,
}

#[inline]
pub fn ipu_decide(predicted: f64, cbar: Option<f64>, cfg: &ThresholdConfig) -> Decision {
    let bar = match cbar {
        Some(c) if c >= cfg.gamma => cfg.beta,
        _ => cfg.alpha,
    };
    if predicted >= bar {
        Decision::Recommend
    } else {
        Decision::Drop
    }
}

#[inline]
pub fn classify_pair(predicted: f64, actual: f64, cbar: Option<f64>, cfg: &ThresholdConfig) -> Outcome {
    let satisfied = actual >= cfg.delta_pref;
    match (ipu_decide(predicted, cbar, cfg), satisfied) {
        (Decision::Recommend, true) => Outcome::TruePositive,
        (Decision::Recommend, false) => Outcome::FalsePositive,
        (Decision::Drop, true) => Outcome::FalseNegative,
        (Decision::Drop, false) => Outcome::TrueNegative,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn record(&mut self, outcome: Outcome) {
        match outcome {
            Outcome::TruePositive => self.tp += 1,
            Outcome::FalsePositive => self.fp += 1,
            Outcome::FalseNegative => self.fn_ += 1,
            Outcome::TrueNegative => self.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn metrics(&self) -> Metrics {
        Metrics::from_counts(self)
    }
}

impl Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: ConfusionCounts) {
        *self = *self + o;
    }
}

/// Which metrics hit a zero denominator and were reported as 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegenerateFlags {
    pub precision: bool,
    pub recall: bool,
    pub f1: bool,
}

impl DegenerateFlags {
    pub fn any(&self) -> bool {
        self.precision || self.recall || self.f1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate: DegenerateFlags,
}

impl Metrics {
    pub fn from_counts(c: &ConfusionCounts) -> Metrics {
        let mut degenerate = DegenerateFlags::default();
        let ratio = |num: u64, den: u64, flag: &mut bool| {
            if den == 0 {
                *flag = true;
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(c.tp, c.tp + c.fp, &mut degenerate.precision);
        let recall = ratio(c.tp, c.tp + c.fn_, &mut degenerate.recall);
        // Harmonic mean written over counts: one rounding, so equal
        // ratios compare equal during threshold search.
        let f1 = if c.tp > 0 {
            (2 * c.tp) as f64 / (2 * c.tp + c.fp + c.fn_) as f64
        } else {
            degenerate.f1 = true;
            0.0
        };
        Metrics { precision, recall, f1, degenerate }
    }
}

/// A test pair ready for the decision rule: prediction, truth, and the
/// cluster average that gates it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub user: UserId,
    pub item: ItemId,
    pub predicted: f64,
    pub actual: f64,
    pub cbar: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationSet {
    pub pairs: Vec<ScoredPair>,
    /// Test pairs without a prediction.
    pub skipped: usize,
}

impl EvaluationSet {
    /// Joins test ratings with predictions and, when a clustering is
    /// given, the cluster-item averages.
    pub fn build(
        test: &RatingsDataset,
        preds: &PredictionSet,
        clusters: Option<(&ClusterItemAverages, &ClusterModel)>,
    ) -> EvaluationSet {
        let mut pairs = Vec::with_capacity(test.len());
        let mut skipped = 0;
        for r in test.ratings() {
            let Some(predicted) = preds.get(r.user, r.item) else {
                skipped += 1;
                continue;
            };
            let cbar = clusters.and_then(|(avg, model)| avg.get(model.cluster_of(r.user)?, r.item));
            pairs.push(ScoredPair { user: r.user, item: r.item, predicted, actual: r.value, cbar });
        }
        EvaluationSet { pairs, skipped }
    }

    pub fn counts(&self, cfg: &ThresholdConfig) -> ConfusionCounts {
        self.pairs
            .par_iter()
            .fold(ConfusionCounts::default, |mut acc, p| {
                acc.record(classify_pair(p.predicted, p.actual, p.cbar, cfg));
                acc
            })
            .reduce(ConfusionCounts::default, |a, b| a + b)
    }

    pub fn report(&self, rule: DecisionRule) -> EvaluationReport {
        let cfg = rule.thresholds();
        let counts = self.counts(&cfg);
        EvaluationReport::new(counts, rule, self.pairs.len(), self.skipped)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum DecisionRule {
    Ipu(ThresholdConfig),
    Baseline { threshold: f64, delta_pref: f64 },
}

impl DecisionRule {
    pub fn thresholds(&self) -> ThresholdConfig {
        match *self {
            DecisionRule::Ipu(cfg) => cfg,
            DecisionRule::Baseline { threshold, delta_pref } => ThresholdConfig::baseline(threshold, delta_pref),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate: DegenerateFlags,
    pub config: DecisionRule,
    pub pairs_evaluated: usize,
    pub pairs_skipped: usize,
}

pub const REPORT_CSV_HEADER: &str =
    "rule,alpha,beta,gamma,delta_pref,tp,fp,fn,tn,precision,recall,f1,pairs_evaluated,pairs_skipped";

impl EvaluationReport {
    pub fn new(counts: ConfusionCounts, config: DecisionRule, pairs_evaluated: usize, pairs_skipped: usize) -> Self {
        let m = counts.metrics();
        EvaluationReport {
            counts,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            degenerate: m.degenerate,
            config,
            pairs_evaluated,
            pairs_skipped,
        }
    }

    pub fn csv_row(&self) -> String {
        let t = self.config.thresholds();
        let rule = match self.config {
            DecisionRule::Ipu(_) => "ipu",
            DecisionRule::Baseline { .. } => "baseline",
        };
        let c = &self.counts;
        format!(
            "{rule},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            t.alpha,
            t.beta,
            t.gamma,
            t.delta_pref,
            c.tp,
            c.fp,
            c.fn_,
            c.tn,
            self.precision,
            self.recall,
            self.f1,
            self.pairs_evaluated,
            self.pairs_skipped
        )
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, format!("{REPORT_CSV_HEADER}\n{}\n", self.csv_row())).map_err(|e| Error::io(path, e))
    }
}

/// Scores the IPU rule over all predicted test pairs.
pub fn evaluate(
    test: &RatingsDataset,
    preds: &PredictionSet,
    averages: &ClusterItemAverages,
    model: &ClusterModel,
    cfg: &ThresholdConfig,
) -> Result<EvaluationReport> {
    cfg.validate()?;
    let set = EvaluationSet::build(test, preds, Some((averages, model)));
    Ok(set.report(DecisionRule::Ipu(*cfg)))
}

/// Scores the single-threshold rule `r̂ ≥ threshold` with no clustering.
pub fn evaluate_baseline(
    test: &RatingsDataset,
    preds: &PredictionSet,
    threshold: f64,
    delta_pref: f64,
) -> Result<EvaluationReport> {
    if !threshold.is_finite() || threshold < 0.0 {
        return Err(Error::Config(format!("baseline threshold must be non-negative, got {threshold}")));
    }
    let set = EvaluationSet::build(test, preds, None);
    Ok(set.report(DecisionRule::Baseline { threshold, delta_pref }))
}
