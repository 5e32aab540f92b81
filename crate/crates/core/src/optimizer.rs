//! Exhaustive threshold search: maximize F1 (or recall) over an (α, β, γ)
//! grid subject to a precision floor and α ≥ β.
//!
//! Every grid point is evaluated exactly. For a fixed γ the pairs split
//! into an incentive group (gated by β) and a penalty group (gated by α),
//! so the confusion counts at any (α, β) are sums of "how many predictions
//! are ≥ t" queries against four sorted arrays.

use std::cmp::Ordering;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterModel;
use crate::dataset::RatingsDataset;
use crate::error::{Error, Result};
use crate::ipu::{ClusterItemAverages, ConfusionCounts, EvaluationSet, ScoredPair};
use crate::predictor::PredictionSet;

/// Upper bound for any threshold; above the 5-star maximum so that
/// "recommend nothing" is reachable.
pub const MAX_THRESHOLD: f64 = 5.1;

/// Half-width of the precision window used to match frontier levels.
pub const FRONTIER_TOLERANCE: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl Axis {
    pub const fn new(min: f64, max: f64, step: f64) -> Self {
        Axis { min, max, step }
    }

    pub const fn single(v: f64) -> Self {
        Axis { min: v, max: v, step: 1.0 }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Config(format!("{name}: step must be positive")));
        }
        if self.min.is_nan() || self.max.is_nan() || self.min > self.max {
            return Err(Error::Config(format!("{name}: min must not exceed max")));
        }
        if self.min < 0.0 || self.max > MAX_THRESHOLD + 1e-9 {
            return Err(Error::Config(format!("{name}: range must lie within [0, {MAX_THRESHOLD}]")));
        }
        Ok(())
    }

    /// `min + k·step` for every k that stays within `max`, rounded to 1e-9
    /// so nested grids share exact values.
    pub fn values(&self) -> Vec<f64> {
        let n = ((self.max - self.min) / self.step + 1e-9).floor() as usize;
        (0..=n).map(|k| ((self.min + k as f64 * self.step) * 1e9).round() / 1e9).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    F1,
    Recall,
    Precision,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    None,
    PrecisionFloor(f64),
    RecallFloor(f64),
}

impl Constraint {
    pub fn admits(&self, p: &GridPoint) -> bool {
        match *self {
            Constraint::None => true,
            Constraint::PrecisionFloor(f) => p.precision >= f,
            Constraint::RecallFloor(f) => p.recall >= f,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub alpha: Axis,
    pub beta: Axis,
    pub gamma: Axis,
    pub objective: Objective,
    pub constraint: Constraint,
    /// Precision levels reported by the frontier.
    #[serde(default)]
    pub precision_levels: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        let axis = Axis::new(0.0, 5.0, 0.1);
        GridSpec {
            alpha: axis,
            beta: axis,
            gamma: axis,
            objective: Objective::F1,
            constraint: Constraint::PrecisionFloor(0.0),
            precision_levels: Vec::new(),
        }
    }
}

impl GridSpec {
    pub fn uniform(min: f64, max: f64, step: f64) -> Self {
        let axis = Axis::new(min, max, step);
        GridSpec { alpha: axis, beta: axis, gamma: axis, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.alpha.validate("alpha")?;
        self.beta.validate("beta")?;
        self.gamma.validate("gamma")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub feasible: bool,
}

impl GridPoint {
    fn new(alpha: f64, beta: f64, gamma: f64, counts: ConfusionCounts) -> Self {
        let m = counts.metrics();
        GridPoint { alpha, beta, gamma, counts, precision: m.precision, recall: m.recall, f1: m.f1, feasible: false }
    }

    pub fn objective(&self, objective: Objective) -> f64 {
        match objective {
            Objective::F1 => self.f1,
            Objective::Recall => self.recall,
            Objective::Precision => self.precision,
        }
    }

    pub fn csv_row(&self) -> String {
        let c = &self.counts;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.alpha,
            self.beta,
            self.gamma,
            c.tp,
            c.fp,
            c.fn_,
            c.tn,
            self.precision,
            self.recall,
            self.f1,
            self.feasible
        )
    }
}

pub const SWEEP_CSV_HEADER: &str = "alpha,beta,gamma,tp,fp,fn,tn,precision,recall,f1,feasible";

/// Total order used to pick the best point: higher objective, then higher
/// precision, then lower α, β, γ. `Less` means `a` is better.
pub fn rank(a: &GridPoint, b: &GridPoint, objective: Objective) -> Ordering {
    b.objective(objective)
        .total_cmp(&a.objective(objective))
        .then(b.precision.total_cmp(&a.precision))
        .then(a.alpha.total_cmp(&b.alpha))
        .then(a.beta.total_cmp(&b.beta))
        .then(a.gamma.total_cmp(&b.gamma))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierRow {
    pub precision_level: f64,
    /// Grid points whose precision lies within the tolerance of the level.
    pub matched: usize,
    pub best_recall: Option<f64>,
    pub best_f1: Option<f64>,
    pub empty: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Best feasible point; `None` when nothing satisfies the constraint.
    pub best: Option<GridPoint>,
    /// Highest-precision point overall, reported when infeasible.
    pub best_precision: Option<GridPoint>,
    pub frontier: Vec<FrontierRow>,
    pub evaluated: usize,
    pub feasible: usize,
    pub objective: Objective,
    pub constraint: Constraint,
    #[serde(skip)]
    pub points: Vec<GridPoint>,
}

impl SweepResult {
    pub fn is_feasible(&self) -> bool {
        self.best.is_some()
    }

    pub fn write_csv(&self, path: &Path, feasible_only: bool) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "{SWEEP_CSV_HEADER}").map_err(io)?;
        for p in self.points.iter().filter(|p| !feasible_only || p.feasible) {
            writeln!(w, "{}", p.csv_row()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Predictions split by satisfaction, sorted ascending.
#[derive(Debug, Default)]
struct SortedGroup {
    sat: Vec<f64>,
    unsat: Vec<f64>,
}

impl SortedGroup {
    fn from_iter<'a>(pairs: impl Iterator<Item = &'a ScoredPair>, delta_pref: f64) -> Self {
        let mut g = SortedGroup::default();
        for p in pairs {
            if p.actual >= delta_pref {
                g.sat.push(p.predicted);
            } else {
                g.unsat.push(p.predicted);
            }
        }
        g.sat.sort_by(f64::total_cmp);
        g.unsat.sort_by(f64::total_cmp);
        g
    }

    /// (satisfied, unsatisfied) predictions at or above `t`.
    fn count_ge(&self, t: f64) -> (u64, u64) {
        let ge = |v: &[f64]| (v.len() - v.partition_point(|&x| x < t)) as u64;
        (ge(&self.sat), ge(&self.unsat))
    }
}

fn finish(points: Vec<GridPoint>, grid: &GridSpec) -> SweepResult {
    let mut points = points;
    let mut feasible = 0;
    for p in points.iter_mut() {
        p.feasible = grid.constraint.admits(p);
        feasible += p.feasible as usize;
    }
    let best = points.iter().filter(|p| p.feasible).min_by(|a, b| rank(a, b, grid.objective)).copied();
    let best_precision =
        if best.is_none() { points.iter().min_by(|a, b| rank(a, b, Objective::Precision)).copied() } else { None };
    SweepResult {
        best,
        best_precision,
        frontier: precision_frontier(&points, &grid.precision_levels),
        evaluated: points.len(),
        feasible,
        objective: grid.objective,
        constraint: grid.constraint,
        points,
    }
}

/// Evaluates every grid point with α ≥ β over prepared pairs.
pub fn sweep_pairs(set: &EvaluationSet, grid: &GridSpec, delta_pref: f64) -> Result<SweepResult> {
    grid.validate()?;
    let alphas = grid.alpha.values();
    let betas = grid.beta.values();
    let gammas = grid.gamma.values();
    let (sat_total, unsat_total) =
        set.pairs.iter().fold((0u64, 0u64), |(s, u), p| if p.actual >= delta_pref { (s + 1, u) } else { (s, u + 1) });

    let per_gamma: Vec<Vec<GridPoint>> = gammas
        .par_iter()
        .map(|&gamma| {
            let incentive = |p: &&ScoredPair| p.cbar.is_some_and(|c| c >= gamma);
            let inc = SortedGroup::from_iter(set.pairs.iter().filter(incentive), delta_pref);
            let pen = SortedGroup::from_iter(set.pairs.iter().filter(|p| !incentive(p)), delta_pref);
            let by_beta: Vec<(u64, u64)> = betas.iter().map(|&b| inc.count_ge(b)).collect();
            let mut out = Vec::new();
            for &alpha in &alphas {
                let (pen_tp, pen_fp) = pen.count_ge(alpha);
                for (bi, &beta) in betas.iter().enumerate() {
                    if alpha < beta {
                        continue;
                    }
                    let tp = by_beta[bi].0 + pen_tp;
                    let fp = by_beta[bi].1 + pen_fp;
                    let counts = ConfusionCounts { tp, fp, fn_: sat_total - tp, tn: unsat_total - fp };
                    out.push(GridPoint::new(alpha, beta, gamma, counts));
                }
            }
            out
        })
        .collect();
    Ok(finish(per_gamma.into_iter().flatten().collect(), grid))
}

/// Sweep over test ratings, predictions and a clustering.
pub fn sweep(
    test: &RatingsDataset,
    preds: &PredictionSet,
    averages: &ClusterItemAverages,
    model: &ClusterModel,
    grid: &GridSpec,
    delta_pref: f64,
) -> Result<SweepResult> {
    let set = EvaluationSet::build(test, preds, Some((averages, model)));
    sweep_pairs(&set, grid, delta_pref)
}

/// One-dimensional sweep of the no-clustering rule `r̂ ≥ t`. Points are
/// reported with α = β = t and γ = 0.
pub fn sweep_baseline(
    set: &EvaluationSet,
    thresholds: &Axis,
    objective: Objective,
    constraint: Constraint,
    delta_pref: f64,
) -> Result<SweepResult> {
    thresholds.validate("threshold")?;
    let all = SortedGroup::from_iter(set.pairs.iter(), delta_pref);
    let (sat_total, unsat_total) = (all.sat.len() as u64, all.unsat.len() as u64);
    let points = thresholds
        .values()
        .into_iter()
        .map(|t| {
            let (tp, fp) = all.count_ge(t);
            GridPoint::new(t, t, 0.0, ConfusionCounts { tp, fp, fn_: sat_total - tp, tn: unsat_total - fp })
        })
        .collect();
    let grid = GridSpec {
        alpha: *thresholds,
        beta: *thresholds,
        gamma: Axis::single(0.0),
        objective,
        constraint,
        precision_levels: Vec::new(),
    };
    Ok(finish(points, &grid))
}

/// Best recall and F1 among points whose precision is within
/// ±[`FRONTIER_TOLERANCE`] of each level.
pub fn precision_frontier(points: &[GridPoint], levels: &[f64]) -> Vec<FrontierRow> {
    levels
        .iter()
        .map(|&level| {
            let matched: Vec<&GridPoint> = points
                .iter()
                .filter(|p| p.counts.tp + p.counts.fp > 0)
                .filter(|p| (p.precision - level).abs() <= FRONTIER_TOLERANCE + 1e-12)
                .collect();
            let best_recall = matched.iter().map(|p| p.recall).max_by(f64::total_cmp);
            let best_f1 = matched.iter().map(|p| p.f1).max_by(f64::total_cmp);
            FrontierRow {
                precision_level: level,
                matched: matched.len(),
                best_recall,
                best_f1,
                empty: matched.is_empty(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPrecision {
    pub target: f64,
    /// Baseline point whose precision is nearest the target.
    pub baseline: GridPoint,
    pub proposed_recall: Option<f64>,
    pub proposed_f1: Option<f64>,
}

impl MatchedPrecision {
    /// Relative recall gain of the proposed rule over the baseline.
    pub fn recall_gain(&self) -> Option<f64> {
        let r = self.proposed_recall?;
        (self.baseline.recall > 0.0).then(|| r / self.baseline.recall - 1.0)
    }
}

/// Picks the baseline point with precision nearest `target` (ties go to the
/// higher recall) and the best proposed recall and F1 within
/// ±[`FRONTIER_TOLERANCE`] of that baseline precision.
pub fn matched_precision(baseline: &SweepResult, proposed: &SweepResult, target: f64) -> Option<MatchedPrecision> {
    let base = baseline
        .points
        .iter()
        .filter(|p| p.counts.tp + p.counts.fp > 0)
        .min_by(|a, b| {
            (a.precision - target).abs().total_cmp(&(b.precision - target).abs()).then(b.recall.total_cmp(&a.recall))
        })
        .copied()?;
    let row = precision_frontier(&proposed.points, &[base.precision]).pop()?;
    Some(MatchedPrecision { target, baseline: base, proposed_recall: row.best_recall, proposed_f1: row.best_f1 })
}

/// Splits evaluation pairs per user into a tuning part and a held-out part
/// (`holdout_fraction` of each user's pairs, rounded up, at least one left
/// for tuning when the user has two or more).
pub fn validation_split(
    set: &EvaluationSet,
    holdout_fraction: f64,
    seed: u64,
) -> Result<(EvaluationSet, EvaluationSet)> {
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(Error::Config(format!("holdout fraction must lie in [0, 1), got {holdout_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_user: std::collections::BTreeMap<_, Vec<ScoredPair>> = Default::default();
    for p in &set.pairs {
        by_user.entry(p.user).or_default().push(*p);
    }
    let (mut tune, mut hold) = (Vec::new(), Vec::new());
    for (_, mut pairs) in by_user {
        pairs.shuffle(&mut rng);
        let n = pairs.len();
        let k = ((holdout_fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
        let k = if n >= 2 { k.min(n - 1) } else { 0 };
        let rest = pairs.split_off(k);
        hold.extend(pairs);
        tune.extend(rest);
    }
    let order = |v: &mut Vec<ScoredPair>| v.sort_by_key(|p| (p.user, p.item));
    order(&mut tune);
    order(&mut hold);
    Ok((EvaluationSet { pairs: tune, skipped: set.skipped }, EvaluationSet { pairs: hold, skipped: 0 }))
}
