//! Evaluation protocols: aggregate metrics, normalized-speed quartiles,
//! segment k-fold cross-validation, zero-shot transfer, and critical
//! densities.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bprfit::{bpr_predict_speed, CityFits};
use crate::domain::{split_by_date, Dataset, RoadPriority, SplitWeeks, MIN_SPEED_MPS};
use crate::error::{Error, Result};
use crate::features::{build_examples, TrainingExample};
use crate::mlp::{train, MlpModel, TrainConfig, TrainHistory};

/// One prediction joined with what the metrics need.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSample {
    pub segment_id: String,
    pub speed_mps: f64,
    pub predicted_mps: f64,
    pub speed_limit_mps: f64,
}

impl EvalSample {
    pub fn normalized_speed(&self) -> f64 {
        self.speed_mps / self.speed_limit_mps
    }
}

fn require_nonempty<T>(xs: &[T], what: &str) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::EmptyDataset(format!("no samples for {what}")));
    }
    Ok(())
}

/// Mean absolute error over `(v, v_hat)` pairs.
pub fn mae(pairs: &[(f64, f64)]) -> Result<f64> {
    require_nonempty(pairs, "MAE")?;
    Ok(pairs.iter().map(|(v, p)| (v - p).abs()).sum::<f64>() / pairs.len() as f64)
}

/// Mean absolute percentage error as a fraction. Requires `v >= 1`.
pub fn mape(pairs: &[(f64, f64)]) -> Result<f64> {
    require_nonempty(pairs, "MAPE")?;
    if let Some((v, _)) = pairs.iter().find(|(v, _)| !(*v >= MIN_SPEED_MPS)) {
        return Err(Error::Precondition(format!("MAPE needs speeds >= 1 m/s, got {v}")));
    }
    Ok(pairs.iter().map(|(v, p)| (v - p).abs() / v).sum::<f64>() / pairs.len() as f64)
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-quartile MAE on the normalized-speed axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuartileBreakdown {
    /// 25th, 50th and 75th percentiles of normalized speed.
    pub boundaries: [f64; 3],
    pub counts: [usize; 4],
    /// `None` for an empty quartile.
    pub mae_mps: [Option<f64>; 4],
    /// Set when two or more boundaries coincide.
    pub degenerate: bool,
}

/// Quartile index of a normalized speed. A value equal to a boundary goes
/// to the lower quartile, so constant data lands entirely in Q1.
pub fn quartile_of(boundaries: &[f64; 3], x: f64) -> usize {
    boundaries.iter().position(|&b| x <= b).unwrap_or(3)
}

pub fn quartile_disaggregate(samples: &[EvalSample]) -> Result<QuartileBreakdown> {
    if samples.len() < 4 {
        return Err(Error::TooFewSamples {
            needed: 4,
            got: samples.len(),
        });
    }
    let mut ns: Vec<f64> = samples.iter().map(EvalSample::normalized_speed).collect();
    ns.sort_by(f64::total_cmp);
    let boundaries = [
        percentile_sorted(&ns, 0.25),
        percentile_sorted(&ns, 0.5),
        percentile_sorted(&ns, 0.75),
    ];
    let mut counts = [0usize; 4];
    let mut sums = [0.0f64; 4];
    for s in samples {
        let q = quartile_of(&boundaries, s.normalized_speed());
        counts[q] += 1;
        sums[q] += (s.speed_mps - s.predicted_mps).abs();
    }
    let mae_mps = std::array::from_fn(|q| (counts[q] > 0).then(|| sums[q] / counts[q] as f64));
    let degenerate = boundaries[0] == boundaries[1] || boundaries[1] == boundaries[2];
    Ok(QuartileBreakdown {
        boundaries,
        counts,
        mae_mps,
        degenerate,
    })
}

/// Which segments a metric row covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    All,
    BprFitted,
    BprNoFit,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::All => "all",
            Split::BprFitted => "bpr_fitted",
            Split::BprNoFit => "bpr_no_fit",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Split::All),
            "bpr_fitted" => Ok(Split::BprFitted),
            "bpr_no_fit" => Ok(Split::BprNoFit),
            _ => Err(Error::Format(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Pooled model over all segments.
    AllSegMl,
    /// One BPR fit per segment.
    PerSegBpr,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::AllSegMl => "all_seg_ml",
            Method::PerSegBpr => "per_seg_bpr",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all_seg_ml" => Ok(Method::AllSegMl),
            "per_seg_bpr" => Ok(Method::PerSegBpr),
            _ => Err(Error::Format(format!("unknown method `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: Method,
    pub split: Split,
    pub n: usize,
    pub mae_mps: f64,
    /// Fraction, not percent.
    pub mape: f64,
    pub quartiles: QuartileBreakdown,
}

pub fn metric_report(method: Method, split: Split, samples: &[EvalSample]) -> Result<MetricReport> {
    let pairs: Vec<(f64, f64)> = samples.iter().map(|s| (s.speed_mps, s.predicted_mps)).collect();
    Ok(MetricReport {
        method,
        split,
        n: samples.len(),
        mae_mps: mae(&pairs)?,
        mape: mape(&pairs)?,
        quartiles: quartile_disaggregate(samples)?,
    })
}

/// Anything that maps an example to a speed estimate.
pub trait SpeedModel {
    fn predict(&self, ex: &TrainingExample) -> f64;
}

impl SpeedModel for MlpModel {
    fn predict(&self, ex: &TrainingExample) -> f64 {
        self.predict_speed(&ex.x)
    }
}

impl<F: Fn(&TrainingExample) -> f64> SpeedModel for F {
    fn predict(&self, ex: &TrainingExample) -> f64 {
        self(ex)
    }
}

pub fn predict_all<M: SpeedModel + ?Sized>(model: &M, examples: &[TrainingExample]) -> Vec<EvalSample> {
    examples
        .iter()
        .map(|ex| EvalSample {
            segment_id: ex.meta.segment_id.clone(),
            speed_mps: ex.meta.mean_speed_mps,
            predicted_mps: model.predict(ex),
            speed_limit_mps: ex.meta.speed_limit_mps,
        })
        .collect()
}

/// Per-segment BPR predictions at each example's observed density. Examples
/// of unfitted segments are skipped.
pub fn bpr_predictions(fits: &CityFits, examples: &[TrainingExample]) -> Vec<EvalSample> {
    examples
        .iter()
        .filter_map(|ex| {
            let params = fits.params(&ex.meta.segment_id)?;
            Some(EvalSample {
                segment_id: ex.meta.segment_id.clone(),
                speed_mps: ex.meta.mean_speed_mps,
                predicted_mps: bpr_predict_speed(params, ex.meta.density()),
                speed_limit_mps: ex.meta.speed_limit_mps,
            })
        })
        .collect()
}

/// The three-way comparison: pooled model on all segments, both methods on
/// BPR-fitted segments, and the pooled model on the segments BPR could not
/// fit. Rows with no samples are omitted.
pub fn three_way_reports(
    ml: &[EvalSample],
    fits: &CityFits,
    bpr: &[EvalSample],
) -> Result<Vec<MetricReport>> {
    let fitted = |s: &&EvalSample| fits.params(&s.segment_id).is_some();
    let ml_fitted: Vec<EvalSample> = ml.iter().filter(fitted).cloned().collect();
    let ml_no_fit: Vec<EvalSample> = ml.iter().filter(|s| !fitted(s)).cloned().collect();
    let mut out = vec![metric_report(Method::AllSegMl, Split::All, ml)?];
    for (method, split, set) in [
        (Method::AllSegMl, Split::BprFitted, &ml_fitted[..]),
        (Method::PerSegBpr, Split::BprFitted, bpr),
        (Method::AllSegMl, Split::BprNoFit, &ml_no_fit[..]),
    ] {
        if set.len() >= 4 {
            out.push(metric_report(method, split, set)?);
        } else {
            log::warn!("{method} on {split}: {} samples, row omitted", set.len());
        }
    }
    Ok(out)
}

/// Seeded permutation of the sorted ids chopped into `k` folds whose sizes
/// differ by at most one.
pub fn kfold_split(segment_ids: &[String], k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    if k == 0 || segment_ids.len() < k {
        return Err(Error::TooFewSamples {
            needed: k.max(1),
            got: segment_ids.len(),
        });
    }
    let mut ids: Vec<String> = segment_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() < k {
        return Err(Error::TooFewSamples {
            needed: k,
            got: ids.len(),
        });
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = ids.len() / k;
    let extra = ids.len() % k;
    let mut out = Vec::with_capacity(k);
    let mut it = ids.into_iter();
    for i in 0..k {
        let size = base + usize::from(i < extra);
        let mut fold: Vec<String> = it.by_ref().take(size).collect();
        fold.sort();
        out.push(fold);
    }
    Ok(out)
}

/// Train/validation/test examples of one dataset.
#[derive(Clone, Debug)]
pub struct ExampleSplits {
    pub train: Vec<TrainingExample>,
    pub val: Vec<TrainingExample>,
    pub test: Vec<TrainingExample>,
}

impl ExampleSplits {
    pub fn build(d: &Dataset, weeks: SplitWeeks) -> Result<Self> {
        let s = split_by_date(d, weeks)?;
        Ok(ExampleSplits {
            train: build_examples(&s.train)?.examples,
            val: build_examples(&s.val)?.examples,
            test: build_examples(&s.test)?.examples,
        })
    }

    pub fn restrict(&self, ids: &BTreeSet<String>) -> Self {
        let keep = |xs: &[TrainingExample]| -> Vec<TrainingExample> {
            xs.iter()
                .filter(|e| ids.contains(&e.meta.segment_id))
                .cloned()
                .collect()
        };
        ExampleSplits {
            train: keep(&self.train),
            val: keep(&self.val),
            test: keep(&self.test),
        }
    }
}

/// One training run of a seed sweep.
#[derive(Clone, Debug)]
pub struct SweepRun {
    pub seed: u64,
    pub model: MlpModel,
    pub history: TrainHistory,
}

impl SweepRun {
    /// Final validation loss, falling back to the final training loss.
    pub fn selection_loss(&self) -> f64 {
        self.history
            .final_val_loss()
            .or_else(|| self.history.train_loss.last().copied())
            .unwrap_or(f64::INFINITY)
    }
}

#[derive(Clone, Debug)]
pub struct Sweep {
    pub runs: Vec<SweepRun>,
    /// Index into `runs` of the lowest selection loss (first on ties).
    pub best: usize,
}

impl Sweep {
    pub fn best_run(&self) -> &SweepRun {
        &self.runs[self.best]
    }
}

/// Trains one model per seed and keeps all of them.
pub fn seed_sweep(
    train_set: &[TrainingExample],
    val_set: &[TrainingExample],
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<Sweep> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("seed list is empty".into()));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let run_cfg = TrainConfig { seed, ..cfg.clone() };
        let (model, history) = train(train_set, val_set, &run_cfg)?;
        log::info!(
            "seed {seed}: final train loss {:?}, val loss {:?}",
            history.train_loss.last(),
            history.final_val_loss()
        );
        runs.push(SweepRun {
            seed,
            model,
            history,
        });
    }
    let mut best = 0;
    for (i, r) in runs.iter().enumerate() {
        if r.selection_loss() < runs[best].selection_loss() {
            best = i;
        }
    }
    Ok(Sweep { runs, best })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_segments: usize,
    pub held_out_segments: usize,
    /// Test-week MAPE on the held-out segments.
    pub cv_mape: f64,
    /// Test-week MAPE on the segments the fold trained on.
    pub same_segment_mape: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValReport {
    pub folds: Vec<FoldReport>,
    pub median_cv_mape: f64,
    pub median_same_segment_mape: f64,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    percentile_sorted(&v, 0.5)
}

/// Segment-level k-fold cross-validation over the test week. Each fold
/// trains on the other folds' segments over the same dates.
pub fn cross_validate(
    splits: &ExampleSplits,
    segment_ids: &[String],
    k: usize,
    fold_seed: u64,
    cfg: &TrainConfig,
) -> Result<CrossValReport> {
    let folds = kfold_split(segment_ids, k, fold_seed)?;
    let mut reports = Vec::with_capacity(k);
    for (i, held_out) in folds.iter().enumerate() {
        let held: BTreeSet<String> = held_out.iter().cloned().collect();
        let rest: BTreeSet<String> = folds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect();
        let train_part = splits.restrict(&rest);
        let held_part = splits.restrict(&held);
        let fold_cfg = TrainConfig {
            seed: cfg.seed.wrapping_add(i as u64),
            ..cfg.clone()
        };
        let (model, _) = train(&train_part.train, &train_part.val, &fold_cfg).map_err(|e| {
            log::error!("fold {i}: training failed: {e}");
            e
        })?;
        let score = |xs: &[TrainingExample]| -> Result<f64> {
            let pairs: Vec<(f64, f64)> = xs
                .iter()
                .map(|e| (e.meta.mean_speed_mps, model.predict_speed(&e.x)))
                .collect();
            mape(&pairs)
        };
        let report = FoldReport {
            fold: i,
            train_segments: rest.len(),
            held_out_segments: held.len(),
            cv_mape: score(&held_part.test)?,
            same_segment_mape: score(&train_part.test)?,
        };
        log::info!(
            "fold {i}: cv MAPE {:.4}, same-segment MAPE {:.4}",
            report.cv_mape,
            report.same_segment_mape
        );
        reports.push(report);
    }
    let cv: Vec<f64> = reports.iter().map(|r| r.cv_mape).collect();
    let same: Vec<f64> = reports.iter().map(|r| r.same_segment_mape).collect();
    Ok(CrossValReport {
        median_cv_mape: median(&cv),
        median_same_segment_mape: median(&same),
        folds: reports,
    })
}

/// Zero-shot transfer: the model is applied unchanged, with its own
/// normalization, to another city's test examples.
pub fn transfer_eval(
    model: &MlpModel,
    test_b: &[TrainingExample],
    priority_b: RoadPriority,
) -> Result<MetricReport> {
    if let Some(p) = model.priority {
        if p != priority_b {
            return Err(Error::PriorityMismatch {
                model: p,
                data: priority_b,
            });
        }
    }
    metric_report(Method::AllSegMl, Split::All, &predict_all(model, test_b))
}

/// Minimum samples per segment for a critical-density estimate.
pub const MIN_CRIT_SAMPLES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CritDensity {
    pub rho_veh_per_m: f64,
    /// False when the flow maximum sits at the largest observed density.
    pub interior: bool,
    pub n: usize,
}

/// Density of the largest flow over `(density, flow)` points, ties going to
/// the smaller density.
pub fn density_at_max_flow(points: &[(f64, f64)]) -> Result<CritDensity> {
    if points.len() < MIN_CRIT_SAMPLES {
        return Err(Error::TooFewSamples {
            needed: MIN_CRIT_SAMPLES,
            got: points.len(),
        });
    }
    let mut best = points[0];
    for &(rho, q) in &points[1..] {
        if q > best.1 || (q == best.1 && rho < best.0) {
            best = (rho, q);
        }
    }
    let max_rho = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    Ok(CritDensity {
        rho_veh_per_m: best.0,
        interior: best.0 < max_rho,
        n: points.len(),
    })
}

/// Pooled-model critical density of one segment: the observed density at
/// which `3600 * rho * v_hat` peaks.
pub fn critical_density_ml<M: SpeedModel + ?Sized>(
    model: &M,
    segment_examples: &[&TrainingExample],
) -> Result<CritDensity> {
    let pts: Vec<(f64, f64)> = segment_examples
        .iter()
        .map(|e| {
            let rho = e.meta.density();
            (rho, 3600.0 * rho * model.predict(e))
        })
        .collect();
    density_at_max_flow(&pts)
}

/// Ground-truth critical density from observed `(density, flow)` samples.
pub fn critical_density_gt(samples: &[(f64, f64)]) -> Result<CritDensity> {
    density_at_max_flow(samples)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CritDensityRow {
    pub segment_id: String,
    pub priority: Option<RoadPriority>,
    pub rho_gt: Option<f64>,
    pub rho_ml: Option<f64>,
    pub rho_bpr: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CritSource {
    GroundTruth,
    AllSegMl,
    PerSegBpr,
}

impl CritSource {
    pub fn as_str(self) -> &'static str {
        match self {
            CritSource::GroundTruth => "ground_truth",
            CritSource::AllSegMl => "all_seg_ml",
            CritSource::PerSegBpr => "per_seg_bpr",
        }
    }

    fn pick(self, row: &CritDensityRow) -> Option<f64> {
        match self {
            CritSource::GroundTruth => row.rho_gt,
            CritSource::AllSegMl => row.rho_ml,
            CritSource::PerSegBpr => row.rho_bpr,
        }
    }
}

/// Pairwise agreement of two sources; MAPE is relative to `reference`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseStat {
    pub priority: RoadPriority,
    pub reference: CritSource,
    pub other: CritSource,
    pub n: usize,
    pub mae_veh_per_m: f64,
    pub mape: f64,
}

pub const CRIT_PAIRS: [(CritSource, CritSource); 3] = [
    (CritSource::GroundTruth, CritSource::AllSegMl),
    (CritSource::GroundTruth, CritSource::PerSegBpr),
    (CritSource::AllSegMl, CritSource::PerSegBpr),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CritDensityReport {
    pub rows: Vec<CritDensityRow>,
    pub pairwise: Vec<PairwiseStat>,
}

/// Pairwise MAE/MAPE per priority over segments where both sources have a
/// value. Pairs with no overlap are omitted; no overlap anywhere is an error.
pub fn compare_critical_densities(rows: Vec<CritDensityRow>) -> Result<CritDensityReport> {
    let mut by_priority: BTreeMap<Option<RoadPriority>, Vec<&CritDensityRow>> = BTreeMap::new();
    for r in &rows {
        by_priority.entry(r.priority).or_default().push(r);
    }
    let mut pairwise = Vec::new();
    for (priority, group) in &by_priority {
        let Some(priority) = *priority else {
            continue;
        };
        for (a, b) in CRIT_PAIRS {
            let pairs: Vec<(f64, f64)> = group
                .iter()
                .filter_map(|r| Some((a.pick(r)?, b.pick(r)?)))
                .collect();
            if pairs.is_empty() {
                continue;
            }
            let n = pairs.len() as f64;
            pairwise.push(PairwiseStat {
                priority,
                reference: a,
                other: b,
                n: pairs.len(),
                mae_veh_per_m: pairs.iter().map(|(x, y)| (x - y).abs()).sum::<f64>() / n,
                mape: pairs.iter().map(|(x, y)| (x - y).abs() / x).sum::<f64>() / n,
            });
        }
    }
    if pairwise.is_empty() {
        return Err(Error::EmptyDataset(
            "no segment has critical densities from two sources".into(),
        ));
    }
    Ok(CritDensityReport { rows, pairwise })
}

/// Per-segment critical densities for one priority: ground truth over all
/// observations, the pooled model over `eval_examples`, BPR from its fitted
/// breakpoint. Segments short of samples get `None` for that source.
pub fn critical_density_rows<M: SpeedModel + ?Sized>(
    full: &Dataset,
    eval_examples: &[TrainingExample],
    model: &M,
    fits: Option<&CityFits>,
) -> Result<Vec<CritDensityRow>> {
    let mut gt: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for o in &full.observations {
        let rho = crate::domain::density_veh_per_m(o, crate::domain::SpeedSource::Observed)?;
        gt.entry(&o.segment_id).or_default().push((rho, o.partial_flow_vph));
    }
    let mut ev: BTreeMap<&str, Vec<&TrainingExample>> = BTreeMap::new();
    for e in eval_examples {
        ev.entry(&e.meta.segment_id).or_default().push(e);
    }
    let mut rows = Vec::with_capacity(full.segments.len());
    for id in full.segments.keys() {
        let rho_gt = gt
            .get(id.as_str())
            .and_then(|s| critical_density_gt(s).ok())
            .map(|c| c.rho_veh_per_m);
        let rho_ml = ev
            .get(id.as_str())
            .and_then(|s| critical_density_ml(model, s).ok())
            .map(|c| c.rho_veh_per_m);
        let rho_bpr = fits
            .and_then(|f| f.params(id))
            .map(|p| p.rho_crit_veh_per_m);
        rows.push(CritDensityRow {
            segment_id: id.clone(),
            priority: Some(full.priority),
            rho_gt,
            rho_ml,
            rho_bpr,
        });
    }
    Ok(rows)
}
