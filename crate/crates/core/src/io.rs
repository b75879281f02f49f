//! CSV and hashing helpers for the on-disk artifacts.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bprfit::{CityFits, FitOutcome};
use crate::domain::{CityTables, Observation, RoadPriority, Segment};
use crate::error::{Error, Result};
use crate::eval::{CritDensityReport, CrossValReport, EvalSample, MetricReport};
use crate::features::{TrainingExample, FEATURE_NAMES};
use crate::mlp::TrainHistory;
use crate::synthgen::{Bpr, Greenshields, GroundTruthFd};

pub const SEGMENTS_CSV: &str = "segments.csv";
pub const OBSERVATIONS_CSV: &str = "observations.csv";
pub const TRUTH_CSV: &str = "truth.csv";

pub fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes a header and string records; used where columns are dynamic.
pub fn write_records(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(header).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::csv(path, e))
}

pub fn write_city_tables(dir: &Path, t: &CityTables) -> Result<()> {
    write_csv(&dir.join(SEGMENTS_CSV), &t.segments)?;
    write_csv(&dir.join(OBSERVATIONS_CSV), &t.observations)
}

pub fn read_city_tables(dir: &Path) -> Result<CityTables> {
    let segments: Vec<Segment> = read_csv(&dir.join(SEGMENTS_CSV))?;
    let observations: Vec<Observation> = read_csv(&dir.join(OBSERVATIONS_CSV))?;
    Ok(CityTables {
        segments,
        observations,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub segment_id: String,
    pub fd_kind: String,
    pub v_ff_mps: f64,
    pub rho_crit_veh_per_m: f64,
    pub c: Option<f64>,
    pub p: Option<f64>,
}

impl TruthRow {
    pub fn new(segment_id: &str, fd: &GroundTruthFd) -> Self {
        let (c, p) = match fd {
            GroundTruthFd::Greenshields(_) => (None, None),
            GroundTruthFd::Bpr(b) => (Some(b.c), Some(b.p)),
        };
        TruthRow {
            segment_id: segment_id.to_string(),
            fd_kind: fd.kind().to_string(),
            v_ff_mps: fd.v_ff_mps(),
            rho_crit_veh_per_m: fd.rho_crit_veh_per_m(),
            c,
            p,
        }
    }

    pub fn to_fd(&self) -> Result<GroundTruthFd> {
        match (self.fd_kind.as_str(), self.c, self.p) {
            ("greenshields", _, _) => Ok(GroundTruthFd::Greenshields(Greenshields {
                v_ff_mps: self.v_ff_mps,
                rho_crit_veh_per_m: self.rho_crit_veh_per_m,
            })),
            ("bpr", Some(c), Some(p)) => Ok(GroundTruthFd::Bpr(Bpr {
                v_ff_mps: self.v_ff_mps,
                rho_crit_veh_per_m: self.rho_crit_veh_per_m,
                c,
                p,
            })),
            (kind, _, _) => Err(Error::Format(format!(
                "truth row `{}`: bad fd_kind `{kind}` or missing c/p",
                self.segment_id
            ))),
        }
    }
}

pub fn write_truth(path: &Path, truth: &BTreeMap<String, GroundTruthFd>) -> Result<()> {
    write_csv(path, truth.iter().map(|(id, fd)| TruthRow::new(id, fd)))
}

pub fn read_truth(path: &Path) -> Result<BTreeMap<String, GroundTruthFd>> {
    read_csv::<TruthRow>(path)?
        .into_iter()
        .map(|r| Ok((r.segment_id.clone(), r.to_fd()?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BprFitRow {
    pub segment_id: String,
    pub status: String,
    pub reason: Option<String>,
    pub v_ff_mps: Option<f64>,
    pub rho_crit_veh_per_m: Option<f64>,
    pub c: Option<f64>,
    pub p: Option<f64>,
    pub rss: Option<f64>,
    pub n: Option<usize>,
    pub iterations: Option<usize>,
}

impl BprFitRow {
    pub fn new(segment_id: &str, o: &FitOutcome) -> Self {
        match o {
            FitOutcome::Fitted {
                params,
                rss,
                n,
                iterations,
            } => BprFitRow {
                segment_id: segment_id.to_string(),
                status: "fitted".into(),
                reason: None,
                v_ff_mps: Some(params.v_ff_mps),
                rho_crit_veh_per_m: Some(params.rho_crit_veh_per_m),
                c: Some(params.c),
                p: Some(params.p),
                rss: Some(*rss),
                n: Some(*n),
                iterations: Some(*iterations),
            },
            FitOutcome::NoFit { reason } => BprFitRow {
                segment_id: segment_id.to_string(),
                status: "no_fit".into(),
                reason: Some(reason.as_str().into()),
                v_ff_mps: None,
                rho_crit_veh_per_m: None,
                c: None,
                p: None,
                rss: None,
                n: None,
                iterations: None,
            },
        }
    }

    pub fn to_outcome(&self) -> Result<FitOutcome> {
        use crate::bprfit::{BprParams, NoFitReason};
        let bad = || Error::Format(format!("malformed BPR fit row `{}`", self.segment_id));
        match self.status.as_str() {
            "fitted" => Ok(FitOutcome::Fitted {
                params: BprParams {
                    v_ff_mps: self.v_ff_mps.ok_or_else(bad)?,
                    rho_crit_veh_per_m: self.rho_crit_veh_per_m.ok_or_else(bad)?,
                    c: self.c.ok_or_else(bad)?,
                    p: self.p.ok_or_else(bad)?,
                },
                rss: self.rss.ok_or_else(bad)?,
                n: self.n.ok_or_else(bad)?,
                iterations: self.iterations.ok_or_else(bad)?,
            }),
            "no_fit" => {
                let reason = match self.reason.as_deref() {
                    Some("too_few_samples") => NoFitReason::TooFewSamples,
                    Some("no_density_spread") => NoFitReason::NoDensitySpread,
                    Some("did_not_converge") => NoFitReason::DidNotConverge,
                    _ => return Err(bad()),
                };
                Ok(FitOutcome::NoFit { reason })
            }
            _ => Err(bad()),
        }
    }
}

pub fn write_fits(path: &Path, fits: &CityFits) -> Result<()> {
    write_csv(path, fits.outcomes.iter().map(|(id, o)| BprFitRow::new(id, o)))
}

pub fn read_fits(path: &Path) -> Result<CityFits> {
    let outcomes = read_csv::<BprFitRow>(path)?
        .into_iter()
        .map(|r| Ok((r.segment_id.clone(), r.to_outcome()?)))
        .collect::<Result<_>>()?;
    Ok(CityFits { outcomes })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Materialized examples: meta columns, the twelve features in order, the
/// label, and the predictions of each method (empty when unavailable).
pub fn write_examples(
    path: &Path,
    examples: &[TrainingExample],
    ml: Option<&[EvalSample]>,
    bpr: Option<&BTreeMap<usize, f64>>,
) -> Result<()> {
    let mut header: Vec<String> = [
        "segment_id",
        "date",
        "hour",
        "dow",
        "partial_flow_vph",
        "mean_speed_mps",
        "speed_limit_mps",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(FEATURE_NAMES.iter().map(|s| s.to_string()));
    header.extend(
        ["label_inv_speed", "ml_predicted_mps", "bpr_predicted_mps"]
            .iter()
            .map(|s| s.to_string()),
    );
    let rows: Vec<Vec<String>> = examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let m = &e.meta;
            let mut r = vec![
                m.segment_id.clone(),
                m.date.to_string(),
                m.hour.to_string(),
                m.dow.to_string(),
                m.partial_flow_vph.to_string(),
                m.mean_speed_mps.to_string(),
                m.speed_limit_mps.to_string(),
            ];
            r.extend(e.x.0.iter().map(f64::to_string));
            r.push(e.label_inv_speed.to_string());
            r.push(fmt_opt(ml.map(|s| s[i].predicted_mps)));
            r.push(fmt_opt(bpr.and_then(|b| b.get(&i).copied())));
            r
        })
        .collect();
    write_records(path, &header, &rows)
}

/// One line of `report.csv`: the aggregate row has `quartile = all`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub city: String,
    pub priority: RoadPriority,
    pub method: String,
    pub split: String,
    pub quartile: String,
    pub n: usize,
    pub mae_mps: Option<f64>,
    pub mape_fraction: Option<f64>,
    pub lower_boundary: Option<f64>,
    pub upper_boundary: Option<f64>,
    pub degenerate: bool,
}

pub fn report_rows(city: &str, priority: RoadPriority, reports: &[MetricReport]) -> Vec<ReportRow> {
    let mut out = Vec::new();
    for r in reports {
        let q = &r.quartiles;
        out.push(ReportRow {
            city: city.to_string(),
            priority,
            method: r.method.to_string(),
            split: r.split.to_string(),
            quartile: "all".into(),
            n: r.n,
            mae_mps: Some(r.mae_mps),
            mape_fraction: Some(r.mape),
            lower_boundary: None,
            upper_boundary: None,
            degenerate: q.degenerate,
        });
        for i in 0..4 {
            out.push(ReportRow {
                city: city.to_string(),
                priority,
                method: r.method.to_string(),
                split: r.split.to_string(),
                quartile: format!("q{}", i + 1),
                n: q.counts[i],
                mae_mps: q.mae_mps[i],
                mape_fraction: None,
                lower_boundary: i.checked_sub(1).map(|j| q.boundaries[j]),
                upper_boundary: q.boundaries.get(i).copied(),
                degenerate: q.degenerate,
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValRow {
    /// Fold index, or `median` for the summary line.
    pub fold: String,
    pub train_segments: Option<usize>,
    pub held_out_segments: Option<usize>,
    pub cv_mape_fraction: f64,
    pub same_segment_mape_fraction: f64,
}

pub fn crossval_rows(r: &CrossValReport) -> Vec<CrossValRow> {
    let mut out: Vec<CrossValRow> = r
        .folds
        .iter()
        .map(|f| CrossValRow {
            fold: f.fold.to_string(),
            train_segments: Some(f.train_segments),
            held_out_segments: Some(f.held_out_segments),
            cv_mape_fraction: f.cv_mape,
            same_segment_mape_fraction: f.same_segment_mape,
        })
        .collect();
    out.push(CrossValRow {
        fold: "median".into(),
        train_segments: None,
        held_out_segments: None,
        cv_mape_fraction: r.median_cv_mape,
        same_segment_mape_fraction: r.median_same_segment_mape,
    });
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub model_city: String,
    pub data_city: String,
    pub priority: RoadPriority,
    pub n: usize,
    pub mae_mps: f64,
    pub mape_fraction: f64,
    pub local_mae_mps: f64,
    pub local_mape_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CritDensityCsvRow {
    pub segment_id: String,
    pub priority: Option<RoadPriority>,
    pub rho_gt_veh_per_m: Option<f64>,
    pub rho_ml_veh_per_m: Option<f64>,
    pub rho_bpr_veh_per_m: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CritSummaryRow {
    pub priority: RoadPriority,
    pub reference: String,
    pub other: String,
    pub n: usize,
    pub mae_veh_per_m: f64,
    pub mape_fraction: f64,
}

pub fn write_critdens(dir: &Path, rep: &CritDensityReport) -> Result<()> {
    write_csv(
        &dir.join("critdens.csv"),
        rep.rows.iter().map(|r| CritDensityCsvRow {
            segment_id: r.segment_id.clone(),
            priority: r.priority,
            rho_gt_veh_per_m: r.rho_gt,
            rho_ml_veh_per_m: r.rho_ml,
            rho_bpr_veh_per_m: r.rho_bpr,
        }),
    )?;
    write_csv(
        &dir.join("critdens_summary.csv"),
        rep.pairwise.iter().map(|p| CritSummaryRow {
            priority: p.priority,
            reference: p.reference.as_str().into(),
            other: p.other.as_str().into(),
            n: p.n,
            mae_veh_per_m: p.mae_veh_per_m,
            mape_fraction: p.mape,
        }),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

pub fn write_history(path: &Path, h: &TrainHistory) -> Result<()> {
    write_csv(
        path,
        h.train_loss
            .iter()
            .zip(&h.val_loss)
            .enumerate()
            .map(|(i, (t, v))| HistoryRow {
                epoch: i + 1,
                train_loss: *t,
                val_loss: *v,
            }),
    )
}

/// Lowercase hex SHA-256 of a file's bytes.
pub fn sha256_file(path: &Path) -> Result<String> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut h = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = r.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::json(path, e))
}
