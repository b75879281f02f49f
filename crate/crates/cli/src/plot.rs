//! Tab-separated series for the figure shapes. Rendering is left to any
//! plotting tool.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use segflow_core::io::{self, CritDensityCsvRow, CrossValRow, ReportRow, TransferRow};

pub const HIST_BINS: usize = 20;

pub struct PlotFiles {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

fn write(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn cell(x: Option<f64>) -> String {
    x.map_or_else(|| "nan".to_string(), |v| v.to_string())
}

/// One column per method/split with the four quartile MAEs as rows.
pub fn disagg_series(rows: &[ReportRow]) -> String {
    let mut series: BTreeMap<String, [Option<f64>; 4]> = BTreeMap::new();
    for r in rows {
        let Some(q) = r.quartile.strip_prefix('q').and_then(|s| s.parse::<usize>().ok()) else {
            continue;
        };
        if (1..=4).contains(&q) {
            series.entry(format!("{}/{}", r.method, r.split)).or_default()[q - 1] = r.mae_mps;
        }
    }
    let mut out = String::from("# per-quartile MAE (m/s) by normalized-speed quartile\nquartile");
    for name in series.keys() {
        out.push('\t');
        out.push_str(name);
    }
    out.push('\n');
    for q in 0..4 {
        out.push_str(&(q + 1).to_string());
        for v in series.values() {
            out.push('\t');
            out.push_str(&cell(v[q]));
        }
        out.push('\n');
    }
    out
}

pub fn cv_series(rows: &[CrossValRow]) -> String {
    let mut out = String::from("fold\tsame_segment_mape\tcv_mape\tx_equals_y\n");
    for r in rows.iter().filter(|r| r.fold != "median") {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            r.fold, r.same_segment_mape_fraction, r.cv_mape_fraction, r.same_segment_mape_fraction
        );
    }
    out
}

pub fn transfer_series(rows: &[TransferRow]) -> String {
    let mut out = String::from("model_city\tdata_city\tlocal_mae_mps\ttransfer_mae_mps\tx_equals_y\n");
    for r in rows.iter().filter(|r| r.model_city != r.data_city) {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.model_city, r.data_city, r.local_mae_mps, r.mae_mps, r.local_mae_mps
        );
    }
    out
}

/// Shared equal-width bins over every available critical density.
pub fn critdens_histogram(rows: &[CritDensityCsvRow]) -> String {
    let columns: [(&str, fn(&CritDensityCsvRow) -> Option<f64>); 3] = [
        ("ground_truth", |r| r.rho_gt_veh_per_m),
        ("all_seg_ml", |r| r.rho_ml_veh_per_m),
        ("per_seg_bpr", |r| r.rho_bpr_veh_per_m),
    ];
    let all: Vec<f64> = rows
        .iter()
        .flat_map(|r| columns.iter().filter_map(move |(_, f)| f(r)))
        .collect();
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        hi = lo + 1e-6;
    }
    let width = (hi - lo) / HIST_BINS as f64;
    let edges: Vec<f64> = (0..=HIST_BINS).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![[0usize; 3]; HIST_BINS];
    for r in rows {
        for (c, (_, f)) in columns.iter().enumerate() {
            if let Some(v) = f(r) {
                let b = (((v - lo) / width) as usize).min(HIST_BINS - 1);
                counts[b][c] += 1;
            }
        }
    }
    let edge_list: Vec<String> = edges.iter().map(f64::to_string).collect();
    let mut out = format!(
        "# critical density histogram, veh/m\n# bin_edges: {}\nbin\tlower\tupper",
        edge_list.join(",")
    );
    for (name, _) in &columns {
        out.push('\t');
        out.push_str(name);
    }
    out.push('\n');
    for (b, c) in counts.iter().enumerate() {
        let _ = writeln!(
            out,
            "{b}\t{}\t{}\t{}\t{}\t{}",
            edges[b],
            edges[b + 1],
            c[0],
            c[1],
            c[2]
        );
    }
    out
}

/// Writes every series whose source report exists under `dir`. The
/// quartile report is required.
pub fn write_all(dir: &Path) -> Result<PlotFiles> {
    let report = dir.join("report.csv");
    if !report.exists() {
        bail!("missing input {} (run `eval` first)", report.display());
    }
    let plot_dir = dir.join("plot");
    std::fs::create_dir_all(&plot_dir)?;
    let mut files = PlotFiles {
        inputs: vec![report.clone()],
        outputs: Vec::new(),
    };

    let out = plot_dir.join("disagg_mae.tsv");
    write(&out, &disagg_series(&io::read_csv::<ReportRow>(&report)?))?;
    files.outputs.push(out);

    let optional: [(&str, &str); 3] = [
        ("crossval.csv", "cv_scatter.tsv"),
        ("transfer.csv", "transfer_scatter.tsv"),
        ("critdens.csv", "critdens_hist.tsv"),
    ];
    for (src, dst) in optional {
        let input = dir.join(src);
        if !input.exists() {
            log::warn!("{} not found; skipping {dst}", input.display());
            continue;
        }
        let body = match src {
            "crossval.csv" => cv_series(&io::read_csv(&input)?),
            "transfer.csv" => transfer_series(&io::read_csv(&input)?),
            _ => critdens_histogram(&io::read_csv(&input)?),
        };
        let out = plot_dir.join(dst);
        write(&out, &body)?;
        files.inputs.push(input);
        files.outputs.push(out);
    }
    Ok(files)
}
