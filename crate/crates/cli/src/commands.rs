use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use segflow_core::bprfit::{bpr_predict_speed, fit_city, CityFits};
use segflow_core::domain::{filter_dataset, split_by_date, Dataset, RoadPriority};
use segflow_core::eval::{
    bpr_predictions, compare_critical_densities, critical_density_rows, cross_validate,
    predict_all, seed_sweep, three_way_reports, transfer_eval, ExampleSplits,
};
use segflow_core::io::{self, sha256_bytes, sha256_file, TransferRow};
use segflow_core::mlp::{MlpModel, TrainConfig};
use segflow_core::synthgen::generate_city;

use crate::config::{self, ConfigFile, ExperimentConfig};
use crate::plot;
use crate::{Cli, Command};

pub const BEST_MARKER: &str = "best.json";

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_sha256: String,
    /// Input files keyed `data:<name>` or `run:<relative path>`.
    pub inputs: BTreeMap<String, String>,
    /// Output files relative to the directory holding the manifest.
    pub outputs: BTreeMap<String, String>,
    #[serde(default)]
    pub summary: BTreeMap<String, f64>,
}

impl Manifest {
    fn new(command: &str, config_bytes: &[u8]) -> Self {
        Manifest {
            command: command.into(),
            config_sha256: sha256_bytes(config_bytes),
            ..Default::default()
        }
    }

    fn input(&mut self, key: String, path: &Path) -> Result<()> {
        self.inputs.insert(key, sha256_file(path)?);
        Ok(())
    }

    fn output(&mut self, root: &Path, path: &Path) -> Result<()> {
        let rel = path.strip_prefix(root).unwrap_or(path);
        self.outputs
            .insert(rel.to_string_lossy().into_owned(), sha256_file(path)?);
        Ok(())
    }

    fn write(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)?;
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BestMarker {
    pub seed: u64,
    pub model: String,
    pub model_sha256: String,
    pub selection_loss: f64,
}

pub fn run(cli: &Cli) -> Result<()> {
    let path = cli
        .config
        .as_deref()
        .context("--config <path> is required")?;
    let file = config::load(path)?;
    if cli.command == Command::Gen {
        return cmd_gen(cli, file);
    }
    let ConfigFile::Experiment(cfg) = file else {
        bail!(
            "{}: `{}` needs an experiment config with data_dir and out_dir",
            path.display(),
            cli.command.name()
        );
    };
    let mut cfg = *cfg;
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let snapshot = serde_json::to_string_pretty(&cfg)? + "\n";
    let snap_path = cfg.out_dir.join("config.json");
    std::fs::write(&snap_path, &snapshot)
        .with_context(|| format!("writing {}", snap_path.display()))?;

    let mut manifest = Manifest::new(cli.command.name(), snapshot.as_bytes());
    let ctx = RunContext {
        cfg: &cfg,
        priority: cli.priority,
        force: cli.force,
    };
    match cli.command {
        Command::Gen => unreachable!(),
        Command::Train => ctx.train(&mut manifest)?,
        Command::FitBpr => ctx.fit_bpr(&mut manifest)?,
        Command::Eval => ctx.eval(&mut manifest)?,
        Command::Crossval => ctx.crossval(&mut manifest)?,
        Command::Transfer => ctx.transfer(&mut manifest)?,
        Command::Critdens => ctx.critdens(&mut manifest)?,
        Command::Plotdata => ctx.plotdata(&mut manifest)?,
    }
    manifest.write(&cfg.out_dir.join(format!("manifest-{}.json", cli.command.name())))?;
    log::info!("{} done: {}", cli.command.name(), cfg.out_dir.display());
    Ok(())
}

fn cmd_gen(cli: &Cli, file: ConfigFile) -> Result<()> {
    let (mut city, data_dir) = match file {
        ConfigFile::City(c) => (
            *c,
            cli.out.clone().context("gen with a city config needs --out <dir>")?,
        ),
        ConfigFile::Experiment(e) => {
            let city = e.city.context("experiment config has no `city` section")?;
            (city, cli.out.clone().unwrap_or(e.data_dir))
        }
    };
    if let Some(seed) = cli.seed {
        city.seed = seed;
    }
    city.validate()?;
    std::fs::create_dir_all(&data_dir)
        .with_context(|| format!("creating {}", data_dir.display()))?;
    let generated = generate_city(&city)?;
    let snapshot = serde_json::to_string_pretty(&city)? + "\n";
    let city_path = data_dir.join("city.json");
    std::fs::write(&city_path, &snapshot)?;
    io::write_city_tables(&data_dir, &generated.tables)?;
    io::write_truth(&data_dir.join(io::TRUTH_CSV), &generated.truth)?;

    let mut m = Manifest::new("gen", snapshot.as_bytes());
    for name in ["city.json", io::SEGMENTS_CSV, io::OBSERVATIONS_CSV, io::TRUTH_CSV] {
        m.output(&data_dir, &data_dir.join(name))?;
    }
    m.summary
        .insert("floored_speeds".into(), generated.floored_speeds as f64);
    m.summary.insert(
        "observations".into(),
        generated.tables.observations.len() as f64,
    );
    m.write(&data_dir.join("manifest.json"))?;
    log::info!(
        "gen: {} segments, {} observations into {}",
        generated.tables.segments.len(),
        generated.tables.observations.len(),
        data_dir.display()
    );
    Ok(())
}

struct RunContext<'a> {
    cfg: &'a ExperimentConfig,
    priority: Option<RoadPriority>,
    force: bool,
}

fn data_inputs(m: &mut Manifest, data_dir: &Path, tag: &str) -> Result<()> {
    for name in [io::SEGMENTS_CSV, io::OBSERVATIONS_CSV] {
        let p = data_dir.join(name);
        if !p.exists() {
            bail!("missing input {}", p.display());
        }
        m.input(format!("{tag}:{name}"), &p)?;
    }
    Ok(())
}

/// Filtered datasets per priority, restricted to `only` when given.
fn load_datasets(data_dir: &Path, only: Option<RoadPriority>) -> Result<Vec<Dataset>> {
    let tables = io::read_city_tables(data_dir)?;
    let mut out = Vec::new();
    for (p, raw) in tables.by_priority()? {
        if only.is_some_and(|o| o != p) {
            continue;
        }
        let (d, report) = filter_dataset(&raw)?;
        if !report.is_clean() {
            log::info!("{} {p}: filter dropped {report:?}", d.city);
        }
        out.push(d);
    }
    if out.is_empty() {
        bail!("no data for the requested priority in {}", data_dir.display());
    }
    Ok(out)
}

fn models_dir(run_dir: &Path, p: RoadPriority) -> PathBuf {
    run_dir.join(p.as_str()).join("models")
}

fn load_best(run_dir: &Path, p: RoadPriority) -> Result<(MlpModel, PathBuf)> {
    let dir = models_dir(run_dir, p);
    let marker = dir.join(BEST_MARKER);
    if !marker.exists() {
        bail!("missing input {} (run `train` first)", marker.display());
    }
    let best: BestMarker = io::read_json(&marker)?;
    let path = dir.join(&best.model);
    let model = MlpModel::load(&path)?;
    if model.priority.is_some_and(|mp| mp != p) {
        bail!("{}: model priority does not match `{p}`", path.display());
    }
    Ok((model, path))
}

fn load_fits(run_dir: &Path, p: RoadPriority) -> Result<(CityFits, PathBuf)> {
    let path = run_dir.join(p.as_str()).join("bpr_fits.csv");
    if !path.exists() {
        bail!("missing input {} (run `fit-bpr` first)", path.display());
    }
    Ok((io::read_fits(&path)?, path))
}

impl RunContext<'_> {
    fn out(&self, p: RoadPriority) -> Result<PathBuf> {
        let dir = self.cfg.out_dir.join(p.as_str());
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    fn datasets(&self, m: &mut Manifest) -> Result<Vec<Dataset>> {
        data_inputs(m, &self.cfg.data_dir, "data")?;
        load_datasets(&self.cfg.data_dir, self.priority)
    }

    fn run_input(&self, m: &mut Manifest, path: &Path) -> Result<()> {
        let rel = path.strip_prefix(&self.cfg.out_dir).unwrap_or(path);
        m.input(format!("run:{}", rel.display()), path)
    }

    fn train(&self, m: &mut Manifest) -> Result<()> {
        let root = &self.cfg.out_dir;
        for d in self.datasets(m)? {
            let dir = models_dir(root, d.priority);
            let occupied = dir.exists() && std::fs::read_dir(&dir)?.next().is_some();
            if occupied && !self.force {
                bail!("{} already holds models; pass --force to overwrite", dir.display());
            }
            if occupied {
                std::fs::remove_dir_all(&dir)?;
            }
            std::fs::create_dir_all(&dir)?;
            let splits = ExampleSplits::build(&d, self.cfg.split)?;
            log::info!(
                "{} {}: {} train / {} val / {} test examples",
                d.city,
                d.priority,
                splits.train.len(),
                splits.val.len(),
                splits.test.len()
            );
            let sweep = seed_sweep(&splits.train, &splits.val, &self.cfg.train, &self.cfg.seeds)?;
            for run in &sweep.runs {
                let model = run.model.clone().with_origin(&d.city, d.priority);
                let path = dir.join(format!("seed-{}.json", run.seed));
                model.save(&path)?;
                m.output(root, &path)?;
                let hist = dir.join(format!("history-seed-{}.csv", run.seed));
                io::write_history(&hist, &run.history)?;
                m.output(root, &hist)?;
                if !run.history.improved() {
                    log::warn!("seed {}: final training loss above the first epoch's", run.seed);
                }
            }
            let best = sweep.best_run();
            let model_name = format!("seed-{}.json", best.seed);
            let marker = BestMarker {
                seed: best.seed,
                model_sha256: sha256_file(&dir.join(&model_name))?,
                model: model_name,
                selection_loss: best.selection_loss(),
            };
            let marker_path = dir.join(BEST_MARKER);
            io::write_json(&marker_path, &marker)?;
            m.output(root, &marker_path)?;
            m.summary
                .insert(format!("{}_best_seed", d.priority), best.seed as f64);
        }
        Ok(())
    }

    fn fit_bpr(&self, m: &mut Manifest) -> Result<()> {
        let root = &self.cfg.out_dir;
        for d in self.datasets(m)? {
            let split = split_by_date(&d, self.cfg.split)?;
            let fits = fit_city(&split.train, &self.cfg.bprfit)?;
            let path = self.out(d.priority)?.join("bpr_fits.csv");
            io::write_fits(&path, &fits)?;
            m.output(root, &path)?;
            m.summary.insert(
                format!("{}_no_fit_proportion", d.priority),
                fits.no_fit_proportion(),
            );
        }
        Ok(())
    }

    fn eval(&self, m: &mut Manifest) -> Result<()> {
        let root = &self.cfg.out_dir;
        for d in self.datasets(m)? {
            let p = d.priority;
            let (model, model_path) = load_best(root, p)?;
            self.run_input(m, &model_path)?;
            let (fits, fits_path) = load_fits(root, p)?;
            self.run_input(m, &fits_path)?;
            let test = ExampleSplits::build(&d, self.cfg.split)?.test;
            let ml = predict_all(&model, &test);
            let bpr = bpr_predictions(&fits, &test);
            let reports = three_way_reports(&ml, &fits, &bpr)?;
            for r in &reports {
                log::info!(
                    "{} {p} {} on {}: n {} MAE {:.4} m/s MAPE {:.4}",
                    d.city,
                    r.method,
                    r.split,
                    r.n,
                    r.mae_mps,
                    r.mape
                );
            }
            let dir = self.out(p)?;
            let report_path = dir.join("report.csv");
            io::write_csv(&report_path, io::report_rows(&d.city, p, &reports))?;
            m.output(root, &report_path)?;

            let bpr_by_index: BTreeMap<usize, f64> = test
                .iter()
                .enumerate()
                .filter_map(|(i, e)| {
                    let params = fits.params(&e.meta.segment_id)?;
                    Some((i, bpr_predict_speed(params, e.meta.density())))
                })
                .collect();
            let ex_path = dir.join("examples.csv");
            io::write_examples(&ex_path, &test, Some(&ml), Some(&bpr_by_index))?;
            m.output(root, &ex_path)?;
        }
        Ok(())
    }

    fn crossval(&self, m: &mut Manifest) -> Result<()> {
        let root = &self.cfg.out_dir;
        let train_cfg = TrainConfig {
            seed: self.cfg.seeds[0],
            ..self.cfg.train.clone()
        };
        for d in self.datasets(m)? {
            let splits = ExampleSplits::build(&d, self.cfg.split)?;
            let ids: Vec<String> = d.segments.keys().cloned().collect();
            let rep = cross_validate(
                &splits,
                &ids,
                self.cfg.eval.k_folds,
                self.cfg.eval.fold_seed,
                &train_cfg,
            )?;
            let path = self.out(d.priority)?.join("crossval.csv");
            io::write_csv(&path, io::crossval_rows(&rep))?;
            m.output(root, &path)?;
            m.summary
                .insert(format!("{}_median_cv_mape", d.priority), rep.median_cv_mape);
        }
        Ok(())
    }

    fn transfer(&self, m: &mut Manifest) -> Result<()> {
        if self.cfg.transfer.is_empty() {
            bail!("config has no transfer targets");
        }
        let root = &self.cfg.out_dir;
        for d in self.datasets(m)? {
            let p = d.priority;
            let (model_a, path_a) = load_best(root, p)?;
            self.run_input(m, &path_a)?;
            let city_a = model_a.city.clone().unwrap_or_else(|| d.city.clone());
            let mut rows = Vec::new();
            for (i, t) in self.cfg.transfer.iter().enumerate() {
                data_inputs(m, &t.data_dir, &format!("target{i}"))?;
                let target = load_datasets(&t.data_dir, Some(p))?
                    .pop()
                    .context("target city has no data for this priority")?;
                let (model_b, path_b) = load_best(&t.run_dir, p)?;
                m.input(format!("target{i}:model"), &path_b)?;
                let test_b = ExampleSplits::build(&target, self.cfg.split)?.test;
                let local = transfer_eval(&model_b, &test_b, p)?;
                let zero_shot = transfer_eval(&model_a, &test_b, p)?;
                log::info!(
                    "{city_a} -> {} {p}: MAE {:.4} m/s (local {:.4})",
                    target.city,
                    zero_shot.mae_mps,
                    local.mae_mps
                );
                let city_b = model_b.city.clone().unwrap_or_else(|| target.city.clone());
                for (from, r) in [(city_a.clone(), &zero_shot), (city_b, &local)] {
                    rows.push(TransferRow {
                        model_city: from,
                        data_city: target.city.clone(),
                        priority: p,
                        n: r.n,
                        mae_mps: r.mae_mps,
                        mape_fraction: r.mape,
                        local_mae_mps: local.mae_mps,
                        local_mape_fraction: local.mape,
                    });
                }
            }
            let path = self.out(p)?.join("transfer.csv");
            io::write_csv(&path, &rows)?;
            m.output(root, &path)?;
        }
        Ok(())
    }

    fn critdens(&self, m: &mut Manifest) -> Result<()> {
        let root = &self.cfg.out_dir;
        for d in self.datasets(m)? {
            let p = d.priority;
            let (model, model_path) = load_best(root, p)?;
            self.run_input(m, &model_path)?;
            let fits = match load_fits(root, p) {
                Ok((f, path)) => {
                    self.run_input(m, &path)?;
                    Some(f)
                }
                Err(e) => {
                    log::warn!("{e:#}; BPR column left empty");
                    None
                }
            };
            let test = ExampleSplits::build(&d, self.cfg.split)?.test;
            let rows = critical_density_rows(&d, &test, &model, fits.as_ref())?;
            let rep = compare_critical_densities(rows)?;
            for s in &rep.pairwise {
                log::info!(
                    "{p} {} / {}: n {} MAE {:.3e} veh/m MAPE {:.4}",
                    s.reference.as_str(),
                    s.other.as_str(),
                    s.n,
                    s.mae_veh_per_m,
                    s.mape
                );
            }
            let dir = self.out(p)?;
            io::write_critdens(&dir, &rep)?;
            m.output(root, &dir.join("critdens.csv"))?;
            m.output(root, &dir.join("critdens_summary.csv"))?;
        }
        Ok(())
    }

    fn plotdata(&self, m: &mut Manifest) -> Result<()> {
        let root = &self.cfg.out_dir;
        let priorities: Vec<RoadPriority> = match self.priority {
            Some(p) => vec![p],
            None => RoadPriority::ALL
                .into_iter()
                .filter(|p| root.join(p.as_str()).join("report.csv").exists())
                .collect(),
        };
        if priorities.is_empty() {
            bail!("missing input: no report.csv under {} (run `eval` first)", root.display());
        }
        for p in priorities {
            let dir = root.join(p.as_str());
            let files = plot::write_all(&dir)?;
            for path in &files.inputs {
                self.run_input(m, path)?;
            }
            for path in &files.outputs {
                m.output(root, path)?;
            }
        }
        Ok(())
    }
}
