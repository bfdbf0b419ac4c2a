//! Grid sweeps: cartesian products of config axes with seed replicates,
//! run on a worker pool and aggregated to mean and standard error.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use modcomp::numcore::RngState;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use crate::config::ExperimentConfig;
use crate::error::{io_err, CliError, CliResult};
use crate::run::{execute, RunStatus, SeedLineage};

/// Seed of replicate `rep` of grid cell `cell`. Kept below 2^63 so it fits
/// a TOML integer.
pub fn cell_seed(base: u64, cell: usize, rep: usize) -> u64 {
    RngState::new(base).child(cell as u64).child(rep as u64).seed() >> 1
}

/// Cartesian product of the axes; keys in sorted order, last key varying
/// fastest.
pub fn grid(axes: &BTreeMap<String, Vec<toml::Value>>) -> Vec<Vec<(String, toml::Value)>> {
    let mut cells = vec![Vec::new()];
    for (k, values) in axes {
        cells = cells
            .into_iter()
            .flat_map(|prefix: Vec<(String, toml::Value)>| {
                values.iter().map(move |v| {
                    let mut c = prefix.clone();
                    c.push((k.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    cells
}

/// Mean and standard error (sample standard deviation over `√n`); the
/// error is NaN for fewer than two values.
pub fn mean_sem(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Label of an axis value in CSV cells.
pub fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Table(_) | toml::Value::Array(_) => {
            serde_json::to_string(&serde_json::to_value(v).expect("toml values convert")).expect("json")
        }
        other => other.to_string(),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CellRun {
    pub cell: usize,
    pub replicate: usize,
    pub seed: u64,
    pub values: Vec<(String, String)>,
    pub status: RunStatus,
    pub error: Option<String>,
    pub dir: PathBuf,
    #[serde(skip)]
    pub metrics: Option<Value>,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub dir: PathBuf,
    pub runs: Vec<CellRun>,
}

/// Numeric top-level metrics of a run, without the seed.
pub fn scalar_metrics(m: &Value) -> BTreeMap<String, f64> {
    m.as_object()
        .map(|o| {
            o.iter()
                .filter(|(k, _)| k.as_str() != "seed")
                .filter_map(|(k, v)| v.as_f64().map(|x| (k.clone(), x)))
                .collect()
        })
        .unwrap_or_default()
}

/// Runs every (cell, replicate) of the config's `[sweep]` with `jobs`
/// workers. Failed runs are reported and the sweep continues.
pub fn run_sweep(cfg: &ExperimentConfig, jobs: usize, out: Option<PathBuf>) -> CliResult<SweepOutcome> {
    let spec = cfg
        .sweep
        .clone()
        .ok_or_else(|| CliError::Config("config has no [sweep] section".into()))?;
    if spec.replicates == 0 {
        return Err(CliError::Config("[sweep] replicates must be >= 1".into()));
    }
    if let Some((k, _)) = spec.axes.iter().find(|(_, v)| v.is_empty()) {
        return Err(CliError::Config(format!("[sweep] axis `{k}` has no values")));
    }
    if let Some((k, _)) = spec
        .axes
        .iter()
        .find(|(_, vs)| vs.iter().any(|v| matches!(v, toml::Value::Array(_))))
    {
        return Err(CliError::Config(format!(
            "[sweep] axis `{k}` lists arrays; axes range over single fields"
        )));
    }
    let mut base = cfg.clone();
    base.sweep = None;
    let root = out.unwrap_or_else(|| cfg.out_root());
    let dir = root.join(format!("{}-sweep-{}", cfg.label(), &cfg.hash()[..12]));
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    fs::write(dir.join("sweep.toml"), cfg.to_toml()).map_err(io_err(&dir))?;
    let base_seed = cfg.seed.unwrap_or(0);

    let mut jobs_list = Vec::new();
    for (ci, cell) in grid(&spec.axes).into_iter().enumerate() {
        for rep in 0..spec.replicates {
            jobs_list.push((ci, rep, cell.clone()));
        }
    }
    // Resolve every cell up front so config mistakes stop the sweep early.
    let mut planned = Vec::with_capacity(jobs_list.len());
    for (ci, rep, cell) in jobs_list {
        let mut c = base.clone();
        for (k, v) in &cell {
            c.set_path(k, v.clone())?;
        }
        let seed = cell_seed(base_seed, ci, rep);
        c.seed = Some(seed);
        let exp = c.resolve()?;
        let run_dir = dir.join("cells").join(format!("{ci:03}-{rep}"));
        let values = cell.iter().map(|(k, v)| (k.clone(), value_label(v))).collect();
        planned.push((ci, rep, seed, values, c, exp, run_dir));
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
    let runs: Vec<CellRun> = pool.install(|| {
        planned
            .into_par_iter()
            .map(|(ci, rep, seed, values, c, exp, run_dir)| {
                let lineage = SeedLineage {
                    config_seed: cfg.seed,
                    sweep_seed: Some(base_seed),
                    cell: Some(ci),
                    replicate: Some(rep),
                    run_seed: seed,
                };
                let (status, error, metrics) = match execute(&c, &exp, &run_dir, lineage) {
                    Ok(o) => (RunStatus::Ok, None, o.metrics),
                    Err(e @ (CliError::Diverged { .. } | CliError::Core(modcomp::Error::Diverged { .. }))) => {
                        eprintln!("cell {ci} replicate {rep}: {e}");
                        let m = fs::read_to_string(run_dir.join(crate::run::METRICS))
                            .ok()
                            .and_then(|t| serde_json::from_str(&t).ok());
                        (RunStatus::Diverged, Some(e.to_string()), m)
                    }
                    Err(e) => {
                        eprintln!("cell {ci} replicate {rep} failed: {e}");
                        (RunStatus::Failed, Some(e.to_string()), None)
                    }
                };
                CellRun {
                    cell: ci,
                    replicate: rep,
                    seed,
                    values,
                    status,
                    error,
                    dir: run_dir,
                    metrics,
                }
            })
            .collect()
    });
    write_tables(&dir, &spec.axes, &runs)?;
    Ok(SweepOutcome { dir, runs })
}

fn status_name(s: RunStatus) -> &'static str {
    match s {
        RunStatus::Ok => "ok",
        RunStatus::Diverged => "diverged",
        RunStatus::Failed => "failed",
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Report(format!("{}: {e}", path.display()))
}

/// `sweep.csv` (one row per run) and `aggregate.csv` (one row per cell,
/// mean and standard error over successful replicates).
fn write_tables(dir: &Path, axes: &BTreeMap<String, Vec<toml::Value>>, runs: &[CellRun]) -> CliResult<()> {
    let metric_names: BTreeSet<String> = runs
        .iter()
        .filter_map(|r| r.metrics.as_ref())
        .flat_map(|m| scalar_metrics(m).into_keys())
        .collect();
    let axis_names: Vec<&String> = axes.keys().collect();

    let path = dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    let mut header = vec!["cell".to_string(), "replicate".into(), "seed".into()];
    header.extend(axis_names.iter().map(|s| s.to_string()));
    header.push("status".into());
    header.extend(metric_names.iter().cloned());
    w.write_record(&header).map_err(csv_err(&path))?;
    for r in runs {
        let scalars = r.metrics.as_ref().map(scalar_metrics).unwrap_or_default();
        let mut rec = vec![r.cell.to_string(), r.replicate.to_string(), r.seed.to_string()];
        rec.extend(r.values.iter().map(|(_, v)| v.clone()));
        rec.push(status_name(r.status).into());
        rec.extend(
            metric_names
                .iter()
                .map(|k| scalars.get(k).map(|v| v.to_string()).unwrap_or_default()),
        );
        w.write_record(&rec).map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join("aggregate.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    let mut header = vec!["cell".to_string()];
    header.extend(axis_names.iter().map(|s| s.to_string()));
    header.push("n".into());
    for k in &metric_names {
        header.push(format!("{k}_mean"));
        header.push(format!("{k}_sem"));
    }
    w.write_record(&header).map_err(csv_err(&path))?;
    let cells: BTreeSet<usize> = runs.iter().map(|r| r.cell).collect();
    for c in cells {
        let members: Vec<&CellRun> = runs.iter().filter(|r| r.cell == c).collect();
        let ok: Vec<BTreeMap<String, f64>> = members
            .iter()
            .filter(|r| r.status == RunStatus::Ok)
            .filter_map(|r| r.metrics.as_ref().map(scalar_metrics))
            .collect();
        let mut rec = vec![c.to_string()];
        rec.extend(members[0].values.iter().map(|(_, v)| v.clone()));
        rec.push(ok.len().to_string());
        for k in &metric_names {
            let xs: Vec<f64> = ok.iter().filter_map(|m| m.get(k).copied()).collect();
            let (mean, sem) = mean_sem(&xs);
            rec.push(mean.to_string());
            rec.push(sem.to_string());
        }
        w.write_record(&rec).map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(())
}
