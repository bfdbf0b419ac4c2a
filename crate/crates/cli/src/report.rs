//! Plot data from completed runs: one CSV per paper figure, no rendering.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;
use walkdir::WalkDir;

use crate::config::Experiment;
use crate::error::{io_err, CliError, CliResult};
use crate::run::{RunManifest, RunStatus, EXPERIMENT, MANIFEST, METRICS};
use crate::sweep::mean_sem;

/// Grouped series: key columns, then `<value>_mean,<value>_sem` per value.
struct Series {
    file: &'static str,
    keys: &'static [&'static str],
    values: &'static [&'static str],
    rows: BTreeMap<Vec<String>, Vec<Vec<f64>>>,
}

impl Series {
    fn new(file: &'static str, keys: &'static [&'static str], values: &'static [&'static str]) -> Self {
        Self {
            file,
            keys,
            values,
            rows: BTreeMap::new(),
        }
    }

    fn add(&mut self, key: Vec<String>, values: &[Option<f64>]) {
        let slot = self.rows.entry(key).or_insert_with(|| vec![Vec::new(); values.len()]);
        for (s, v) in slot.iter_mut().zip(values) {
            if let Some(v) = v.filter(|v| v.is_finite()) {
                s.push(v);
            }
        }
    }

    fn write(&self, dir: &Path) -> CliResult<PathBuf> {
        let path = dir.join(self.file);
        let err = |e: csv::Error| CliError::Report(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(&path).map_err(err)?;
        let mut header: Vec<String> = self.keys.iter().map(|s| s.to_string()).collect();
        for v in self.values {
            header.push(format!("{v}_mean"));
            header.push(format!("{v}_sem"));
        }
        w.write_record(&header).map_err(err)?;
        for (key, vals) in &self.rows {
            let mut rec = key.clone();
            for xs in vals {
                let (m, s) = mean_sem(xs);
                rec.push(m.to_string());
                rec.push(s.to_string());
            }
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(io_err(&path))?;
        Ok(path)
    }
}

#[derive(Clone, Debug)]
pub struct ReportOutcome {
    pub files: Vec<PathBuf>,
    pub runs: usize,
    /// Runs without usable metrics, with the reason.
    pub missing: Vec<(PathBuf, String)>,
}

fn tag<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.get("kind").and_then(|k| k.as_str()).map(str::to_string))
        .unwrap_or_default()
}

fn name<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn num(m: &Value, path: &[&str]) -> Option<f64> {
    path.iter().try_fold(m, |v, k| v.get(k))?.as_f64()
}

fn load(dir: &Path) -> CliResult<(Experiment, Value)> {
    let read = |n: &str| {
        let p = dir.join(n);
        fs::read_to_string(&p).map_err(io_err(&p))
    };
    let exp = serde_json::from_str(&read(EXPERIMENT)?)
        .map_err(|e| CliError::Report(format!("{}: {e}", dir.join(EXPERIMENT).display())))?;
    let metrics = serde_json::from_str(&read(METRICS)?)
        .map_err(|e| CliError::Report(format!("{}: {e}", dir.join(METRICS).display())))?;
    Ok((exp, metrics))
}

/// Scans `root` for run directories and writes the figure series into
/// `out` (default `<root>/report`).
pub fn report(root: &Path, out: Option<PathBuf>) -> CliResult<ReportOutcome> {
    let mut dirs: Vec<PathBuf> = WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.file_name() == MANIFEST)
        .filter_map(|e| e.path().parent().map(Path::to_path_buf))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Report(format!(
            "no runs found under {} (0 runs)",
            root.display()
        )));
    }

    let mut fig2c = Series::new("fig2c.csv", &["preset"], &["alignment"]);
    let mut fig2d = Series::new("fig2d.csv", &["preset", "m_ratio", "h_ratio"], &["alignment"]);
    let mut fig3b = Series::new("fig3b.csv", &["split", "arch"], &["ood_acc"]);
    let mut fig3cd = Series::new("fig3cd.csv", &["split", "arch"], &["r2_val", "r2_ood"]);
    let mut fig3e = Series::new("fig3e.csv", &["k", "split", "arch"], &["ood_acc"]);
    let mut fig3f = Series::new("fig3f.csv", &["arch", "hidden", "modules"], &["ood_acc"]);
    let mut fig4bc = Series::new("fig4bc.csv", &["split", "arch"], &["ood_loss"]);
    let mut fig4ef = Series::new("fig4ef.csv", &["split", "arch"], &["ood_accuracy", "ood_path_success"]);
    let mut missing = Vec::new();
    let mut used = 0;
    for d in &dirs {
        let manifest = match RunManifest::load(d) {
            Ok(m) => m,
            Err(e) => {
                missing.push((d.clone(), e.to_string()));
                continue;
            }
        };
        if manifest.status != RunStatus::Ok {
            let why = manifest
                .error
                .unwrap_or_else(|| format!("{:?}", manifest.status).to_lowercase());
            missing.push((d.clone(), why));
            continue;
        }
        let (exp, m) = match load(d) {
            Ok(x) => x,
            Err(e) => {
                missing.push((d.clone(), e.to_string()));
                continue;
            }
        };
        used += 1;
        match &exp {
            Experiment::Theory(e) => {
                let a = num(&m, &["alignment"]);
                fig2c.add(vec![e.preset.clone()], &[a]);
                fig2d.add(
                    vec![e.preset.clone(), e.m_ratio.to_string(), e.h_ratio.to_string()],
                    &[a],
                );
            }
            Experiment::Hyperteacher(e) => {
                let (split, arch) = (tag(&e.spec.split), name(&e.arch));
                let ood = num(&m, &["ood_acc"]);
                fig3b.add(vec![split.clone(), arch.clone()], &[ood]);
                if m.get("r2_ood").is_some_and(|v| !v.is_null()) {
                    fig3cd.add(
                        vec![split.clone(), arch.clone()],
                        &[num(&m, &["r2_val"]), num(&m, &["r2_ood"])],
                    );
                }
                fig3e.add(vec![e.spec.k.to_string(), split, arch.clone()], &[ood]);
                fig3f.add(
                    vec![arch, e.dims.hidden.to_string(), e.dims.modules.to_string()],
                    &[ood],
                );
            }
            Experiment::Prefgrid(e) => {
                fig4bc.add(vec![tag(&e.split), name(&e.arch)], &[num(&m, &["ood_loss"])]);
            }
            Experiment::Compgrid(e) => {
                fig4ef.add(
                    vec![tag(&e.split), name(&e.arch)],
                    &[num(&m, &["ood", "accuracy"]), num(&m, &["ood", "path_success"])],
                );
            }
            Experiment::Theorycheck(_) => {}
        }
    }

    let out = out.unwrap_or_else(|| root.join("report"));
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let mut files = Vec::new();
    for s in [&fig2c, &fig2d, &fig3b, &fig3cd, &fig3e, &fig3f, &fig4bc, &fig4ef] {
        if !s.rows.is_empty() {
            files.push(s.write(&out)?);
        }
    }
    if !missing.is_empty() {
        let text: String = missing
            .iter()
            .map(|(p, why)| format!("{}\t{why}\n", p.display()))
            .collect();
        let p = out.join("missing.txt");
        fs::write(&p, text).map_err(io_err(&p))?;
        files.push(p);
    }
    Ok(ReportOutcome {
        files,
        runs: used,
        missing,
    })
}
