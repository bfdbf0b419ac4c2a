//! Single-run execution and the run directory layout.

use std::fs;
use std::path::{Path, PathBuf};

use modcomp::gridworlds::experiment::{run_goal, run_pref};
use modcomp::hyperteacher::run_hyperteacher;
use modcomp::models::Checkpoint;
use modcomp::teacherstudent::run_theory;
use modcomp::trainer::TrainLog;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::check::run_check;
use crate::config::{Experiment, ExperimentConfig, Kind};
use crate::error::{io_err, CliError, CliResult};

pub const CODE_VERSION: &str = concat!("modcomp-cli ", env!("CARGO_PKG_VERSION"));

pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.json";
pub const EXPERIMENT: &str = "experiment.json";

/// Where a run's seed came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedLineage {
    /// Seed written in the config file (or given with `--seed`).
    pub config_seed: Option<u64>,
    /// Sweep base seed, cell index and replicate for sweep runs.
    pub sweep_seed: Option<u64>,
    pub cell: Option<usize>,
    pub replicate: Option<usize>,
    /// Seed the experiment ran with.
    pub run_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Diverged,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: Kind,
    pub config_hash: String,
    pub code_version: String,
    pub started: String,
    pub finished: String,
    pub seed_lineage: SeedLineage,
    pub status: RunStatus,
    pub error: Option<String>,
    pub files: Vec<String>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> CliResult<Self> {
        let p = dir.join(MANIFEST);
        let text = fs::read_to_string(&p).map_err(io_err(&p))?;
        serde_json::from_str(&text).map_err(|e| CliError::Report(format!("{}: {e}", p.display())))
    }
}

/// Result of one run as seen by callers.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub metrics: Option<Value>,
}

/// Run directory: `<root>/<label>-<first 12 hex digits of the hash>`.
pub fn run_dir(root: &Path, label: &str, hash: &str) -> PathBuf {
    root.join(format!("{label}-{}", &hash[..12]))
}

struct Writer {
    dir: PathBuf,
    files: Vec<String>,
}

impl Writer {
    fn new(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn put(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> CliResult<()> {
        let p = self.dir.join(name);
        fs::write(&p, bytes).map_err(io_err(&p))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T) -> CliResult<()> {
        let mut s = serde_json::to_string_pretty(v).map_err(modcomp::Error::from)?;
        s.push('\n');
        self.put(name, s)
    }

    fn log(&mut self, log: &TrainLog) -> CliResult<()> {
        self.put("train_log.csv", log.to_csv())
    }

    fn checkpoint(&mut self, name: &str, c: &Checkpoint) -> CliResult<()> {
        self.put(name, c.to_json()?)
    }
}

fn strip(mut v: Value, keys: &[&str]) -> Value {
    if let Some(o) = v.as_object_mut() {
        for k in keys {
            o.remove(*k);
        }
    }
    v
}

fn to_value<T: Serialize>(v: &T) -> CliResult<Value> {
    Ok(serde_json::to_value(v).map_err(modcomp::Error::from)?)
}

/// Runs `exp`, writing every artifact into `dir`. Metrics are a pure
/// function of the experiment; timestamps live only in the manifest.
pub fn execute(cfg: &ExperimentConfig, exp: &Experiment, dir: &Path, lineage: SeedLineage) -> CliResult<RunOutcome> {
    let started = now();
    let hash = exp.hash();
    let mut w = Writer::new(dir)?;
    w.put("config.toml", cfg.to_toml())?;
    w.json(EXPERIMENT, exp)?;
    let result = produce(exp, &mut w);
    let (status, error, metrics, diverged) = match result {
        Ok((mut m, diverged)) => {
            if let Some(o) = m.as_object_mut() {
                o.insert("kind".into(), json!(exp.kind()));
                o.insert("config_hash".into(), json!(hash));
            }
            w.json(METRICS, &m)?;
            let status = if diverged.is_some() {
                RunStatus::Diverged
            } else {
                RunStatus::Ok
            };
            (status, None, Some(m), diverged)
        }
        Err(e @ CliError::Core(modcomp::Error::Diverged { .. })) => (RunStatus::Diverged, Some(e), None, None),
        Err(e) => (RunStatus::Failed, Some(e), None, None),
    };
    let mut files = w.files.clone();
    files.push(MANIFEST.into());
    let manifest = RunManifest {
        kind: exp.kind(),
        config_hash: hash,
        code_version: CODE_VERSION.into(),
        started,
        finished: now(),
        seed_lineage: lineage,
        status,
        error: error.as_ref().map(|e| e.to_string()),
        files,
    };
    w.json(MANIFEST, &manifest)?;
    if let Some(e) = error {
        return Err(e);
    }
    if let Some((step, loss)) = diverged {
        return Err(CliError::Diverged {
            step,
            loss,
            dir: dir.to_path_buf(),
        });
    }
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        manifest,
        metrics,
    })
}

type Produced = (Value, Option<(usize, f64)>);

fn produce(exp: &Experiment, w: &mut Writer) -> CliResult<Produced> {
    match exp {
        Experiment::Theory(e) => {
            let r = run_theory(e)?;
            w.log(&r.log)?;
            w.checkpoint("checkpoint.json", &r.checkpoint)?;
            w.json("teacher.json", &r.teacher)?;
            w.json("student.json", &r.student)?;
            w.json("latent_fit.json", &r.latent_fit)?;
            let mut m = strip(
                to_value(&r)?,
                &["log", "checkpoint", "teacher", "student", "latent_fit"],
            );
            m["final_outer_loss"] = json!(r.log.last().map(|l| l.loss_outer));
            Ok((m, r.diverged))
        }
        Experiment::Hyperteacher(e) => {
            let r = run_hyperteacher(e)?;
            w.log(&r.log)?;
            w.checkpoint("checkpoint.json", &r.checkpoint)?;
            let mut csv = Vec::new();
            r.write_csv(&mut csv)?;
            w.put("results.csv", csv)?;
            if let Some(d) = &r.decode {
                w.json("decoder.json", d)?;
            }
            let mut m = strip(to_value(&r)?, &["log", "checkpoint", "decode"]);
            m["r2_val"] = json!(r.decode.as_ref().and_then(|d| d.r2_val));
            m["r2_ood"] = json!(r.decode.as_ref().and_then(|d| d.r2_ood));
            Ok((m, r.diverged))
        }
        Experiment::Prefgrid(e) => {
            let r = run_pref(e)?;
            w.log(&r.log)?;
            w.checkpoint("checkpoint.json", &r.checkpoint)?;
            Ok((strip(to_value(&r)?, &["log", "checkpoint"]), r.diverged))
        }
        Experiment::Compgrid(e) => {
            let r = run_goal(e)?;
            w.log(&r.log)?;
            w.checkpoint("checkpoint.json", &r.checkpoint)?;
            Ok((strip(to_value(&r)?, &["log", "checkpoint"]), r.diverged))
        }
        Experiment::Theorycheck(c) => Ok((run_check(c)?, None)),
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Loads, resolves and runs a config file. `seed` and `out` override the
/// file.
pub fn run_config(path: &Path, seed: Option<u64>, out: Option<PathBuf>) -> CliResult<RunOutcome> {
    let mut cfg = ExperimentConfig::load(path)?;
    if seed.is_some() {
        cfg.seed = seed;
    }
    if out.is_some() {
        cfg.out = out;
    }
    if cfg.sweep.is_some() {
        return Err(CliError::Config(format!(
            "{} declares a [sweep]; use the sweep command",
            path.display()
        )));
    }
    let exp = cfg.resolve()?;
    let dir = run_dir(&cfg.out_root(), &cfg.label(), &exp.hash());
    let lineage = SeedLineage {
        config_seed: cfg.seed,
        run_seed: exp.seed(),
        ..SeedLineage::default()
    };
    execute(&cfg, &exp, &dir, lineage)
}
