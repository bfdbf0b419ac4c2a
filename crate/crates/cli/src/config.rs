//! Run configuration files (TOML), their resolution into concrete
//! experiments and the configuration hash.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use modcomp::gridworlds::experiment::{GoalExperiment, PrefExperiment};
use modcomp::gridworlds::goal::GoalSplit;
use modcomp::hyperteacher::{HyperteacherExperiment, SplitKind};
use modcomp::models::Arch;
use modcomp::teacherstudent::TheoryExperiment;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{io_err, CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Theory,
    Hyperteacher,
    Prefgrid,
    Compgrid,
    Theorycheck,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Theory => "theory",
            Kind::Hyperteacher => "hyperteacher",
            Kind::Prefgrid => "prefgrid",
            Kind::Compgrid => "compgrid",
            Kind::Theorycheck => "theorycheck",
        }
    }

    /// Config section holding this kind's settings.
    pub fn section(self) -> &'static str {
        match self {
            Kind::Theorycheck => "check",
            k => k.name(),
        }
    }
}

/// Grid axes (dotted config paths to value lists) and seed replicates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default = "one")]
    pub replicates: usize,
    #[serde(default)]
    pub axes: BTreeMap<String, Vec<toml::Value>>,
}

fn one() -> usize {
    1
}

/// One config file. The section named after `kind` holds the experiment;
/// it may start from `base = "scaled"` or `base = "paper"` and override
/// any field. A top-level `seed` replaces the section's seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Kind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theory: Option<toml::Table>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyperteacher: Option<toml::Table>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefgrid: Option<toml::Table>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compgrid: Option<toml::Table>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub check: Option<toml::Table>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckName {
    Theorem2,
    Counterexamples,
    Support,
    Identification,
}

/// Settings of a `theorycheck` run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckSpec {
    pub check: CheckName,
    /// Task family for `support` and `theorem2`.
    #[serde(default = "default_check_preset")]
    pub preset: String,
    /// Theory run directory for `identification`.
    #[serde(default)]
    pub run: Option<PathBuf>,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Random tasks evaluated by `theorem2`.
    #[serde(default = "default_check_tasks")]
    pub tasks: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_check_preset() -> String {
    "theory-discrete-connected".into()
}
fn default_tol() -> f64 {
    1e-2
}
fn default_check_tasks() -> usize {
    100
}

impl CheckSpec {
    pub fn new(check: CheckName) -> Self {
        Self {
            check,
            preset: default_check_preset(),
            run: None,
            tol: default_tol(),
            tasks: default_check_tasks(),
            seed: 0,
        }
    }
}

/// A fully resolved experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "experiment", rename_all = "lowercase")]
pub enum Experiment {
    Theory(TheoryExperiment),
    Hyperteacher(HyperteacherExperiment),
    Prefgrid(PrefExperiment),
    Compgrid(GoalExperiment),
    Theorycheck(CheckSpec),
}

impl Experiment {
    pub fn kind(&self) -> Kind {
        match self {
            Experiment::Theory(_) => Kind::Theory,
            Experiment::Hyperteacher(_) => Kind::Hyperteacher,
            Experiment::Prefgrid(_) => Kind::Prefgrid,
            Experiment::Compgrid(_) => Kind::Compgrid,
            Experiment::Theorycheck(_) => Kind::Theorycheck,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Experiment::Theory(e) => e.seed,
            Experiment::Hyperteacher(e) => e.seed,
            Experiment::Prefgrid(e) => e.seed,
            Experiment::Compgrid(e) => e.seed,
            Experiment::Theorycheck(e) => e.seed,
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self {
            Experiment::Theory(e) => e.seed = seed,
            Experiment::Hyperteacher(e) => e.seed = seed,
            Experiment::Prefgrid(e) => e.seed = seed,
            Experiment::Compgrid(e) => e.seed = seed,
            Experiment::Theorycheck(e) => e.seed = seed,
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        match self {
            Experiment::Theory(e) => e.validate()?,
            Experiment::Hyperteacher(e) => e.validate()?,
            Experiment::Prefgrid(e) => e.validate()?,
            Experiment::Compgrid(e) => e.validate()?,
            Experiment::Theorycheck(e) => {
                if e.check == CheckName::Identification && e.run.is_none() {
                    return Err(CliError::Config("[check] identification needs `run`".into()));
                }
                if !(e.tol > 0.0) || e.tasks == 0 {
                    return Err(CliError::Config("[check] tol and tasks must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Canonical JSON: object keys sorted, floats in shortest round-trip form.
    pub fn canonical_json(&self) -> String {
        let v = serde_json::to_value(self).expect("experiments serialize");
        serde_json::to_string(&v).expect("values serialize")
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configs serialize to TOML")
    }

    fn section_table(&self) -> Option<&toml::Table> {
        match self.kind {
            Kind::Theory => self.theory.as_ref(),
            Kind::Hyperteacher => self.hyperteacher.as_ref(),
            Kind::Prefgrid => self.prefgrid.as_ref(),
            Kind::Compgrid => self.compgrid.as_ref(),
            Kind::Theorycheck => self.check.as_ref(),
        }
    }

    /// Builds the concrete experiment described by the config.
    pub fn resolve(&self) -> CliResult<Experiment> {
        let section = self.kind.section();
        let table = self
            .section_table()
            .ok_or_else(|| CliError::Config(format!("kind `{}` needs a [{section}] section", self.kind.name())))?;
        let mut over = serde_json::to_value(table).map_err(|e| CliError::Config(format!("[{section}]: {e}")))?;
        let base = match over.as_object_mut().and_then(|o| o.remove("base")) {
            None => None,
            Some(Value::String(s)) if s == "scaled" || s == "paper" => Some(s),
            Some(other) => {
                return Err(CliError::Config(format!(
                    "[{section}] base: expected \"scaled\" or \"paper\", got {other}"
                )))
            }
        };
        let ctx = Ctx { section, over: &over };
        let mut exp = match self.kind {
            Kind::Theory => {
                let v = match base.as_deref() {
                    None => over.clone(),
                    Some(b) => {
                        let preset: String = ctx.field(&["preset"])?;
                        let exp = if b == "paper" {
                            TheoryExperiment::paper(&preset)
                        } else {
                            TheoryExperiment::scaled(&preset)
                        };
                        merged(&exp, &over)
                    }
                };
                Experiment::Theory(ctx.parse(v)?)
            }
            Kind::Hyperteacher => {
                let v = match base.as_deref() {
                    None => over.clone(),
                    Some(b) => {
                        let arch: Arch = ctx.field(&["arch"])?;
                        let m: usize = ctx.field(&["spec", "m"])?;
                        let k: usize = ctx.field(&["spec", "k"])?;
                        let split: SplitKind = ctx.field(&["spec", "split"])?;
                        let exp = if b == "paper" {
                            HyperteacherExperiment::paper(m, k, split, arch)?
                        } else {
                            HyperteacherExperiment::scaled(m, k, split, arch)?
                        };
                        merged(&exp, &over)
                    }
                };
                Experiment::Hyperteacher(ctx.parse(v)?)
            }
            Kind::Prefgrid => {
                let v = match base.as_deref() {
                    None => over.clone(),
                    Some(b) => {
                        let arch: Arch = ctx.field(&["arch"])?;
                        let split: SplitKind = ctx.field(&["split"])?;
                        let exp = if b == "paper" {
                            PrefExperiment::paper(arch, split)?
                        } else {
                            PrefExperiment::scaled(arch, split)?
                        };
                        merged(&exp, &over)
                    }
                };
                Experiment::Prefgrid(ctx.parse(v)?)
            }
            Kind::Compgrid => {
                let v = match base.as_deref() {
                    None => over.clone(),
                    Some(b) => {
                        let arch: Arch = ctx.field(&["arch"])?;
                        let split: GoalSplit = ctx.field(&["split"])?;
                        let exp = if b == "paper" {
                            GoalExperiment::paper(arch, split)?
                        } else {
                            GoalExperiment::scaled(arch, split)?
                        };
                        merged(&exp, &over)
                    }
                };
                Experiment::Compgrid(ctx.parse(v)?)
            }
            Kind::Theorycheck => {
                if base.is_some() {
                    return Err(CliError::Config("[check] has no base".into()));
                }
                Experiment::Theorycheck(ctx.parse(over.clone())?)
            }
        };
        if let Some(seed) = self.seed {
            exp.set_seed(seed);
        }
        exp.validate()?;
        Ok(exp)
    }

    /// Sets the value at a dotted path such as `theory.h_ratio`, creating
    /// intermediate tables.
    pub fn set_path(&mut self, path: &str, value: toml::Value) -> CliResult<()> {
        let mut root = toml::Value::try_from(&*self).map_err(|e| CliError::Config(e.to_string()))?;
        let keys: Vec<&str> = path.split('.').collect();
        if keys.iter().any(|k| k.is_empty()) {
            return Err(CliError::Config(format!("bad axis path `{path}`")));
        }
        let mut cur = &mut root;
        for k in &keys[..keys.len() - 1] {
            let t = cur
                .as_table_mut()
                .ok_or_else(|| CliError::Config(format!("axis `{path}`: `{k}` is not inside a table")))?;
            cur = t
                .entry(k.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        cur.as_table_mut()
            .ok_or_else(|| CliError::Config(format!("axis `{path}` does not name a table field")))?
            .insert(keys[keys.len() - 1].to_string(), value);
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(format!("axis `{path}`: {e}")))?;
        Ok(())
    }

    /// Hash of the whole file contents after parsing, so whitespace and
    /// comments do not matter.
    pub fn hash(&self) -> String {
        let v = serde_json::to_value(self).expect("configs serialize");
        hex::encode(Sha256::digest(
            serde_json::to_string(&v).expect("values serialize").as_bytes(),
        ))
    }

    /// Output root: the config's `out`, else `$MODCOMP_OUT`, else `runs`.
    pub fn out_root(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(default_out_root)
    }

    /// Directory label: the config name, else the kind.
    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.kind.name().to_string())
    }
}

pub const OUT_ENV: &str = "MODCOMP_OUT";

pub fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

struct Ctx<'a> {
    section: &'a str,
    over: &'a Value,
}

impl Ctx<'_> {
    fn field<T: DeserializeOwned>(&self, path: &[&str]) -> CliResult<T> {
        let name = path.join(".");
        let mut v = self.over;
        for k in path {
            v = v
                .get(k)
                .ok_or_else(|| CliError::Config(format!("[{}] with a base needs `{name}`", self.section)))?;
        }
        serde_json::from_value(v.clone()).map_err(|e| CliError::Config(format!("[{}] {name}: {e}", self.section)))
    }

    /// Deserializes the merged section, naming the offending field path.
    fn parse<T: DeserializeOwned>(&self, v: Value) -> CliResult<T> {
        serde_path_to_error::deserialize(v).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." {
                CliError::Config(format!("[{}]: {inner}", self.section))
            } else {
                CliError::Config(format!("[{}] {path}: {inner}", self.section))
            }
        })
    }
}

fn merged<T: Serialize>(base: &T, over: &Value) -> Value {
    let mut v = serde_json::to_value(base).expect("experiments serialize");
    merge(&mut v, over);
    v
}

/// Recursive overlay. A tagged object whose `kind` differs from the base
/// replaces it whole.
fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            let retag = match (b.get("kind"), o.get("kind")) {
                (Some(x), Some(y)) => x != y,
                _ => false,
            };
            if retag {
                *b = o.clone();
                return;
            }
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}
