use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::Value;

use crate::check::run_check;
use crate::config::{CheckName, CheckSpec, Experiment, ExperimentConfig, Kind};
use crate::error::{io_err, CliError, CliResult};
use crate::export::{export, EnvName};
use crate::report::report;
use crate::run::run_config;
use crate::sweep::run_sweep;

#[derive(Debug, Parser)]
#[command(name = "modcomp", version, about = "Compositional generalization experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment from a config file.
    Run {
        #[arg(long, short)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output root (default: config `out`, then $MODCOMP_OUT, then ./runs).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the grid declared in a config's [sweep] section.
    Sweep {
        #[arg(long, short)]
        config: PathBuf,
        /// Base seed from which the per-cell seeds are derived.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write per-figure CSV series from the runs under a directory.
    Report {
        dir: PathBuf,
        /// Destination directory (default: <dir>/report).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Theory checks: theorem2, counterexamples, support, identification.
    Check {
        #[arg(value_enum, required_unless_present = "config")]
        name: Option<CheckArg>,
        /// A `kind = "theorycheck"` config instead of flags.
        #[arg(long, short, conflicts_with = "name")]
        config: Option<PathBuf>,
        /// Theory run directory (identification).
        #[arg(long)]
        run: Option<PathBuf>,
        /// Task preset (support, theorem2).
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the report as JSON into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export grid-world episodes as a flat binary with a JSON sidecar.
    EnvExport {
        #[arg(long, value_enum)]
        env: EnvName,
        #[arg(long, default_value_t = 100)]
        tasks: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum CheckArg {
    Theorem2,
    Counterexamples,
    Support,
    Identification,
}

impl From<CheckArg> for CheckName {
    fn from(c: CheckArg) -> Self {
        match c {
            CheckArg::Theorem2 => CheckName::Theorem2,
            CheckArg::Counterexamples => CheckName::Counterexamples,
            CheckArg::Support => CheckName::Support,
            CheckArg::Identification => CheckName::Identification,
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Prints a line to stdout, ignoring a closed pipe.
fn say(line: String) {
    let _ = writeln!(std::io::stdout(), "{line}");
}

fn failed_checks(v: &Value) -> bool {
    if v.get("pass") == Some(&Value::Bool(false)) {
        return true;
    }
    v.get("constructions")
        .and_then(Value::as_array)
        .is_some_and(|cs| cs.iter().any(|c| c.get("pass") == Some(&Value::Bool(false))))
}

fn dispatch(cmd: Command) -> CliResult<i32> {
    match cmd {
        Command::Run { config, seed, out } => {
            let o = run_config(&config, seed, out)?;
            say(format!("{}", o.dir.display()));
            Ok(0)
        }
        Command::Sweep {
            config,
            seed,
            out,
            jobs,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if seed.is_some() {
                cfg.seed = seed;
            }
            let o = run_sweep(&cfg, jobs, out)?;
            let bad = o.runs.iter().filter(|r| r.error.is_some()).count();
            say(format!("{}", o.dir.display()));
            eprintln!("{} runs, {bad} failed or diverged", o.runs.len());
            Ok(if bad == 0 { 0 } else { 1 })
        }
        Command::Report { dir, out } => {
            let o = report(&dir, out)?;
            for (p, why) in &o.missing {
                eprintln!("missing: {} ({why})", p.display());
            }
            for f in &o.files {
                say(format!("{}", f.display()));
            }
            eprintln!("{} runs used, {} missing", o.runs, o.missing.len());
            Ok(0)
        }
        Command::Check {
            name,
            config,
            run,
            preset,
            tol,
            seed,
            out,
        } => {
            let mut spec = match (name, config) {
                (_, Some(path)) => {
                    let cfg = ExperimentConfig::load(&path)?;
                    if cfg.kind != Kind::Theorycheck {
                        return Err(CliError::Config(format!(
                            "{}: check needs kind = \"theorycheck\"",
                            path.display()
                        )));
                    }
                    match cfg.resolve()? {
                        Experiment::Theorycheck(s) => s,
                        _ => unreachable!("theorycheck configs resolve to checks"),
                    }
                }
                (Some(n), None) => CheckSpec::new(n.into()),
                (None, None) => return Err(CliError::Config("check needs a name or --config".into())),
            };
            if run.is_some() {
                spec.run = run;
            }
            if let Some(p) = preset {
                spec.preset = p;
            }
            if let Some(t) = tol {
                spec.tol = t;
            }
            if let Some(s) = seed {
                spec.seed = s;
            }
            Experiment::Theorycheck(spec.clone()).validate()?;
            let v = run_check(&spec)?;
            let text = serde_json::to_string_pretty(&v).map_err(modcomp::Error::from)?;
            say(text.clone());
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
                let p = dir.join(format!(
                    "check-{}.json",
                    serde_json::to_value(spec.check).unwrap().as_str().unwrap()
                ));
                std::fs::write(&p, text + "\n").map_err(io_err(&p))?;
            }
            Ok(if failed_checks(&v) { 1 } else { 0 })
        }
        Command::EnvExport { env, tasks, seed, out } => {
            let (bin, json) = export(env, tasks, seed, &out)?;
            say(format!("{}\n{}", bin.display(), json.display()));
            Ok(0)
        }
    }
}
