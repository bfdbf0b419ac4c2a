//! Grid-world dataset export: flat binary rows plus a JSON sidecar.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use modcomp::data::EpisodeData;
use modcomp::gridworlds::{goal, pref, write_flat};
use modcomp::numcore::RngState;
use modcomp::taskspace::{enumerate_masks, SamplerKind};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EnvName {
    Pref,
    Goal,
}

/// Demonstration placements per preference task.
pub const PREF_INSTANCES: usize = 32;
/// Preference tasks combine up to this many modules.
pub const PREF_MAX_K: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeIndex {
    pub support_rows: usize,
    pub query_rows: usize,
    pub z: Option<Vec<f64>>,
    pub mask: Option<String>,
    pub label: Option<String>,
}

/// Sidecar describing a flat export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportMeta {
    pub env: EnvName,
    pub format_version: u32,
    pub observation_version: u32,
    pub seed: u64,
    pub tasks: usize,
    pub x_dim: usize,
    pub y_dim: usize,
    pub rows: usize,
    pub episodes: Vec<EpisodeIndex>,
}

pub fn sample_episodes(env: EnvName, tasks: usize, seed: u64) -> CliResult<Vec<EpisodeData>> {
    let root = RngState::new(seed);
    let mut rng = root.child_named("episodes");
    match env {
        EnvName::Pref => {
            let world = pref::PrefEnv::new(&mut root.child_named("env"))?;
            let set = enumerate_masks(pref::MODULES, PREF_MAX_K, SamplerKind::Continuous)?;
            (0..tasks)
                .map(|_| {
                    let lat = set.sample(&mut rng)?;
                    Ok(pref::make_episode(&world, &lat, PREF_INSTANCES, &mut rng)?)
                })
                .collect()
        }
        EnvName::Goal => {
            let mazes = goal::default_mazes()?;
            let goals = goal::GoalSpec::all();
            (0..tasks)
                .map(|_| {
                    let g = goals[rng.below(goals.len())];
                    Ok(goal::make_episode(&mazes, g, &mut rng)?)
                })
                .collect()
        }
    }
}

/// Writes `<out>/<env>.bin` and `<out>/<env>.json`; returns both paths.
pub fn export(env: EnvName, tasks: usize, seed: u64, out: &Path) -> CliResult<(PathBuf, PathBuf)> {
    if tasks == 0 {
        return Err(CliError::Config("--tasks must be >= 1".into()));
    }
    let episodes = sample_episodes(env, tasks, seed)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let stem = match env {
        EnvName::Pref => "pref",
        EnvName::Goal => "goal",
    };
    let bin = out.join(format!("{stem}.bin"));
    let file = fs::File::create(&bin).map_err(io_err(&bin))?;
    write_flat(&episodes, BufWriter::new(file))?;
    let first = &episodes[0];
    let meta = ExportMeta {
        env,
        format_version: 1,
        observation_version: match env {
            EnvName::Pref => pref::OBS_VERSION,
            EnvName::Goal => goal::OBS_VERSION,
        },
        seed,
        tasks,
        x_dim: first.support.x.cols(),
        y_dim: first.support.y.cols(),
        rows: episodes.iter().map(|e| e.support.x.rows() + e.query.x.rows()).sum(),
        episodes: episodes
            .iter()
            .map(|e| EpisodeIndex {
                support_rows: e.support.x.rows(),
                query_rows: e.query.x.rows(),
                z: e.task.z.clone(),
                mask: e.task.mask.as_ref().map(|m| m.to_string()),
                label: e.task.label.clone(),
            })
            .collect(),
    };
    let json = out.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&meta).map_err(modcomp::Error::from)?;
    fs::write(&json, text + "\n").map_err(io_err(&json))?;
    Ok((bin, json))
}
