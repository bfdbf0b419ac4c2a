//! Compositional preference and compositional goal grid worlds.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::EpisodeData;
use crate::error::{invalid, Error, Result};

pub mod experiment;
pub mod goal;
pub mod pref;

/// Moves in action order: up, right, down, left.
pub const MOVES: [(isize, isize); 4] = [(-1, 0), (0, 1), (1, 0), (0, -1)];

/// Square wall layout; cells are indexed `row * size + col`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub size: usize,
    pub walls: Vec<bool>,
}

impl Layout {
    pub fn new(size: usize, walls: Vec<bool>) -> Result<Self> {
        if size == 0 || walls.len() != size * size {
            return Err(Error::InvalidLayout(format!(
                "{} wall flags for a {size}x{size} grid",
                walls.len()
            )));
        }
        Ok(Self { size, walls })
    }

    /// Parses rows of `#` (wall) and `.` (free).
    pub fn from_rows(rows: &[String]) -> Result<Self> {
        let size = rows.len();
        let mut walls = Vec::with_capacity(size * size);
        for row in rows {
            if row.chars().count() != size {
                return Err(Error::InvalidLayout(format!("row `{row}` is not {size} cells wide")));
            }
            for ch in row.chars() {
                walls.push(match ch {
                    '#' => true,
                    '.' => false,
                    _ => return Err(Error::InvalidLayout(format!("unknown cell `{ch}`"))),
                });
            }
        }
        Self::new(size, walls)
    }

    pub fn cells(&self) -> usize {
        self.size * self.size
    }

    pub fn coords(&self, cell: usize) -> (usize, usize) {
        (cell / self.size, cell % self.size)
    }

    pub fn is_wall(&self, cell: usize) -> bool {
        self.walls[cell]
    }

    pub fn free_cells(&self) -> Vec<usize> {
        (0..self.cells()).filter(|&c| !self.walls[c]).collect()
    }

    /// Cell reached by move `action` (0..4); walls and borders block.
    pub fn step(&self, cell: usize, action: usize) -> usize {
        let (r, c) = self.coords(cell);
        let (dr, dc) = MOVES[action];
        let (nr, nc) = (r as isize + dr, c as isize + dc);
        if nr < 0 || nc < 0 || nr >= self.size as isize || nc >= self.size as isize {
            return cell;
        }
        let next = nr as usize * self.size + nc as usize;
        if self.walls[next] {
            cell
        } else {
            next
        }
    }

    /// Shortest move count from every cell to `target` (None if unreachable).
    pub fn bfs_from(&self, target: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.cells()];
        let mut queue = std::collections::VecDeque::new();
        dist[target] = Some(0);
        queue.push_back(target);
        while let Some(cell) = queue.pop_front() {
            let d = dist[cell].expect("queued cells have a distance");
            for a in 0..MOVES.len() {
                let next = self.step(cell, a);
                if dist[next].is_none() {
                    dist[next] = Some(d + 1);
                    queue.push_back(next);
                }
            }
        }
        dist
    }
}

const FLAT_MAGIC: &[u8; 4] = b"MCEX";
const FLAT_VERSION: u32 = 1;

/// Writes the (x, y) rows of `episodes` as a flat little-endian binary:
/// magic `MCEX`, u32 version, u64 row count, u32 x width, u32 y width, then
/// per row the x values followed by the y values as f64. Support rows come
/// before query rows within each episode.
pub fn write_flat<W: Write>(episodes: &[EpisodeData], mut w: W) -> Result<()> {
    let first = episodes
        .first()
        .ok_or_else(|| Error::InvalidArgument("no episodes to export".into()))?;
    let (xd, yd) = (first.support.x.cols(), first.support.y.cols());
    let mut rows = 0u64;
    for ep in episodes {
        for b in [&ep.support, &ep.query] {
            if b.x.cols() != xd || b.y.cols() != yd {
                return invalid("episodes have different row widths");
            }
            rows += b.x.rows() as u64;
        }
    }
    w.write_all(FLAT_MAGIC)?;
    w.write_all(&FLAT_VERSION.to_le_bytes())?;
    w.write_all(&rows.to_le_bytes())?;
    w.write_all(&(xd as u32).to_le_bytes())?;
    w.write_all(&(yd as u32).to_le_bytes())?;
    for ep in episodes {
        for b in [&ep.support, &ep.query] {
            for r in 0..b.x.rows() {
                for v in b.x.row(r).iter().chain(b.y.row(r)) {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

/// Reads a file written by [`write_flat`] into `(x_width, y_width, rows)`.
pub fn read_flat(bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    let bad = |m: &str| Error::Parse(format!("flat export: {m}"));
    if bytes.len() < 24 || &bytes[..4] != FLAT_MAGIC {
        return Err(bad("missing header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    if u32_at(4) != FLAT_VERSION {
        return Err(bad("unsupported version"));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let (xd, yd) = (u32_at(16) as usize, u32_at(20) as usize);
    let width = xd + yd;
    if bytes.len() != 24 + rows * width * 8 {
        return Err(bad("length does not match header"));
    }
    let out = bytes[24..]
        .chunks_exact(width * 8)
        .map(|row| {
            row.chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect()
        })
        .collect();
    Ok((xd, yd, out))
}
