//! CSV and JSON output for paths, trackers and batch summaries.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use crate::engine::Path;
use crate::error::Result;
use crate::local_time::LocalTimeTracker;
use crate::stats::mean_se;

/// `t,x` rows with a header.
pub fn write_path_csv<W: Write>(out: &mut W, path: &Path) -> Result<()> {
    writeln!(out, "t,x")?;
    for (t, x) in path.times.iter().zip(&path.values) {
        writeln!(out, "{t},{x}")?;
    }
    Ok(())
}

/// `t,local_time` rows from the tracker history.
pub fn write_tracker_csv<W: Write>(out: &mut W, tracker: &LocalTimeTracker) -> Result<()> {
    writeln!(out, "t,local_time")?;
    for (t, l) in &tracker.history {
        writeln!(out, "{t},{l}")?;
    }
    Ok(())
}

/// Writes `path_{index:06}.csv` files under `dir`, creating it if needed.
pub fn write_path_files(dir: &FsPath, paths: &[Path]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for p in paths {
        let mut f = BufWriter::new(File::create(dir.join(format!("path_{:06}.csv", p.index)))?);
        write_path_csv(&mut f, p)?;
        f.flush()?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerminalStats {
    pub mean: Option<f64>,
    pub se: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub n_alive: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub n_paths: usize,
    pub dt: f64,
    pub killed_fraction: f64,
    /// Final states of the paths still alive.
    pub terminal_stats: TerminalStats,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

impl BatchSummary {
    pub fn from_paths(paths: &[Path], dt: f64) -> Self {
        let killed = paths.iter().filter(|p| p.killed).count();
        let alive: Vec<f64> = paths
            .iter()
            .filter(|p| !p.killed)
            .map(|p| p.end_value())
            .collect();
        let (mean, se) = mean_se(&alive);
        let min = alive.iter().copied().fold(f64::INFINITY, f64::min);
        let max = alive.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        BatchSummary {
            n_paths: paths.len(),
            dt,
            killed_fraction: if paths.is_empty() {
                0.0
            } else {
                killed as f64 / paths.len() as f64
            },
            terminal_stats: TerminalStats {
                mean: finite(mean),
                se: finite(se),
                min: finite(min),
                max: finite(max),
                n_alive: alive.len(),
            },
        }
    }
}
