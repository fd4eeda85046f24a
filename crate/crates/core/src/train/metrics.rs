//! Per-step loss log as CSV.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::loss::LossBreakdown;

pub const HEADER: &str = "step,loss_total,loss_eps,loss_rec,loss_lpips,loss_clip,wall_seconds";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: LossBreakdown,
    /// Excluded from determinism comparisons.
    pub wall_seconds: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.step, l.total, l.eps_mse, l.rec, l.lpips, l.clip, self.wall_seconds
        )
    }

    pub fn parse(line: &str, offset: usize) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::parse(offset, format!("expected 7 fields, got {}", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse()
                .map_err(|_| Error::parse(offset, format!("bad number '{}'", f[i])))
        };
        Ok(MetricsRow {
            step: f[0]
                .parse()
                .map_err(|_| Error::parse(offset, format!("bad step '{}'", f[0])))?,
            loss: LossBreakdown {
                total: num(1)?,
                eps_mse: num(2)?,
                rec: num(3)?,
                lpips: num(4)?,
                clip: num(5)?,
            },
            wall_seconds: num(6)?,
        })
    }
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.split_inclusive('\n');
    match lines.next() {
        Some(h) if h.trim_end_matches('\n') == HEADER => {}
        _ => return Err(Error::parse(0, "missing metrics header")),
    }
    let mut offset = HEADER.len() + 1;
    let mut rows = Vec::new();
    for raw in lines {
        let line = raw.trim_end_matches('\n');
        if !line.is_empty() {
            rows.push(MetricsRow::parse(line, offset)?);
        }
        offset += raw.len();
    }
    Ok(rows)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_metrics(&text)
}

/// Append-only log, optionally backed by a file.
pub struct MetricsLog {
    file: Option<(PathBuf, File)>,
    last_wall: f64,
}

impl MetricsLog {
    pub fn memory() -> Self {
        MetricsLog {
            file: None,
            last_wall: 0.0,
        }
    }

    /// Open `path` for a run whose next row is `resume_step + 1`. Existing
    /// rows up to `resume_step` are kept; later ones are dropped.
    pub fn open(path: &Path, resume_step: u64) -> Result<Self> {
        let kept = if resume_step > 0 && path.exists() {
            read_metrics(path)?
                .into_iter()
                .filter(|r| r.step <= resume_step)
                .collect()
        } else {
            Vec::new()
        };
        let mut text = format!("{HEADER}\n");
        for r in &kept {
            text.push_str(&r.to_csv());
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::file(path, e))?;
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::file(path, e))?;
        Ok(MetricsLog {
            file: Some((path.to_path_buf(), file)),
            last_wall: kept.last().map_or(0.0, |r| r.wall_seconds),
        })
    }

    pub fn last_wall(&self) -> f64 {
        self.last_wall
    }

    pub fn push(&mut self, row: &MetricsRow) -> Result<()> {
        self.last_wall = row.wall_seconds;
        if let Some((path, f)) = &mut self.file {
            writeln!(f, "{}", row.to_csv()).map_err(|e| Error::file(path.clone(), e))?;
        }
        Ok(())
    }
}
