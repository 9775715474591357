//! File formats and the atomic output directory.
//!
//! Every CSV starts with `#`-prefixed provenance lines (`config_hash`, `seed`)
//! followed by a header row. Floats are written in scientific notation with
//! 17 significant digits and LF line endings, so identical inputs give
//! byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::flower::TrajectoryRecord;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub kind: &'static str,
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    fn write_header(&self, out: &mut String) {
        let _ = writeln!(out, "# flower-lab {}", self.kind);
        let _ = writeln!(out, "# config_hash={}", self.config_hash);
        let _ = writeln!(out, "# seed={}", self.seed);
    }
}

pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn dim_columns(out: &mut String, d: usize) {
    for j in 0..d {
        let _ = write!(out, ",dim_{j}");
    }
    out.push('\n');
}

fn push_row(out: &mut String, row: ArrayView1<'_, f64>) {
    for v in row {
        out.push(',');
        out.push_str(&fmt_float(*v));
    }
    out.push('\n');
}

/// `run_id,dim_0,…` with run ids `first_run_id..`.
pub fn samples_csv(prov: &Provenance, samples: ArrayView2<'_, f64>, first_run_id: u64) -> String {
    let mut out = String::new();
    prov.write_header(&mut out);
    out.push_str("run_id");
    dim_columns(&mut out, samples.ncols());
    for (i, row) in samples.rows().into_iter().enumerate() {
        let _ = write!(out, "{}", first_run_id + i as u64);
        push_row(&mut out, row);
    }
    out
}

/// `step,t,stage,dim_…` with stages `xt`, `xhat1`, `mu`, `xtilde1` per step.
pub fn trajectory_csv(prov: &Provenance, traj: &TrajectoryRecord) -> String {
    let d = traj.steps.first().map_or(0, |s| s.x_t.len());
    let mut out = String::new();
    prov.write_header(&mut out);
    out.push_str("step,t,stage");
    dim_columns(&mut out, d);
    for (k, s) in traj.steps.iter().enumerate() {
        for (stage, v) in [("xt", &s.x_t), ("xhat1", &s.x_hat1), ("mu", &s.mu), ("xtilde1", &s.x_tilde1)] {
            let _ = write!(out, "{k},{},{stage}", fmt_float(s.t));
            push_row(&mut out, v.view());
        }
    }
    out
}

pub fn loss_csv(prov: &Provenance, losses: &[f64]) -> String {
    let mut out = String::new();
    prov.write_header(&mut out);
    out.push_str("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(out, "{i},{}", fmt_float(*l));
    }
    out
}

/// Reads the numeric block of a samples CSV back as rows (without run ids).
pub fn parse_samples_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines.next().ok_or_else(|| Error::Config("samples file has no header".into()))?;
    let width = header.split(',').count();
    lines
        .map(|line| {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != width {
                return Err(Error::Config(format!("row has {} cells, expected {width}", cells.len())));
            }
            cells[1..]
                .iter()
                .map(|c| c.parse::<f64>().map_err(|e| Error::Config(format!("bad number {c:?}: {e}"))))
                .collect()
        })
        .collect()
}

/// A staging directory next to the destination. Files appear at the
/// destination only after [`commit`](Self::commit); dropping an uncommitted
/// directory removes everything written so far.
#[derive(Debug)]
pub struct AtomicDir {
    final_path: PathBuf,
    staging: PathBuf,
    committed: bool,
}

impl AtomicDir {
    pub fn create(final_path: &Path) -> Result<Self> {
        let name = final_path
            .file_name()
            .ok_or_else(|| Error::Config(format!("output path {} has no final component", final_path.display())))?
            .to_string_lossy()
            .into_owned();
        let parent = final_path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        }
        fs::create_dir(&staging).map_err(|e| Error::io(&staging, e))?;
        Ok(Self {
            final_path: final_path.to_path_buf(),
            staging,
            committed: false,
        })
    }

    pub fn staging_path(&self) -> &Path {
        &self.staging
    }

    pub fn write(&self, relative: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.staging.join(relative);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))
    }

    /// Moves the staged files into place, replacing any previous directory.
    pub fn commit(mut self) -> Result<PathBuf> {
        let backup = self.staging.with_extension("old");
        let replaced = self.final_path.exists();
        if replaced {
            fs::rename(&self.final_path, &backup).map_err(|e| Error::io(&self.final_path, e))?;
        }
        if let Err(e) = fs::rename(&self.staging, &self.final_path) {
            if replaced {
                let _ = fs::rename(&backup, &self.final_path);
            }
            return Err(Error::io(&self.final_path, e));
        }
        self.committed = true;
        if replaced {
            fs::remove_dir_all(&backup).map_err(|e| Error::io(&backup, e))?;
        }
        Ok(self.final_path.clone())
    }
}

impl Drop for AtomicDir {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}
