//! Mesh and metric files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::metrics::{Metrics, MetricsSummary};
use crate::error::{Error, Result};

/// Wavefront OBJ with one comment line, `v` lines at 6 decimals and 1-based `f` lines.
pub fn export_obj(verts: &[[f64; 3]], faces: &[[usize; 3]], path: &Path) -> Result<()> {
    if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= verts.len())) {
        return Err(Error::invalid(format!("face {f:?} references a missing vertex")));
    }
    let mut s = String::with_capacity(32 * (verts.len() + faces.len()) + 64);
    let _ = writeln!(s, "# meshspace: {} vertices, {} faces", verts.len(), faces.len());
    for v in verts {
        let _ = writeln!(s, "v {:.6} {:.6} {:.6}", v[0], v[1], v[2]);
    }
    for f in faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// JSON with the five mean metrics, and a CSV with mean and standard deviation per metric.
pub fn export_metrics(summary: &MetricsSummary, json_path: &Path, csv_path: &Path) -> Result<()> {
    let mut json = serde_json::to_string_pretty(&summary.mean)?;
    json.push('\n');
    fs::write(json_path, json).map_err(|e| Error::io(json_path, e))?;
    let mut csv = String::from("metric,mean,std,runs\n");
    for ((name, m), s) in Metrics::NAMES.iter().zip(summary.mean.as_array()).zip(summary.std.as_array()) {
        let _ = writeln!(csv, "{name},{m},{s},{}", summary.runs.len());
    }
    fs::write(csv_path, csv).map_err(|e| Error::io(csv_path, e))
}
