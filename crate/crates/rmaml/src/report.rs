//! Evaluation reports on disk: a CSV table plus a TOML sidecar.
//!
//! `report.csv` has the exact header `epsilon,accuracy,ci,n_tasks` and one
//! row per ε. Floats are written in Rust's shortest round-trip form, so a
//! load reproduces every value bit-for-bit. The sidecar (`report.toml`, the
//! CSV path with its extension replaced) holds `config_echo` (the resolved
//! experiment configuration as TOML text) and the optional `wall_time` in
//! seconds.

use std::fs;
use std::path::{Path, PathBuf};

use rmaml_core::evaluation::{EvalReport, EvalRow};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RunError};

pub const HEADER: &str = "epsilon,accuracy,ci,n_tasks";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    config_echo: String,
    wall_time: Option<f64>,
}

pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("toml")
}

pub fn to_csv(report: &EvalReport) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for r in &report.rows {
        out.push_str(&format!("{:?},{:?},{:?},{}\n", r.epsilon, r.accuracy, r.ci, r.n_tasks));
    }
    out
}

pub fn emit(report: &EvalReport, path: &Path) -> Result<()> {
    fs::write(path, to_csv(report)).map_err(|e| RunError::io(path, e))?;
    let side = sidecar_path(path);
    let text = toml::to_string(&Sidecar { config_echo: report.config_echo.clone(), wall_time: report.wall_time })
        .map_err(|e| RunError::format(&side, e.to_string()))?;
    fs::write(&side, text).map_err(|e| RunError::io(&side, e))
}

pub fn load(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
    let first = text.lines().next().unwrap_or("");
    if first != HEADER {
        return Err(RunError::format(path, format!("expected header `{HEADER}`, got `{first}`")));
    }
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in reader.deserialize::<EvalRow>() {
        rows.push(rec.map_err(|e| RunError::format(path, e.to_string()))?);
    }
    let side = sidecar_path(path);
    let (config_echo, wall_time) = match fs::read_to_string(&side) {
        Ok(t) => {
            let s: Sidecar = toml::from_str(&t).map_err(|e| RunError::format(&side, e.to_string()))?;
            (s.config_echo, s.wall_time)
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => (String::new(), None),
        Err(e) => return Err(RunError::io(&side, e)),
    };
    Ok(EvalReport { rows, config_echo, wall_time })
}
