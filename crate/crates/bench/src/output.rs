//! CSV, per-curve plot data, and the TOML record of a run.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use hodlr_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::experiments::{summarize, Experiment, ExperimentResult, Grid, Row, COLUMNS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Plotdata,
}

impl FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "plotdata" => Ok(Format::Plotdata),
            _ => Err(Error::InvalidParameter(format!("unknown format {s:?}"))),
        }
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn record(r: &Row) -> [String; 11] {
    [
        r.experiment.clone(),
        r.preset.clone(),
        r.n.to_string(),
        r.k.to_string(),
        fmt_f64(r.beta),
        r.trial.to_string(),
        fmt_f64(r.relative_error),
        fmt_f64(r.absolute_error),
        r.forward_queries.to_string(),
        r.transpose_queries.to_string(),
        r.seed.to_string(),
    ]
}

pub fn write_csv(rows: &[Row], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(COLUMNS)?;
    for r in rows {
        w.write_record(record(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<Row>> {
    let mut rd = csv::Reader::from_path(path)?;
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != COLUMNS {
        return Err(Error::Format(format!("unexpected CSV header {header:?}")));
    }
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

fn file_token(x: f64) -> String {
    format!("{x}").replace('.', "p")
}

/// One whitespace-separated series file per `(preset, k, beta)` curve with
/// `n` on the x-axis. Returns the files written, in curve order.
pub fn write_plotdata(result: &ExperimentResult, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut curves: Vec<(String, Vec<String>)> = Vec::new();
    for c in summarize(&result.rows) {
        let name = format!("{}_{}_k{}_beta{}.dat", result.experiment, c.preset, c.k, file_token(c.beta));
        let line = format!(
            "{} {} {} {} {} {} {} {}",
            c.n,
            c.trials,
            fmt_f64(c.mean_relative),
            fmt_f64(c.stderr_relative),
            fmt_f64(c.mean_absolute),
            fmt_f64(c.stderr_absolute),
            c.forward_queries,
            c.transpose_queries
        );
        match curves.iter_mut().find(|(n, _)| *n == name) {
            Some((_, lines)) => lines.push(line),
            None => curves.push((name, vec![line])),
        }
    }
    let mut written = Vec::new();
    for (name, lines) in curves {
        let mut text = String::from(
            "# n trials mean_relative_error stderr_relative_error mean_absolute_error stderr_absolute_error forward_queries transpose_queries\n",
        );
        for l in lines {
            text.push_str(&l);
            text.push('\n');
        }
        let path = dir.join(name);
        fs::write(&path, text)?;
        written.push(path);
    }
    Ok(written)
}

/// The resolved configuration stamped next to every output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: Experiment,
    pub version: String,
    pub grid: Grid,
}

impl RunRecord {
    pub fn new(experiment: Experiment, grid: &Grid) -> Self {
        RunRecord { experiment, version: env!("CARGO_PKG_VERSION").to_string(), grid: grid.clone() }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }
}

/// `<out>.toml` beside a file output, `<out>/run.toml` for a directory.
pub fn sidecar_path(out: &Path, format: Format) -> PathBuf {
    match format {
        Format::Csv => {
            let mut s = out.as_os_str().to_owned();
            s.push(".toml");
            PathBuf::from(s)
        }
        Format::Plotdata => out.join("run.toml"),
    }
}

/// Writes the result in `format` plus its sidecar; returns all paths.
pub fn emit(result: &ExperimentResult, out: &Path, format: Format) -> Result<Vec<PathBuf>> {
    let mut paths = match format {
        Format::Csv => {
            write_csv(&result.rows, out)?;
            vec![out.to_path_buf()]
        }
        Format::Plotdata => write_plotdata(result, out)?,
    };
    let side = sidecar_path(out, format);
    fs::write(&side, RunRecord::new(result.experiment, &result.grid).to_toml()?)?;
    paths.push(side);
    Ok(paths)
}
