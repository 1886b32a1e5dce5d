//! CSV tables, plot-script stubs and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::checkpoint::FORMAT_VERSION;
use crate::error::{Error, Result};

use super::config::hex;

/// A header plus string rows, written with `,` separators and `.` decimals.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&'static str]) -> Self {
        Self {
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width must match the header");
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let io = |e: csv::Error| Error::Io {
            path: path.to_path_buf(),
            source: e.into(),
        };
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        w.write_record(&self.header).map_err(io)?;
        for r in &self.rows {
            w.write_record(r).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn fmt_f(v: f64) -> String {
    format!("{v}")
}

pub fn fmt_opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

/// Gnuplot script plotting `y` against `x` for each distinct value of `series`
/// (column numbers are 1-based).
pub fn gnuplot_stub(csv_name: &str, title: &str, x: (usize, &str), y: (usize, &str), series: Option<(usize, &[&str])>) -> String {
    let mut s = format!(
        "set datafile separator ','\nset key autotitle columnhead\nset title '{title}'\n\
         set xlabel '{}'\nset ylabel '{}'\nset grid\n",
        x.1, y.1
    );
    match series {
        Some((col, values)) => {
            let parts: Vec<String> = values
                .iter()
                .map(|v| {
                    format!(
                        "'{csv_name}' using {}:(strcol({col}) eq '{v}' ? ${} : NaN) with linespoints title '{v}'",
                        x.0, y.0
                    )
                })
                .collect();
            s.push_str(&format!("plot {}\n", parts.join(", \\\n     ")));
        }
        None => s.push_str(&format!("plot '{csv_name}' using {}:{} with linespoints\n", x.0, y.0)),
    }
    s
}

/// Key/value manifest describing one command's run; contains no timestamps
/// so repeated runs produce identical bytes.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub mode: String,
    pub seed: u64,
    pub config_sha256: String,
    pub outputs: Vec<PathBuf>,
}

impl Manifest {
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let mut text = format!(
            "mode={}\nseed={}\nconfig_sha256={}\ncrate_version={}\ncheckpoint_format={}\n",
            self.mode,
            self.seed,
            self.config_sha256,
            env!("CARGO_PKG_VERSION"),
            FORMAT_VERSION
        );
        for p in &self.outputs {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            let name = p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into());
            text.push_str(&format!("output.{name}={}\n", hex(&Sha256::digest(&bytes))));
        }
        let path = out_dir.join("run-manifest.txt");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
