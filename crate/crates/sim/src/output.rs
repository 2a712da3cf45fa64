//! CSV tables and run manifests.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;

/// Cell of an output table.
#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Str(String),
    Int(i64),
    Float(f64),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Str(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Str(v)
    }
}

/// Float with 17 significant digits; non-finite values as `NaN`, `inf`, `-inf`.
pub fn format_float(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.16e}")
    }
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Str(s) => s.clone(),
            Cell::Int(i) => i.to_string(),
            Cell::Float(v) => format_float(*v),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.header.len(), "row width does not match the header");
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render))?;
        }
        Ok(String::from_utf8(w.into_inner()?)?)
    }
}

/// Record of one CLI run, written next to its outputs.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub tool_version: String,
    pub wall_time: f64,
    pub outputs: Vec<String>,
}

/// Collects the files of a run and writes the manifest at the end.
pub struct RunOutput {
    dir: PathBuf,
    subcommand: String,
    seed: u64,
    config: serde_json::Value,
    outputs: Vec<String>,
    start: Instant,
}

impl RunOutput {
    pub fn create(dir: &Path, subcommand: &str, seed: u64, config: serde_json::Value) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(RunOutput {
            dir: dir.to_path_buf(),
            subcommand: subcommand.into(),
            seed,
            config,
            outputs: Vec::new(),
            start: Instant::now(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write_table(&mut self, name: &str, table: &Table) -> Result<PathBuf> {
        self.write_text(name, &table.to_csv()?)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        self.write_text(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(name.into());
        Ok(path)
    }

    pub fn finish(self) -> Result<RunManifest> {
        let m = RunManifest {
            subcommand: self.subcommand,
            config: self.config,
            seed: self.seed,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            wall_time: self.start.elapsed().as_secs_f64(),
            outputs: self.outputs,
        };
        let path = self.dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&m)? + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_have_17_significant_digits() {
        assert_eq!(format_float(0.1), "1.0000000000000001e-1");
        assert_eq!(format_float(-2.0), "-2.0000000000000000e0");
        assert_eq!(format_float(f64::NAN), "NaN");
        assert_eq!(format_float(f64::NEG_INFINITY), "-inf");
        let v = 1.0 / 3.0;
        assert_eq!(format_float(v).parse::<f64>().unwrap(), v);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let mut t = Table::new(&["name", "n", "x"]);
        t.push(vec!["a,b".into(), 3usize.into(), 0.5.into()]);
        let s = t.to_csv().unwrap();
        assert_eq!(s, "name,n,x\n\"a,b\",3,5.0000000000000000e-1\n");
    }

    #[test]
    fn manifest_lists_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = RunOutput::create(dir.path(), "toy1d", 7, serde_json::json!({"h": [0.01]})).unwrap();
        out.write_table("t.csv", &Table::new(&["a"])).unwrap();
        let m = out.finish().unwrap();
        assert_eq!(m.outputs, vec!["t.csv".to_string()]);
        let text = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["seed"], 7);
        assert_eq!(v["subcommand"], "toy1d");
    }
}
