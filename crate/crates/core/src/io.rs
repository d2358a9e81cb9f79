//! CSV tables, JSON metadata and run manifests.
//!
//! Floats are written as `{:.16e}` so reruns compare byte for byte.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynamics::FieldFlow;
use crate::error::{Error, Result};
use crate::measure::MeasureFlow;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Round-trippable float formatting (negative zero prints as zero).
pub fn num(x: f64) -> String {
    let x = if x == 0.0 { 0.0 } else { x };
    format!("{x:.16e}")
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("csv: {other:?}")),
    }
}

pub fn write_csv<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::ShapeMismatch(format!("csv row has {} fields, header {}", row.len(), header.len())));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV back as header plus string rows.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()).map_err(csv_err))
        .collect::<Result<_>>()?;
    Ok((header, rows))
}

fn grid_rows(steps: usize, cells: usize, dt: f64, value: impl Fn(usize, usize) -> f64) -> Vec<Vec<String>> {
    let h = 1.0 / cells as f64;
    let mut rows = Vec::with_capacity((steps + 1) * cells);
    for k in 0..=steps {
        let t = num(k as f64 * dt);
        rows.extend((0..cells).map(|j| vec![t.clone(), num((j as f64 + 0.5) * h), num(value(k, j))]));
    }
    rows
}

/// `t,x,value` rows of a control or velocity field.
pub fn write_field_flow(path: &Path, field: &FieldFlow) -> Result<()> {
    write_csv(path, &["t", "x", "value"], grid_rows(field.steps(), field.cells(), field.dt(), |k, j| field.row(k)[j]))
}

/// `t,x,value` rows of a density flow.
pub fn write_measure_flow(path: &Path, flow: &MeasureFlow) -> Result<()> {
    write_csv(path, &["t", "x", "value"], grid_rows(flow.steps(), flow.cells(), flow.dt(), |k, j| flow.density(k)[j]))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Everything needed to reproduce the files of one output directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    /// SHA-256 of the config file bytes.
    pub spec_hash: String,
    pub seed: u64,
    /// `(cells, steps)`.
    pub grid: (usize, usize),
    /// Subcommand followed by its flags.
    pub command: Vec<String>,
    pub tool_version: String,
    /// File names relative to the output directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?)
    }
}

/// An output directory that records each file written into it.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    outputs: Vec<String>,
}

impl OutputDir {
    /// Creates `root`, first deleting the files a previous run recorded in
    /// its manifest so the new manifest covers everything left behind.
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        if root.join(MANIFEST_FILE).exists() {
            let old = RunManifest::read(root)?;
            for name in old.outputs.iter().filter(|n| !n.contains(['/', '\\'])) {
                match std::fs::remove_file(root.join(name)) {
                    Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e.into()),
                    _ => {}
                }
            }
            std::fs::remove_file(root.join(MANIFEST_FILE))?;
        }
        Ok(Self { root: root.to_path_buf(), outputs: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Path for `name`, registered as an output.
    pub fn file(&mut self, name: &str) -> Result<PathBuf> {
        if name == MANIFEST_FILE || name.contains(['/', '\\']) {
            return Err(Error::InvalidArgument(format!("bad output name {name:?}")));
        }
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
        Ok(self.root.join(name))
    }

    pub fn outputs(&self) -> &[String] {
        &self.outputs
    }

    /// Writes `manifest.json` listing every registered output.
    pub fn finish(self, spec_hash: &str, seed: u64, grid: (usize, usize), command: Vec<String>) -> Result<RunManifest> {
        let manifest = RunManifest {
            spec_hash: spec_hash.to_string(),
            seed,
            grid,
            command,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            outputs: self.outputs,
        };
        write_json(&self.root.join(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }
}
