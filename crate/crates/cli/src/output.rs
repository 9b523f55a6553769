//! CSV and manifest writers.
//!
//! Every CSV has a header row, LF line endings and numbers in `{:.16e}`
//! (17 significant digits, enough to round-trip an `f64`). Infinite
//! energies are written as `inf`.

use std::path::{Path, PathBuf};

use anyhow::Context;

/// Full-precision scientific notation.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub struct CsvTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)
            .with_context(|| format!("creating {}", path.display()))?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Writes tables under `dir` and remembers their names for the manifest.
pub struct Artifacts {
    dir: PathBuf,
    pub files: Vec<String>,
}

impl Artifacts {
    pub fn new(dir: &Path) -> anyhow::Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, table: &CsvTable) -> anyhow::Result<()> {
        table.write(&self.dir.join(name))?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn write_manifest(&self, name: &str, manifest: &serde_json::Value) -> anyhow::Result<()> {
        let path = self.dir.join(name);
        let mut text = serde_json::to_string_pretty(manifest)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}
