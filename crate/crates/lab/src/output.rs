//! Run directory artifacts: `metrics.csv`, `summary.json`, JSON-lines dumps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::LabError;

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self, LabError> {
        std::fs::create_dir_all(root)
            .map_err(|e| LabError::Io(format!("{}: {e}", root.display())))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<(), LabError> {
        let text = serde_json::to_string_pretty(value).expect("value serializes");
        self.write_text(name, &(text + "\n"))
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<(), LabError> {
        let p = self.path(name);
        std::fs::write(&p, text).map_err(|e| LabError::Io(format!("{}: {e}", p.display())))
    }

    pub fn metrics(&self, columns: &[&str]) -> Result<MetricsWriter, LabError> {
        MetricsWriter::create(&self.path("metrics.csv"), columns)
    }

    /// One JSON document per line.
    pub fn write_jsonl<T: Serialize>(
        &self,
        name: &str,
        items: impl IntoIterator<Item = T>,
    ) -> Result<(), LabError> {
        let p = self.path(name);
        let err = |e: std::io::Error| LabError::Io(format!("{}: {e}", p.display()));
        let mut w = BufWriter::new(File::create(&p).map_err(err)?);
        for item in items {
            serde_json::to_writer(&mut w, &item).map_err(|e| LabError::Io(e.to_string()))?;
            w.write_all(b"\n").map_err(err)?;
        }
        w.flush().map_err(err)
    }
}

/// A cell of `metrics.csv`; `None` is written as an empty field.
pub type Cell = Option<f64>;

pub struct MetricsWriter {
    inner: csv::Writer<File>,
    width: usize,
    path: PathBuf,
    last_step: Option<f64>,
}

impl MetricsWriter {
    fn create(path: &Path, columns: &[&str]) -> Result<Self, LabError> {
        let mut inner = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)
            .map_err(|e| LabError::Io(format!("{}: {e}", path.display())))?;
        inner
            .write_record(columns)
            .map_err(|e| LabError::Io(format!("{}: {e}", path.display())))?;
        Ok(Self {
            inner,
            width: columns.len(),
            path: path.to_path_buf(),
            last_step: None,
        })
    }

    /// Writes one row; the first cell is the step and must not decrease.
    pub fn row(&mut self, cells: &[Cell]) -> Result<(), LabError> {
        assert_eq!(cells.len(), self.width, "metrics row width");
        if let Some(v) = cells.iter().flatten().find(|v| !v.is_finite()) {
            return Err(LabError::Runtime(format!(
                "refusing to write non-finite metric {v}"
            )));
        }
        if let (Some(prev), Some(Some(step))) = (self.last_step, cells.first()) {
            if *step < prev {
                return Err(LabError::Runtime("metrics steps must not decrease".into()));
            }
        }
        self.last_step = cells.first().copied().flatten();
        let record: Vec<String> = cells
            .iter()
            .map(|c| c.map(|v| v.to_string()).unwrap_or_default())
            .collect();
        self.inner
            .write_record(&record)
            .map_err(|e| LabError::Io(format!("{}: {e}", self.path.display())))
    }

    pub fn finish(mut self) -> Result<(), LabError> {
        self.inner
            .flush()
            .map_err(|e| LabError::Io(format!("{}: {e}", self.path.display())))
    }
}
