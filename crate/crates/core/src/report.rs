//! CSV writers and plain-text tables.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trainer::EpochRecord;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV on {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ReportError> {
    let csv_err = |source| ReportError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, ReportError> {
    let csv_err = |source| ReportError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().collect::<Result<Vec<T>, _>>().map_err(csv_err)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ReportError> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<(), ReportError> {
    fs::write(path, text).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub lr: f64,
    pub interior_residual: f64,
    pub l2_boundary: f64,
    pub h1_bottom: f64,
    pub frac_32_lateral: f64,
    pub frac_12_lateral: f64,
    pub total: f64,
    pub wall_ms: f64,
}

impl From<&EpochRecord> for TrainLogRow {
    fn from(e: &EpochRecord) -> Self {
        Self {
            epoch: e.epoch,
            lr: e.lr,
            interior_residual: e.loss.interior_residual,
            l2_boundary: e.loss.l2_boundary,
            h1_bottom: e.loss.h1_bottom,
            frac_32_lateral: e.loss.frac_32_lateral,
            frac_12_lateral: e.loss.frac_12_lateral,
            total: e.loss.total,
            wall_ms: e.wall_ms,
        }
    }
}

/// Fixed-width text table; the first column is left-aligned, the rest right.
pub fn text_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut width: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (c, cell) in row.iter().enumerate().take(cols) {
            width[c] = width[c].max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (c, cell) in cells.iter().enumerate() {
            if c > 0 {
                s.push_str("  ");
            }
            if c == 0 {
                s.push_str(&format!("{cell:<w$}", w = width[c]));
            } else {
                s.push_str(&format!("{cell:>w$}", w = width[c]));
            }
        }
        s.trim_end().to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    out.push_str(&"-".repeat(width.iter().sum::<usize>() + 2 * (cols.saturating_sub(1))));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Row {
        a: f64,
        b: String,
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        let rows = vec![
            Row { a: 0.1, b: "x".into() },
            Row { a: -3.0e-12, b: "y,z".into() },
        ];
        write_csv(&p, &rows).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("a,b\n"));
        assert_eq!(read_csv::<Row>(&p).unwrap(), rows);
    }

    #[test]
    fn table_alignment() {
        let t = text_table(&["y", "value"], &[vec!["1".into(), "0.5".into()], vec!["10".into(), "12.25".into()]]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "y   value");
        assert_eq!(lines[2], "1     0.5");
        assert_eq!(lines[3], "10  12.25");
    }
}
