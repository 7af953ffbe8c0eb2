//! Comma-delimited numeric tables with one label column.
//!
//! The header line is optional and detected by non-numeric feature cells.
//! Label cells may be arbitrary strings; they are mapped to dense indices in
//! first-appearance order and the mapping is kept on the dataset for audit.

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

/// Loads a rectangular `,`-separated table, treating column `label_column`
/// as the class label and every other column as a feature.
pub fn load_delimited(path: &Path, label_column: usize) -> Result<Dataset> {
    let name = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(&name, e))?;
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .peekable();

    let first = lines.peek().cloned();
    let Some((_, first_line)) = first else {
        return Err(Error::format(&name, "empty table"));
    };
    let width = first_line.split(',').count();
    if width < 2 {
        return Err(Error::Config(format!(
            "table has {width} column(s); need features besides the label column"
        )));
    }
    if label_column >= width {
        return Err(Error::Config(format!(
            "label column {label_column} out of range for {width} columns"
        )));
    }

    // Header detection: any non-numeric feature cell on the first line.
    let has_header = first_line
        .split(',')
        .enumerate()
        .any(|(c, cell)| c != label_column && cell.trim().parse::<f64>().is_err());
    if has_header {
        lines.next();
    }

    let mut features = Vec::new();
    let mut label_names: Vec<String> = Vec::new();
    let mut labels = Vec::new();
    for (line_idx, line) in lines {
        let line_no = line_idx + 1;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != width {
            return Err(Error::format(
                &name,
                format!("line {line_no}: {} cells, expected {width}", cells.len()),
            ));
        }
        for (c, cell) in cells.iter().enumerate() {
            let cell = cell.trim();
            if c == label_column {
                let id = match label_names.iter().position(|n| n == cell) {
                    Some(id) => id,
                    None => {
                        label_names.push(cell.to_string());
                        label_names.len() - 1
                    }
                };
                labels.push(id);
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    Error::format(
                        &name,
                        format!("line {line_no}: non-numeric feature cell {cell:?}"),
                    )
                })?;
                features.push(v);
            }
        }
    }

    let class_count = label_names.len().max(2);
    let mut ds = Dataset::new(features, labels, width - 1, class_count)?;
    ds.set_label_names(label_names);
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        (dir, path)
    }

    #[test]
    fn labels_map_in_first_appearance_order() {
        let (_dir, path) = write_tmp("1.0,2.0,cat\n3.0,4.0,dog\n5.0,6.0,cat\n");
        let ds = load_delimited(&path, 2).unwrap();
        assert_eq!(ds.labels(), &[0, 1, 0]);
        assert_eq!(ds.label_names().unwrap(), &["cat", "dog"]);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.row(1), &[3.0, 4.0]);
    }

    #[test]
    fn header_line_is_detected_and_skipped() {
        let (_dir, path) = write_tmp("x,y,label\n1.0,2.0,a\n3.0,4.0,b\n");
        let ds = load_delimited(&path, 2).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels(), &[0, 1]);
    }

    #[test]
    fn single_column_is_config_error() {
        let (_dir, path) = write_tmp("a\nb\n");
        assert!(matches!(load_delimited(&path, 0), Err(Error::Config(_))));
    }

    #[test]
    fn ragged_row_names_line_number() {
        let (_dir, path) = write_tmp("1.0,2.0,a\n3.0,4.0\n");
        match load_delimited(&path, 2).unwrap_err() {
            Error::Format { message, .. } => assert!(message.contains("line 2"), "{message}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_feature_cell_names_line_number() {
        let (_dir, path) = write_tmp("1.0,2.0,a\noops,4.0,b\n");
        match load_delimited(&path, 2).unwrap_err() {
            Error::Format { message, .. } => assert!(message.contains("line 2"), "{message}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn zscore_after_load_has_unit_moments() {
        let (_dir, path) = write_tmp("1.0,10.0,a\n2.0,20.0,b\n3.0,30.0,a\n4.0,40.0,b\n");
        let mut ds = load_delimited(&path, 2).unwrap();
        ds.normalize_zscore().unwrap();
        for f in 0..ds.dim() {
            let vals: Vec<f64> = (0..ds.len()).map(|i| ds.row(i)[f]).collect();
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let std: f64 = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / vals.len() as f64)
                .sqrt();
            assert!(mean.abs() < 1e-12);
            assert!((std - 1.0).abs() < 1e-12);
        }
    }
}
