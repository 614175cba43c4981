//! CSV artifacts: `L × C` tables (accuracy, cost, score, loss weights) and
//! the long-form metrics log.
//!
//! Tables have one line per layer group and one column per channel group,
//! no header. Lines starting with `#` are comments.

use std::io::Write;
use std::path::Path;

use nestnet_core::training::MetricsLog;
use nestnet_core::Grid;

#[derive(Debug, thiserror::Error)]
pub enum CsvError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: row {row}, column {col}: cannot parse {value:?} as a number")]
    Parse { path: String, row: usize, col: usize, value: String },
    #[error("{path}: dimension mismatch: expected {expected_rows}x{expected_cols}, found {found}")]
    Dimensions {
        path: String,
        expected_rows: usize,
        expected_cols: usize,
        found: String,
    },
    #[error("{path}: table is empty or ragged ({detail})")]
    Shape { path: String, detail: String },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CsvError + '_ {
    move |source| CsvError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `grid` with optional leading `#` comment lines.
pub fn write_grid<T: std::fmt::Display>(path: &Path, grid: &Grid<T>, comments: &[String]) -> Result<(), CsvError> {
    let mut file = std::fs::File::create(path).map_err(io_err(path))?;
    for c in comments {
        writeln!(file, "# {c}").map_err(io_err(path))?;
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    for r in 0..grid.rows() {
        w.write_record(grid.row(r).iter().map(|v| v.to_string()))
            .map_err(|source| CsvError::Csv {
                path: path.display().to_string(),
                source,
            })?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a numeric table. With `expect = Some((rows, cols))` any other shape
/// is a [`CsvError::Dimensions`] error.
pub fn read_grid(path: &Path, expect: Option<(usize, usize)>) -> Result<Grid<f64>, CsvError> {
    let p = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|source| CsvError::Csv { path: p.clone(), source })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|source| CsvError::Csv { path: p.clone(), source })?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let row = rec
            .iter()
            .enumerate()
            .map(|(c, v)| {
                v.parse::<f64>().map_err(|_| CsvError::Parse {
                    path: p.clone(),
                    row: r + 1,
                    col: c + 1,
                    value: v.to_string(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    let widths: Vec<usize> = rows.iter().map(Vec::len).collect();
    let ragged = widths.windows(2).any(|w| w[0] != w[1]);
    if let Some((er, ec)) = expect {
        if ragged || rows.len() != er || widths.first().copied().unwrap_or(0) != ec {
            let found = if ragged {
                format!("{} rows of widths {widths:?}", rows.len())
            } else {
                format!("{}x{}", rows.len(), widths.first().copied().unwrap_or(0))
            };
            return Err(CsvError::Dimensions {
                path: p,
                expected_rows: er,
                expected_cols: ec,
                found,
            });
        }
    }
    if rows.is_empty() || ragged || widths[0] == 0 {
        return Err(CsvError::Shape {
            path: p,
            detail: format!("row widths {widths:?}"),
        });
    }
    let (nr, nc) = (rows.len(), widths[0]);
    Ok(Grid::from_vec(nr, nc, rows.into_iter().flatten().collect()).expect("rectangular"))
}

/// Long-form metrics: one line per (snapshot, head) with columns
/// `step,l,c,loss,accuracy`, preceded by `#` comment lines.
pub fn write_metrics(path: &Path, log: &MetricsLog, comments: &[String]) -> Result<(), CsvError> {
    let mut file = std::fs::File::create(path).map_err(io_err(path))?;
    for c in comments {
        writeln!(file, "# {c}").map_err(io_err(path))?;
    }
    let csv_err = |source| CsvError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["step", "l", "c", "loss", "accuracy"]).map_err(csv_err)?;
    for e in &log.entries {
        for ((r, c), acc) in e.accuracy.iter() {
            let loss = e.loss[(r, c)];
            w.write_record([
                e.step.to_string(),
                (r + 1).to_string(),
                (c + 1).to_string(),
                loss.to_string(),
                acc.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_round_trip_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.csv");
        let g = Grid::from_fn(2, 3, |r, c| r as f64 * 0.1 + c as f64 / 3.0);
        write_grid(&p, &g, &["hello".into()]).unwrap();
        assert_eq!(read_grid(&p, Some((2, 3))).unwrap(), g);
        assert!(matches!(read_grid(&p, Some((3, 3))), Err(CsvError::Dimensions { .. })));
    }

    #[test]
    fn ragged_and_garbage_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.csv");
        std::fs::write(&p, "1,2\n3\n").unwrap();
        assert!(matches!(read_grid(&p, None), Err(CsvError::Shape { .. })));
        assert!(matches!(read_grid(&p, Some((2, 2))), Err(CsvError::Dimensions { .. })));
        std::fs::write(&p, "1,x\n").unwrap();
        assert!(matches!(read_grid(&p, None), Err(CsvError::Parse { col: 2, .. })));
    }
}
