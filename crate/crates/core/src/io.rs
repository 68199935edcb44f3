//! CSV ingestion and emission for numeric datasets.
//!
//! One row per observation, comma separated. The first row may be a header;
//! it is detected by failing to parse as numbers.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::data::{DataError, DatasetKind, LabeledDataset};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: no data rows")]
    Empty { path: String },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Where the response lives when reading a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponseColumn {
    /// Last column of the design file.
    Last,
    /// A separate single-column file.
    Separate,
}

/// Parses a numeric CSV table, skipping a non-numeric first row.
pub fn read_matrix_from<R: Read>(reader: R, label: &str) -> Result<Array2<f64>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (k, record) in rdr.records().enumerate() {
        let line = k + 1;
        let record = record.map_err(|e| IngestError::Malformed {
            path: label.to_string(),
            line,
            message: e.to_string(),
        })?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        let parsed: Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if k == 0 => continue,
            Err(e) => {
                return Err(IngestError::Malformed {
                    path: label.to_string(),
                    line,
                    message: format!("non-numeric field: {e}"),
                })
            }
        };
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(IngestError::Malformed {
                    path: label.to_string(),
                    line,
                    message: format!("expected {w} fields, found {}", values.len()),
                })
            }
            _ => {}
        }
        if let Some(c) = values.iter().position(|v| !v.is_finite()) {
            return Err(IngestError::Malformed {
                path: label.to_string(),
                line,
                message: format!("non-finite value in field {}", c + 1),
            });
        }
        rows.push(values);
    }
    let width = width.ok_or_else(|| IngestError::Empty {
        path: label.to_string(),
    })?;
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Array2::from_shape_vec((rows.len(), width), flat).expect("rows have equal width"))
}

pub fn read_matrix(path: &Path) -> Result<Array2<f64>, IngestError> {
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_matrix_from(file, &path.display().to_string())
}

/// Reads a dataset. With [`ResponseColumn::Last`] the response is the final
/// column of `design_path`; otherwise `response_path` must be given.
pub fn read_dataset(
    id: &str,
    kind: DatasetKind,
    design_path: &Path,
    response: ResponseColumn,
    response_path: Option<&Path>,
) -> Result<LabeledDataset, IngestError> {
    let table = read_matrix(design_path)?;
    let (design, y) = match response {
        ResponseColumn::Last => {
            let p = table.ncols();
            if p < 2 {
                return Err(IngestError::Malformed {
                    path: design_path.display().to_string(),
                    line: 1,
                    message: "need at least one feature column plus the response".into(),
                });
            }
            (
                table.slice(ndarray::s![.., ..p - 1]).to_owned(),
                table.column(p - 1).to_owned(),
            )
        }
        ResponseColumn::Separate => {
            let rp = response_path.ok_or_else(|| IngestError::Malformed {
                path: design_path.display().to_string(),
                line: 0,
                message: "separate response file not given".into(),
            })?;
            let r = read_matrix(rp)?;
            if r.ncols() != 1 {
                return Err(IngestError::Malformed {
                    path: rp.display().to_string(),
                    line: 1,
                    message: format!("response file must have one column, found {}", r.ncols()),
                });
            }
            (table, r.column(0).to_owned())
        }
    };
    Ok(LabeledDataset::new(id, kind, design, y)?)
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

/// Writes the design with the response appended as the last column.
pub fn write_dataset<W: Write>(mut out: W, data: &LabeledDataset) -> std::io::Result<()> {
    let p = data.n_features();
    let mut header: Vec<String> = (0..p).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    writeln!(out, "{}", header.join(","))?;
    for (row, y) in data.design().rows().into_iter().zip(data.response()) {
        let mut fields: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
        fields.push(fmt_f64(*y));
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

pub fn vector_to_csv_column(values: &Array1<f64>) -> String {
    values.iter().map(|v| fmt_f64(*v) + "\n").collect()
}
