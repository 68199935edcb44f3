//! Dataset containers, sparse vectors and column standardization.

use std::fmt;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("dataset `{id}`: design has {rows} rows but response has length {len}")]
    RowMismatch { id: String, rows: usize, len: usize },
    #[error("dataset `{id}`: non-finite entry at {location}")]
    NonFinite { id: String, location: String },
    #[error("dataset `{id}` has {found} columns, expected {expected}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("column {0} has zero variance and cannot be scaled")]
    ZeroVarianceColumn(usize),
    #[error("standardization needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Target,
    Source,
}

/// A design matrix with its response, used for both target and source data.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    design: Array2<f64>,
    response: Array1<f64>,
    id: String,
    kind: DatasetKind,
}

impl LabeledDataset {
    pub fn new(
        id: impl Into<String>,
        kind: DatasetKind,
        design: Array2<f64>,
        response: Array1<f64>,
    ) -> Result<Self, DataError> {
        let id = id.into();
        if design.nrows() != response.len() {
            return Err(DataError::RowMismatch {
                id,
                rows: design.nrows(),
                len: response.len(),
            });
        }
        if let Some(((i, j), _)) = design.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(DataError::NonFinite {
                id,
                location: format!("design[{i}, {j}]"),
            });
        }
        if let Some((i, _)) = response.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(DataError::NonFinite {
                id,
                location: format!("response[{i}]"),
            });
        }
        Ok(Self {
            design,
            response,
            id,
            kind,
        })
    }

    pub fn target(design: Array2<f64>, response: Array1<f64>) -> Result<Self, DataError> {
        Self::new("target", DatasetKind::Target, design, response)
    }

    pub fn source(
        index: usize,
        design: Array2<f64>,
        response: Array1<f64>,
    ) -> Result<Self, DataError> {
        Self::new(
            format!("source_{index}"),
            DatasetKind::Source,
            design,
            response,
        )
    }

    pub fn design(&self) -> &Array2<f64> {
        &self.design
    }

    pub fn response(&self) -> &Array1<f64> {
        &self.response
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn n_obs(&self) -> usize {
        self.design.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.design.ncols()
    }

    /// Keeps the rows listed in `rows`, in that order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            design: self.design.select(Axis(0), rows),
            response: self.response.select(Axis(0), rows),
            id: self.id.clone(),
            kind: self.kind,
        }
    }

    /// Row-stacks `self` on top of `other`.
    pub fn stack(&self, other: &Self, id: impl Into<String>) -> Result<Self, DataError> {
        if self.n_features() != other.n_features() {
            return Err(DataError::DimensionMismatch {
                id: other.id.clone(),
                expected: self.n_features(),
                found: other.n_features(),
            });
        }
        let design = ndarray::concatenate(Axis(0), &[self.design.view(), other.design.view()])
            .expect("column counts checked above");
        let response =
            ndarray::concatenate(Axis(0), &[self.response.view(), other.response.view()])
                .expect("1-d concatenation");
        Ok(Self {
            design,
            response,
            id: id.into(),
            kind: self.kind,
        })
    }

    pub(crate) fn with_design(&self, design: Array2<f64>) -> Self {
        Self {
            design,
            response: self.response.clone(),
            id: self.id.clone(),
            kind: self.kind,
        }
    }
}

/// A dense vector that also tracks the positions of its nonzero entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVector {
    values: Array1<f64>,
    support: Vec<usize>,
}

impl SparseVector {
    pub fn from_dense(values: Array1<f64>) -> Self {
        let support = values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i)
            .collect();
        Self { values, support }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            values: Array1::zeros(len),
            support: Vec::new(),
        }
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array1<f64> {
        self.values
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn nnz(&self) -> usize {
        self.support.len()
    }

    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.dot(&self.values).sqrt()
    }

    /// `(index, value)` pairs over the support.
    pub fn sparse_pairs(&self) -> Vec<(usize, f64)> {
        self.support.iter().map(|&i| (i, self.values[i])).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct SparseVectorRepr {
    dense: Vec<f64>,
    sparse: Vec<(usize, f64)>,
}

impl Serialize for SparseVector {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        SparseVectorRepr {
            dense: self.values.to_vec(),
            sparse: self.sparse_pairs(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SparseVector {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = SparseVectorRepr::deserialize(deserializer)?;
        Ok(Self::from_dense(Array1::from(repr.dense)))
    }
}

macro_rules! sparse_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(SparseVector);

        impl $name {
            pub fn from_dense(values: Array1<f64>) -> Self {
                Self(SparseVector::from_dense(values))
            }

            pub fn zeros(len: usize) -> Self {
                Self(SparseVector::zeros(len))
            }

            pub fn into_values(self) -> Array1<f64> {
                self.0.into_values()
            }
        }

        impl std::ops::Deref for $name {
            type Target = SparseVector;

            fn deref(&self) -> &SparseVector {
                &self.0
            }
        }

        impl From<Array1<f64>> for $name {
            fn from(values: Array1<f64>) -> Self {
                Self::from_dense(values)
            }
        }
    };
}

sparse_newtype!(
    /// A length-`p` coefficient vector (signals, shifts, aggregates).
    SparseCoefficients
);
sparse_newtype!(
    /// A length-`n` per-observation corruption vector.
    CorruptionVector
);

impl fmt::Display for SparseCoefficients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (k, (i, v)) in self.sparse_pairs().into_iter().enumerate() {
            if k > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{i}: {v}")?;
        }
        write!(f, "] (p = {})", self.len())
    }
}

/// Column transform `x' = (x - mean) / scale` and its inverse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationRecord {
    pub column_means: Vec<f64>,
    pub column_scales: Vec<f64>,
}

impl StandardizationRecord {
    pub fn identity(p: usize) -> Self {
        Self {
            column_means: vec![0.0; p],
            column_scales: vec![1.0; p],
        }
    }

    pub fn apply(&self, design: &Array2<f64>) -> Array2<f64> {
        let mut out = design.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let (m, s) = (self.column_means[j], self.column_scales[j]);
            col.mapv_inplace(|v| (v - m) / s);
        }
        out
    }

    pub fn invert(&self, standardized: &Array2<f64>) -> Array2<f64> {
        let mut out = standardized.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let (m, s) = (self.column_means[j], self.column_scales[j]);
            col.mapv_inplace(|v| v * s + m);
        }
        out
    }

    /// Maps coefficients fitted on standardized columns back to raw units.
    pub fn coefficients_to_original(&self, beta: ArrayView1<f64>) -> Array1<f64> {
        Array1::from_iter(beta.iter().zip(&self.column_scales).map(|(b, s)| {
            if *b == 0.0 {
                0.0
            } else {
                b / s
            }
        }))
    }

    pub fn coefficients_to_standardized(&self, beta: ArrayView1<f64>) -> Array1<f64> {
        Array1::from_iter(beta.iter().zip(&self.column_scales).map(|(b, s)| b * s))
    }
}

/// Centers and/or rescales every column so its Euclidean norm is `sqrt(n)`.
/// The response is left untouched.
pub fn standardize(
    data: &LabeledDataset,
    center: bool,
    scale: bool,
) -> Result<(LabeledDataset, StandardizationRecord), DataError> {
    let n = data.n_obs();
    if n < 2 {
        return Err(DataError::TooFewRows(n));
    }
    let record = column_record(data.design(), center, scale)?;
    Ok((data.with_design(record.apply(data.design())), record))
}

pub(crate) fn column_record(
    design: &Array2<f64>,
    center: bool,
    scale: bool,
) -> Result<StandardizationRecord, DataError> {
    let n = design.nrows() as f64;
    let mut means = Vec::with_capacity(design.ncols());
    let mut scales = Vec::with_capacity(design.ncols());
    for (j, col) in design.columns().into_iter().enumerate() {
        let mean = if center { col.sum() / n } else { 0.0 };
        let s = if scale {
            let ss: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
            let s = (ss / n).sqrt();
            let spread = col.iter().fold(0.0_f64, |acc, v| acc.max((v - mean).abs()));
            if !(s > 0.0) || spread <= f64::EPSILON * mean.abs().max(1.0) * 16.0 {
                return Err(DataError::ZeroVarianceColumn(j));
            }
            s
        } else {
            1.0
        };
        means.push(mean);
        scales.push(s);
    }
    Ok(StandardizationRecord {
        column_means: means,
        column_scales: scales,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelSummary {
    pub p: usize,
    pub n_target: usize,
    pub n_sources: Vec<usize>,
    pub num_sources: usize,
}

pub fn validate_panel(
    target: &LabeledDataset,
    sources: &[LabeledDataset],
) -> Result<PanelSummary, DataError> {
    let p = target.n_features();
    for s in sources {
        if s.n_features() != p {
            return Err(DataError::DimensionMismatch {
                id: s.id().to_string(),
                expected: p,
                found: s.n_features(),
            });
        }
    }
    Ok(PanelSummary {
        p,
        n_target: target.n_obs(),
        n_sources: sources.iter().map(LabeledDataset::n_obs).collect(),
        num_sources: sources.len(),
    })
}
