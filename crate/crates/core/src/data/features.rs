//! Feature matrix construction: raw columns, spline blocks, and
//! covariate-by-group interactions, followed by standardization.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::spline::{natural_cubic_basis, DEFAULT_KNOTS};
use super::{AnalysisSample, Grouping};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplineColumn {
    pub column: String,
    #[serde(default = "default_knots")]
    pub knots: usize,
}

fn default_knots() -> usize {
    DEFAULT_KNOTS
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionTerm {
    pub columns: Vec<String>,
    pub grouping: Grouping,
}

/// Which transformed columns to build.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    #[serde(default = "default_true")]
    pub standardize: bool,
    #[serde(default = "default_true")]
    pub include_raw: bool,
    #[serde(default)]
    pub spline_columns: Vec<SplineColumn>,
    #[serde(default)]
    pub interaction_terms: Vec<InteractionTerm>,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self { standardize: true, include_raw: true, spline_columns: Vec::new(), interaction_terms: Vec::new() }
    }
}

impl FeatureSpec {
    pub fn validate(&self, sample: &AnalysisSample) -> Result<()> {
        let has = |c: &str| sample.covariate_names().iter().any(|n| n == c);
        for s in &self.spline_columns {
            if s.knots < 3 {
                return Err(Error::InvalidArgument(format!(
                    "spline on `{}` needs at least 3 knots, got {}",
                    s.column, s.knots
                )));
            }
            if !has(&s.column) {
                return Err(Error::Schema(format!("spline column `{}` is not a covariate", s.column)));
            }
        }
        for t in &self.interaction_terms {
            for c in &t.columns {
                if !has(c) {
                    return Err(Error::Schema(format!("interaction column `{c}` is not a covariate")));
                }
            }
            t.grouping.resolve(sample)?;
        }
        if !self.include_raw && self.spline_columns.is_empty() && self.interaction_terms.is_empty() {
            return Err(Error::InvalidArgument("feature spec produces no columns".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Raw,
    Spline,
    Interaction,
}

/// Provenance of one feature column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureColumn {
    pub name: String,
    pub kind: ColumnKind,
    pub source: String,
}

impl FeatureColumn {
    pub fn raw(name: impl Into<String>) -> Self {
        let name = name.into();
        Self { source: name.clone(), name, kind: ColumnKind::Raw }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaling {
    pub mean: f64,
    pub scale: f64,
}

/// Transformed covariates `phi(X)`, one row per unit.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    values: DMatrix<f64>,
    columns: Vec<FeatureColumn>,
    scaling: Vec<ColumnScaling>,
    kept: Vec<usize>,
    dropped: Vec<String>,
}

impl FeatureMatrix {
    /// Wraps an already-transformed matrix as is.
    pub fn from_values(values: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        if values.ncols() != names.len() {
            return Err(Error::Dimension(format!("{} names for {} columns", names.len(), values.ncols())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        let p = names.len();
        Ok(Self {
            values,
            columns: names.into_iter().map(FeatureColumn::raw).collect(),
            scaling: vec![ColumnScaling { mean: 0.0, scale: 1.0 }; p],
            kept: (0..p).collect(),
            dropped: Vec::new(),
        })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn columns(&self) -> &[FeatureColumn] {
        &self.columns
    }

    pub fn names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    pub fn scaling(&self) -> &[ColumnScaling] {
        &self.scaling
    }

    /// Names of constant columns removed during standardization.
    pub fn dropped(&self) -> &[String] {
        &self.dropped
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().copied().collect()
    }

    /// Row-major copy of the values.
    pub fn to_row_major(&self) -> Vec<f64> {
        let (n, p) = self.values.shape();
        let mut out = Vec::with_capacity(n * p);
        for i in 0..n {
            out.extend(self.values.row(i).iter());
        }
        out
    }

    /// Applies the stored column selection and scaling to a raw matrix with
    /// the pre-standardization layout.
    pub fn transform(&self, raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let expected = self.kept.iter().max().map_or(0, |m| m + 1);
        if raw.ncols() < expected {
            return Err(Error::Dimension(format!("raw matrix has {} columns, need {expected}", raw.ncols())));
        }
        Ok(DMatrix::from_fn(raw.nrows(), self.kept.len(), |i, c| {
            let s = self.scaling[c];
            (raw[(i, self.kept[c])] - s.mean) / s.scale
        }))
    }

    /// Rows at `indices` (repeats allowed) with the same column layout.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let p = self.ncols();
        let values = DMatrix::from_fn(indices.len(), p, |r, c| self.values[(indices[r], c)]);
        Self { values, ..self.clone() }
    }
}

/// Standardizes every column to mean 0 and population variance 1, dropping
/// constant columns.
pub fn standardize_columns(raw: &DMatrix<f64>, columns: Vec<FeatureColumn>) -> Result<FeatureMatrix> {
    let (n, p) = raw.shape();
    if n == 0 || p == 0 {
        return Err(Error::InvalidArgument("cannot standardize an empty matrix".into()));
    }
    if columns.len() != p {
        return Err(Error::Dimension(format!("{} column names for {p} columns", columns.len())));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("raw feature matrix".into()));
    }
    let mut kept = Vec::new();
    let mut scaling = Vec::new();
    let mut dropped = Vec::new();
    let mut kept_columns = Vec::new();
    for (j, col) in columns.into_iter().enumerate() {
        let x = raw.column(j);
        let mean = x.iter().sum::<f64>() / n as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        if sd <= 1e-12 * mean.abs().max(1.0) {
            dropped.push(col.name);
            continue;
        }
        kept.push(j);
        scaling.push(ColumnScaling { mean, scale: sd });
        kept_columns.push(col);
    }
    if kept.is_empty() {
        return Err(Error::Validation("every feature column is constant".into()));
    }
    let values = DMatrix::from_fn(n, kept.len(), |i, c| (raw[(i, kept[c])] - scaling[c].mean) / scaling[c].scale);
    Ok(FeatureMatrix { values, columns: kept_columns, scaling, kept, dropped })
}

/// Raw (unstandardized) feature columns and their provenance.
pub fn build_raw_features(sample: &AnalysisSample, spec: &FeatureSpec) -> Result<(DMatrix<f64>, Vec<FeatureColumn>)> {
    spec.validate(sample)?;
    let x = sample.covariate_matrix();
    let n = sample.len();
    let col_index = |name: &str| sample.covariate_names().iter().position(|c| c == name).expect("validated");

    let mut blocks: Vec<Vec<f64>> = Vec::new();
    let mut columns = Vec::new();
    if spec.include_raw {
        for (j, name) in sample.covariate_names().iter().enumerate() {
            blocks.push(x.column(j).iter().copied().collect());
            columns.push(FeatureColumn::raw(name.clone()));
        }
    }
    for s in &spec.spline_columns {
        let v: Vec<f64> = x.column(col_index(&s.column)).iter().copied().collect();
        let basis = natural_cubic_basis(&v, s.knots)?;
        for c in 0..basis.ncols() {
            blocks.push(basis.column(c).iter().copied().collect());
            columns.push(FeatureColumn {
                name: format!("ns({})[{}]", s.column, c + 1),
                kind: ColumnKind::Spline,
                source: s.column.clone(),
            });
        }
    }
    for term in &spec.interaction_terms {
        let level_of = term.grouping.resolve(sample)?;
        let levels = term.grouping.level_names();
        for c in &term.columns {
            let j = col_index(c);
            for (l, level) in levels.iter().enumerate() {
                let v = (0..n)
                    .map(|i| if level_of[sample.stratum(i)] == l { x[(i, j)] } else { 0.0 })
                    .collect();
                blocks.push(v);
                columns.push(FeatureColumn {
                    name: format!("{c}:{}={level}", term.grouping.name),
                    kind: ColumnKind::Interaction,
                    source: format!("{c}*{}", term.grouping.name),
                });
            }
        }
    }
    let raw = DMatrix::from_fn(n, blocks.len(), |i, c| blocks[c][i]);
    Ok((raw, columns))
}

/// Builds `phi(X)` for `sample` according to `spec`.
pub fn build_features(sample: &AnalysisSample, spec: &FeatureSpec) -> Result<FeatureMatrix> {
    let (raw, columns) = build_raw_features(sample, spec)?;
    if spec.standardize {
        standardize_columns(&raw, columns)
    } else {
        let p = raw.ncols();
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("raw feature matrix".into()));
        }
        Ok(FeatureMatrix {
            values: raw,
            columns,
            scaling: vec![ColumnScaling { mean: 0.0, scale: 1.0 }; p],
            kept: (0..p).collect(),
            dropped: Vec::new(),
        })
    }
}
