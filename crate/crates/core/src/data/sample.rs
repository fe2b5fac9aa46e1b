//! Unit records, the validated analysis sample, and CSV ingestion.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observed unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    /// Zero-based data row in the source file.
    pub row: usize,
    /// Observed outcome. `None` when the sample was loaded for design only.
    pub outcome: Option<f64>,
    pub treated: bool,
    pub subgroup: String,
    pub covariates: Vec<f64>,
}

/// Treated/control counts for one stratum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratumCounts {
    pub treated: usize,
    pub control: usize,
}

impl StratumCounts {
    pub fn total(&self) -> usize {
        self.treated + self.control
    }
}

/// A stratum removed during validation because it had no treated units.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedStratum {
    pub label: String,
    pub units: usize,
}

/// The validated sample every other module works on.
///
/// Strata are indexed densely `0..k()` in sorted label order, so the index
/// does not depend on row order.
#[derive(Debug, Clone)]
pub struct AnalysisSample {
    units: Vec<UnitRecord>,
    covariate_names: Vec<String>,
    labels: Vec<String>,
    stratum_of: Vec<usize>,
    counts: Vec<StratumCounts>,
    dropped: Vec<DroppedStratum>,
}

impl AnalysisSample {
    /// Validates `units` and builds the stratum index.
    ///
    /// Strata without treated units are removed and reported in
    /// [`AnalysisSample::dropped`]; a stratum with treated units but no
    /// controls is an error because its control mean cannot be imputed.
    pub fn from_units(units: Vec<UnitRecord>, covariate_names: Vec<String>) -> Result<Self> {
        let p = covariate_names.len();
        let mut tallies: BTreeMap<String, StratumCounts> = BTreeMap::new();
        for u in &units {
            if u.covariates.len() != p {
                return Err(Error::Validation(format!(
                    "row {} has {} covariates, expected {}",
                    u.row,
                    u.covariates.len(),
                    p
                )));
            }
            if u.subgroup.is_empty() {
                return Err(Error::Validation(format!("row {} has an empty subgroup label", u.row)));
            }
            if let Some(y) = u.outcome {
                if !y.is_finite() {
                    return Err(Error::Validation(format!("row {} has a non-finite outcome", u.row)));
                }
            }
            if let Some(j) = u.covariates.iter().position(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "row {} has a non-finite value in covariate `{}`",
                    u.row, covariate_names[j]
                )));
            }
            let c = tallies
                .entry(u.subgroup.clone())
                .or_insert(StratumCounts { treated: 0, control: 0 });
            if u.treated {
                c.treated += 1;
            } else {
                c.control += 1;
            }
        }

        let mut dropped = Vec::new();
        let mut labels = Vec::new();
        let mut counts = Vec::new();
        for (label, c) in &tallies {
            if c.treated == 0 {
                dropped.push(DroppedStratum { label: label.clone(), units: c.total() });
                continue;
            }
            if c.control == 0 {
                return Err(Error::Validation(format!(
                    "stratum `{label}` has {} treated units and no controls",
                    c.treated
                )));
            }
            labels.push(label.clone());
            counts.push(*c);
        }
        if labels.is_empty() {
            return Err(Error::Validation("no stratum has both treated and control units".into()));
        }

        let index: BTreeMap<&str, usize> =
            labels.iter().enumerate().map(|(g, l)| (l.as_str(), g)).collect();
        let units: Vec<UnitRecord> =
            units.into_iter().filter(|u| index.contains_key(u.subgroup.as_str())).collect();
        let stratum_of = units.iter().map(|u| index[u.subgroup.as_str()]).collect();

        Ok(Self { units, covariate_names, labels, stratum_of, counts, dropped })
    }

    pub fn units(&self) -> &[UnitRecord] {
        &self.units
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Number of strata.
    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn stratum_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn stratum(&self, i: usize) -> usize {
        self.stratum_of[i]
    }

    pub fn strata(&self) -> &[usize] {
        &self.stratum_of
    }

    pub fn is_treated(&self, i: usize) -> bool {
        self.units[i].treated
    }

    pub fn counts(&self) -> &[StratumCounts] {
        &self.counts
    }

    pub fn n_treated(&self) -> usize {
        self.counts.iter().map(|c| c.treated).sum()
    }

    pub fn n_control(&self) -> usize {
        self.counts.iter().map(|c| c.control).sum()
    }

    pub fn dropped(&self) -> &[DroppedStratum] {
        &self.dropped
    }

    /// Indices of control units, in row order.
    pub fn control_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.units[i].treated).collect()
    }

    pub fn treated_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.units[i].treated).collect()
    }

    /// Outcomes as a vector, if every unit carries one.
    pub fn outcomes(&self) -> Option<Vec<f64>> {
        self.units.iter().map(|u| u.outcome).collect()
    }

    /// Raw covariates as an `n × p` matrix.
    pub fn covariate_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.covariate_names.len(), |i, j| self.units[i].covariates[j])
    }

    /// Builds a new sample from the units at `indices` (repeats allowed).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let units = indices.iter().map(|&i| self.units[i].clone()).collect();
        Self::from_units(units, self.covariate_names.clone())
    }

    /// Replaces the outcome of every unit.
    pub fn with_outcomes(&self, outcomes: &[f64]) -> Result<Self> {
        if outcomes.len() != self.len() {
            return Err(Error::Dimension(format!(
                "{} outcomes for {} units",
                outcomes.len(),
                self.len()
            )));
        }
        let mut out = self.clone();
        for (u, &y) in out.units.iter_mut().zip(outcomes) {
            if !y.is_finite() {
                return Err(Error::Validation(format!("row {} outcome is not finite", u.row)));
            }
            u.outcome = Some(y);
        }
        Ok(out)
    }
}

/// Column roles in an input CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schema {
    /// Outcome column; `None` loads the design only.
    pub outcome: Option<String>,
    pub treatment: String,
    pub subgroup: String,
    /// Covariate columns; `None` takes every other column.
    pub covariates: Option<Vec<String>>,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            outcome: Some("y".into()),
            treatment: "w".into(),
            subgroup: "g".into(),
            covariates: None,
        }
    }
}

impl Schema {
    /// The same schema with the outcome column removed from the role map.
    ///
    /// The outcome column is still excluded from the default covariate set.
    pub fn design_only(&self) -> DesignSchema {
        DesignSchema { schema: self.clone() }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
    }
}

/// A schema that never reads the outcome column.
#[derive(Debug, Clone)]
pub struct DesignSchema {
    schema: Schema,
}

fn parse_real(cell: &str, row: usize, column: &str) -> Result<f64> {
    let trimmed = cell.trim();
    if trimmed.is_empty() {
        return Err(Error::Parse { row, column: column.into(), message: "missing value".into() });
    }
    let v: f64 = trimmed.parse().map_err(|_| Error::Parse {
        row,
        column: column.into(),
        message: format!("`{trimmed}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse { row, column: column.into(), message: "non-finite value".into() });
    }
    Ok(v)
}

fn parse_treatment(cell: &str, row: usize, column: &str) -> Result<bool> {
    let v = parse_real(cell, row, column)?;
    if v == 0.0 {
        Ok(false)
    } else if v == 1.0 {
        Ok(true)
    } else {
        Err(Error::Parse { row, column: column.into(), message: format!("treatment must be 0 or 1, got {v}") })
    }
}

fn load(path: &Path, schema: &Schema, read_outcome: bool) -> Result<AnalysisSample> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };

    let outcome_col = match (&schema.outcome, read_outcome) {
        (Some(name), true) => Some(find(name)?),
        _ => None,
    };
    let treat_col = find(&schema.treatment)?;
    let group_col = find(&schema.subgroup)?;
    let covariate_cols: Vec<usize> = match &schema.covariates {
        Some(names) => names.iter().map(|n| find(n)).collect::<Result<_>>()?,
        None => {
            let reserved: Vec<&str> = [Some(schema.treatment.as_str()), Some(schema.subgroup.as_str()), schema.outcome.as_deref()]
                .into_iter()
                .flatten()
                .collect();
            (0..headers.len()).filter(|&j| !reserved.contains(&headers[j].as_str())).collect()
        }
    };
    if covariate_cols.is_empty() {
        return Err(Error::Schema("at least one covariate column is required".into()));
    }
    let covariate_names: Vec<String> = covariate_cols.iter().map(|&j| headers[j].clone()).collect();

    let mut units = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let cell = |j: usize| record.get(j).unwrap_or("");
        let outcome = match outcome_col {
            Some(j) => Some(parse_real(cell(j), row, &headers[j])?),
            None => None,
        };
        let treated = parse_treatment(cell(treat_col), row, &headers[treat_col])?;
        let subgroup = cell(group_col).trim().to_string();
        if subgroup.is_empty() {
            return Err(Error::Parse {
                row,
                column: headers[group_col].clone(),
                message: "missing subgroup label".into(),
            });
        }
        let covariates = covariate_cols
            .iter()
            .map(|&j| parse_real(cell(j), row, &headers[j]))
            .collect::<Result<Vec<_>>>()?;
        units.push(UnitRecord { row, outcome, treated, subgroup, covariates });
    }
    AnalysisSample::from_units(units, covariate_names)
}

/// Reads a CSV with one header row into a validated sample.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<AnalysisSample> {
    load(path.as_ref(), schema, true)
}

/// Reads only treatment, subgroup, and covariates; the outcome column is
/// never parsed.
pub fn load_design_csv(path: impl AsRef<Path>, schema: &DesignSchema) -> Result<AnalysisSample> {
    load(path.as_ref(), &schema.schema, false)
}
