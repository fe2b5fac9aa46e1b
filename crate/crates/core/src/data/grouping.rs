use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::AnalysisSample;
use crate::error::{Error, Result};

/// A coarsening of strata into named levels, e.g. 41 strata into 8 subgroups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grouping {
    pub name: String,
    /// Stratum label → level label.
    pub levels: BTreeMap<String, String>,
}

impl Grouping {
    pub fn new(name: impl Into<String>, levels: BTreeMap<String, String>) -> Self {
        Self { name: name.into(), levels }
    }

    /// Every stratum in its own level.
    pub fn identity(sample: &AnalysisSample) -> Self {
        let levels = sample.labels().iter().map(|l| (l.clone(), l.clone())).collect();
        Self::new("stratum", levels)
    }

    /// Every stratum in one level called `all`.
    pub fn all_in_one(sample: &AnalysisSample) -> Self {
        let levels = sample.labels().iter().map(|l| (l.clone(), "all".to_string())).collect();
        Self::new("all", levels)
    }

    /// Reads a two-column CSV (`stratum,group`); the grouping is named after
    /// the file stem.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let mut levels = BTreeMap::new();
        for (row, rec) in reader.records().enumerate() {
            let rec = rec?;
            let (Some(s), Some(g)) = (rec.get(0), rec.get(1)) else {
                return Err(Error::Parse {
                    row,
                    column: "stratum,group".into(),
                    message: "expected two columns".into(),
                });
            };
            levels.insert(s.trim().to_string(), g.trim().to_string());
        }
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("grouping").to_string();
        Ok(Self::new(name, levels))
    }

    /// Distinct level labels in sorted order.
    pub fn level_names(&self) -> Vec<String> {
        self.levels.values().cloned().collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Level index of each stratum of `sample`.
    ///
    /// Labels of strata dropped during validation are tolerated; any other
    /// label not present in the sample is an error, as is a sample stratum
    /// the grouping does not cover.
    pub fn resolve(&self, sample: &AnalysisSample) -> Result<Vec<usize>> {
        let names = self.level_names();
        for label in self.levels.keys() {
            let known = sample.stratum_index(label).is_some()
                || sample.dropped().iter().any(|d| &d.label == label);
            if !known {
                return Err(Error::Validation(format!(
                    "grouping `{}` references unknown stratum `{label}`",
                    self.name
                )));
            }
        }
        sample
            .labels()
            .iter()
            .map(|label| {
                let level = self.levels.get(label).ok_or_else(|| {
                    Error::Validation(format!("grouping `{}` does not assign stratum `{label}`", self.name))
                })?;
                Ok(names.iter().position(|n| n == level).expect("level is listed"))
            })
            .collect()
    }
}
