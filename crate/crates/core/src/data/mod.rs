//! Data ingestion and feature construction.

mod features;
mod grouping;
mod sample;
pub mod spline;

pub use features::{
    build_features, build_raw_features, standardize_columns, ColumnKind, ColumnScaling, FeatureColumn,
    FeatureMatrix, FeatureSpec, InteractionTerm, SplineColumn,
};
pub use grouping::Grouping;
pub use sample::{
    load_csv, load_design_csv, AnalysisSample, DesignSchema, DroppedStratum, Schema, StratumCounts, UnitRecord,
};
pub use spline::{natural_cubic_basis, natural_cubic_basis_at, quantile_knots};
