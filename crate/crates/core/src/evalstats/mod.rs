//! Evaluation and agreement statistics, all on a percent scale.
//!
//! Values are kept at full precision; tables round to two decimals when
//! rendered.

mod agreement;
mod classification;
mod report;

pub use agreement::{
    agreement_pairs, cohen_kappa, compute_agreement, fleiss_kappa, fleiss_kappa_from_labels,
    weighted_cohen_kappa, AgreementReport, PairAgreement, WeightScheme,
};
pub use classification::{classification_metrics, pearson, pearson_ordinal, MetricsReport};
pub use report::{render_results_table, parse_results_row, render_results_row, ResultsRow, TaskScores};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("class {value} out of range for {classes} classes")]
    ClassOutOfRange { value: usize, classes: usize },
    #[error("not enough data: {0}")]
    TooFew(String),
    #[error("one side has zero variance")]
    DegenerateVariance,
    #[error("chance agreement is 1 but observed agreement is not")]
    PerfectChance,
    #[error("row {row} sums to {got}, expected {expected}")]
    RowSumMismatch { row: usize, expected: u64, got: u64 },
    #[error("cannot parse results row: {0}")]
    Parse(String),
}

fn check_lengths(a: usize, b: usize) -> Result<(), StatsError> {
    if a != b {
        return Err(StatsError::LengthMismatch { left: a, right: b });
    }
    if a == 0 {
        return Err(StatsError::TooFew("empty input".into()));
    }
    Ok(())
}
