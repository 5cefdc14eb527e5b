//! Error types shared by the estimation pipeline.

use thiserror::Error;

/// The role a column plays in the observation schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnRole {
    Response,
    Treatment,
    Instrument,
    Continuous,
    Discrete,
}

impl std::fmt::Display for ColumnRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ColumnRole::Response => "response",
            ColumnRole::Treatment => "treatment",
            ColumnRole::Instrument => "instrument",
            ColumnRole::Continuous => "continuous covariate",
            ColumnRole::Discrete => "discrete covariate",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing required column `{column}`")]
    MissingColumn { column: String },

    /// Row indices are 1-based data rows (the header is not counted).
    #[error("non-binary {role} at row {row}")]
    NonBinary { role: ColumnRole, row: usize },

    #[error("non-numeric value in column `{column}` at row {row}")]
    NonNumeric { column: String, row: usize },

    #[error("missing value in column `{column}` at row {row}")]
    MissingValue { column: String, row: usize },

    #[error("non-finite value in column `{column}` at row {row}")]
    NonFinite { column: String, row: usize },

    #[error("input contains no data rows")]
    EmptyInput,

    #[error("{0}")]
    InvalidArgument(String),

    #[error("p_c undefined: degenerate instrument")]
    DegenerateInstrument,

    #[error(
        "every bandwidth in the grid produced only degenerate (fallback) estimates; \
         widen the bandwidth grid"
    )]
    DegenerateBandwidthGrid,

    #[error("design column `{column}` is collinear with the preceding columns")]
    CollinearDesign { column: String },

    #[error("weighted Gram matrix is singular at design column `{column}`")]
    SingularGram { column: String },

    #[error("solver failed to converge: {0}")]
    NoConvergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
