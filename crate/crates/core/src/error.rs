use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CaitError {
    #[error("row {row}, column '{column}': {message}")]
    Data {
        row: usize,
        column: String,
        message: String,
    },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("column '{0}' not found")]
    MissingColumn(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("singular design matrix")]
    SingularDesign,
    #[error("IRLS did not converge after {0} iterations")]
    NoConvergence(usize),
    #[error("arm {0} has no observations in the subgroup")]
    EmptyArm(u8),
    #[error("treatment effect not estimable: {0}")]
    NotEstimable(String),
    #[error("split statistic has zero variance")]
    DegenerateVariance,
    #[error("tree is missing the split statistic at node {0}")]
    IncompleteTree(usize),
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("training fold {0} lost a treatment arm")]
    FoldDegeneracy(usize),
    #[error("unknown level code {code} for column {column}")]
    UnknownLevel { column: usize, code: i64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, CaitError>;

impl From<std::io::Error> for CaitError {
    fn from(e: std::io::Error) -> Self {
        CaitError::Io(e.to_string())
    }
}

impl From<csv::Error> for CaitError {
    fn from(e: csv::Error) -> Self {
        CaitError::Io(e.to_string())
    }
}
