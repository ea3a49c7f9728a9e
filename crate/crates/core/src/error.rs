use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("column `{column}` is constant over the training range; cannot scale")]
    DegenerateScale { column: String },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("degenerate calibration: {0}")]
    DegenerateCalibration(String),

    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    TrainingDiverged { epoch: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("no anomaly score to explain at this step (score is zero)")]
    UndefinedRanking,

    #[error("unsupported artifact version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    /// Wraps the error with the name of the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, with any stage wrappers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    /// True for failures of the numerical machinery rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self.root(),
            Error::TrainingDiverged { .. }
                | Error::Numeric(_)
                | Error::DegenerateCalibration(_)
                | Error::DegenerateData(_)
        )
    }

    /// A short suggestion for fixing the input or configuration.
    pub fn hint(&self) -> Option<&'static str> {
        Some(match self.root() {
            Error::Parse { .. } => "check the CSV cell at the reported row",
            Error::Schema(_) => {
                "sensor columns must be `system.sensor.summary`, covariates `cov.<name>`"
            }
            Error::DegenerateScale { .. } => {
                "drop the constant column or extend the training range"
            }
            Error::DegenerateData(_) => "use fewer mixture components for this sensor",
            Error::DegenerateCalibration(_) => {
                "training scores have no spread; check the training range for flat data"
            }
            Error::TrainingDiverged { .. } => "lower the forecaster learning rate",
            Error::Version { .. } => "retrain the model with this version of the tool",
            Error::Argument(_) => "check the configuration values",
            _ => return None,
        })
    }
}
