use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown route {0}")]
    UnknownRoute(String),

    #[error("coefficient group for target task {target} sums to zero")]
    DegenerateGroup { target: usize },

    #[error("missing loss for route {0} with positive coefficient")]
    MissingLoss(String),

    #[error("division by zero baseline metric `{metric}` for task {task}")]
    ZeroBaseline { task: usize, metric: String },

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("training failed at epoch {epoch}: {source}")]
    Training {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("run `{run}` failed: {source}")]
    Run {
        run: String,
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
    /// True when the root cause is a numeric failure (non-finite values).
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Numeric(_) => true,
            Error::Training { source, .. } | Error::Run { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
