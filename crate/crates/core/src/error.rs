use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("atlas region {0} is absent from the parcellation map")]
    MissingRegion(i32),

    #[error("parcellation code {0} is not declared in the atlas")]
    UnknownRegion(i32),

    #[error("invalid atlas: {0}")]
    InvalidAtlas(String),

    #[error("invalid case {id}: {reason}")]
    InvalidCase { id: String, reason: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate statistics for region {region}: {reason}")]
    DegenerateStatistics { region: i32, reason: String },

    #[error("label error: {0}")]
    Label(String),

    #[error("phantom spec error: {0}")]
    Spec(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("model configuration error: {0}")]
    Model(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("case {0} has no Severe-labeled region")]
    NotEligible(String),

    #[error("empty evaluation: {0}")]
    EmptyEval(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("configuration error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
