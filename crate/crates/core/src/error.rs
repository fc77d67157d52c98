use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("raw label(s) not present in the label map for domain {domain}: {labels:?}")]
    UnknownLabel { domain: String, labels: Vec<String> },

    #[error("invalid label map: {0}")]
    LabelMap(String),

    #[error("dataset at {0} contains no images")]
    EmptyDataset(PathBuf),

    #[error("failed to decode image {image_id}: {reason}")]
    Decode { image_id: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing pretrained weights: {0}")]
    MissingWeights(String),

    #[error("embeddings missing for ids: {0:?}")]
    MissingEmbeddings(Vec<String>),

    #[error("fold assignment does not match features: {0}")]
    FoldMismatch(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
