use std::path::PathBuf;

use thiserror::Error;

use crate::backends::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("empty catalog")]
    EmptyCatalog,

    #[error("invalid catalog entry `{entry}`: {reason}")]
    CatalogInvariant { entry: String, reason: String },

    #[error("synonym `{synonym}` is claimed by both `{first}` and `{second}`")]
    DuplicateSynonym { synonym: String, first: String, second: String },

    #[error("unknown class `{0}`")]
    UnknownClass(String),

    #[error("template placeholder `{{{0}}}` has no binding")]
    MissingBinding(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("class `{class}` has {available} splittable images, needs at least {needed}")]
    Stratification { class: String, available: usize, needed: usize },

    #[error("instance `{instance}` has {count} images, at least 3 are required")]
    TooFewInstanceImages { instance: String, count: usize },

    #[error("generated pool is short of the quota: {}", format_shortfall(.0))]
    Shortfall(Vec<(String, usize, usize)>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing artifact for stage `{stage}`; run `{run_first}` first")]
    MissingArtifact { stage: String, run_first: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Backend(#[from] BackendError),
}

fn format_shortfall(items: &[(String, usize, usize)]) -> String {
    items.iter().map(|(class, have, need)| format!("{class} ({have}/{need})")).collect::<Vec<_>>().join(", ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json { context: context.into(), source }
    }
}
