use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("matrix power is singular: exponent {exponent} with zero eigenvalue and no damping")]
    Singular { exponent: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("diverged at step {step}: block `{block}` has non-finite entries")]
    Divergence { block: String, step: u64 },

    #[error("curvature error in layer `{layer}`: {source}")]
    Curvature {
        layer: String,
        #[source]
        source: Box<Error>,
    },

    #[error("schedule exhausted: step {t} is past the horizon {horizon}")]
    ScheduleExhausted { t: u64, horizon: u64 },

    #[error("sequencing error: {0}")]
    Sequencing(String),

    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("ingestion error in {}: {reason}", path.display())]
    Ingestion { path: PathBuf, reason: String },

    #[error("corrupt record {record} in {}: label byte {label}", path.display())]
    CorruptLabel {
        path: PathBuf,
        record: usize,
        label: u8,
    },
}

impl Error {
    pub(crate) fn curvature(layer: &str, source: Error) -> Self {
        Error::Curvature {
            layer: layer.to_string(),
            source: Box::new(source),
        }
    }
}
