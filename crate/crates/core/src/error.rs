use std::path::PathBuf;

use thiserror::Error;

/// Layer identifiers as written in model files.
pub type FileLayerId = u64;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error{}: {message}", layer_suffix(*.layer))]
    Parse {
        layer: Option<FileLayerId>,
        message: String,
    },

    #[error("shape mismatch at layer {layer}{}: {message}", other.map(|o| format!(" and layer {o}")).unwrap_or_default())]
    ShapeMismatch {
        layer: FileLayerId,
        other: Option<FileLayerId>,
        message: String,
    },

    #[error("cycle in layer graph through layer {layer}")]
    Cycle { layer: FileLayerId },

    #[error("unsupported layer kind {kind:?} at layer {layer}")]
    UnsupportedLayer { layer: FileLayerId, kind: String },

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("network has {neurons} neurons; the reference analyzer is limited to {limit}")]
    TooLarge { neurons: usize, limit: usize },

    #[error("architecture spec: {0}")]
    Grammar(String),

    #[error("{0}")]
    Config(String),
}

fn layer_suffix(layer: Option<FileLayerId>) -> String {
    layer.map(|l| format!(" at layer {l}")).unwrap_or_default()
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
