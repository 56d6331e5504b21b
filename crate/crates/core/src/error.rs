// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the engine.

use thiserror::Error;

/// Errors produced by the engine.
///
/// Variants fall into two broad classes used by the command-line front end
/// for exit codes: *format* errors (files and manifests that do not parse or
/// do not validate) and *compute* errors (well-formed inputs that cannot be
/// processed as requested).
#[derive(Debug, Error)]
pub enum CrpError {
    /// Tensor shapes are incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A manifest, blob or container could not be parsed or validated.
    #[error("parse error{}: {message}", layer.as_ref().map(|l| format!(" in layer {l}")).unwrap_or_default())]
    Parse {
        /// Offending layer id, when the error can be attributed to one.
        layer: Option<String>,
        message: String,
    },

    /// A referenced weight tensor is absent from the blob.
    #[error("missing weight {0}")]
    MissingWeight(String),

    /// BatchNorm folding failed.
    #[error("canonization error in layer {layer}: {message}")]
    Canonization { layer: String, message: String },

    /// Structural problem with the layer graph.
    #[error("graph error: {0}")]
    Graph(String),

    /// A condition set or initialization is invalid for the graph.
    #[error("invalid condition: {0}")]
    Condition(String),

    /// A rule cannot be applied to the node it was assigned to.
    #[error("rule error: {0}")]
    Rule(String),

    /// A lookup key (layer, channel, sample, ranking) does not exist.
    #[error("not found: {0}")]
    NotFound(String),

    /// An argument is outside its valid domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Reference index does not belong to the loaded model or dataset.
    #[error("fingerprint mismatch: {0}")]
    FingerprintMismatch(String),

    /// A computation produced a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl CrpError {
    pub(crate) fn parse(message: impl Into<String>) -> Self {
        CrpError::Parse {
            layer: None,
            message: message.into(),
        }
    }

    pub(crate) fn parse_in(layer: impl Into<String>, message: impl Into<String>) -> Self {
        CrpError::Parse {
            layer: Some(layer.into()),
            message: message.into(),
        }
    }

    /// True for errors caused by malformed files or documents.
    pub fn is_format_error(&self) -> bool {
        matches!(
            self,
            CrpError::Parse { .. }
                | CrpError::MissingWeight(_)
                | CrpError::Json(_)
                | CrpError::FingerprintMismatch(_)
                | CrpError::Image(_)
        )
    }
}

impl From<png::DecodingError> for CrpError {
    fn from(e: png::DecodingError) -> Self {
        CrpError::Image(e.to_string())
    }
}

impl From<png::EncodingError> for CrpError {
    fn from(e: png::EncodingError) -> Self {
        CrpError::Image(e.to_string())
    }
}

pub type Result<T, E = CrpError> = std::result::Result<T, E>;
