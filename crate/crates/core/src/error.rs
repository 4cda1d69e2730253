use thiserror::Error;

#[derive(Debug, Error)]
pub enum DlomError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("token id {id} is out of range for a vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("non-finite loss at epoch {epoch} (trait {trait_id}, instance {instance_id})")]
    NonFiniteLoss {
        epoch: usize,
        trait_id: String,
        instance_id: String,
    },

    #[error("every trait has a degenerate QWK; no macro average exists")]
    AllDegenerate,

    #[error("missing run artifacts: {}", .0.join(", "))]
    MissingArtifacts(Vec<String>),

    #[error("gradient check failed for: {}", .0.join(", "))]
    GradcheckFailed(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DlomError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(DlomError::Validation(msg.into()))
}
