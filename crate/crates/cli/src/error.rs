use radner_core::CoreError;
use thiserror::Error;

/// Errors surfaced by the command line, each mapped to a stable exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("verification failed: {0}")]
    VerificationFailed(String),

    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    /// 2 config or validation, 3 numerical failure, 4 assumption violation,
    /// 5 failed verification, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                CoreError::InvalidParameter { .. } | CoreError::TooFewSamples { .. } | CoreError::RejectedPerturbation(_) => 2,
                CoreError::Divergence { .. } | CoreError::TruncationFailure { .. } | CoreError::Range { .. } | CoreError::StepSize { .. } => 3,
                CoreError::AssumptionViolation { .. } => 4,
                _ => 1,
            },
            CliError::VerificationFailed(_) => 5,
            CliError::Other(_) => 1,
        }
    }
}
