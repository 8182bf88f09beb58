use thiserror::Error;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        })*
    };
}

runtime_from!(mem_core::tensor::TensorError, mem_core::dvae::DvaeError);

impl From<mem_core::vit::VitError> for CliError {
    fn from(e: mem_core::vit::VitError) -> Self {
        match e {
            mem_core::vit::VitError::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<mem_core::downstream::DownstreamError> for CliError {
    fn from(e: mem_core::downstream::DownstreamError) -> Self {
        match e {
            mem_core::downstream::DownstreamError::Vit(v) => v.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}
