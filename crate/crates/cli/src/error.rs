use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("corrupt volume file: {0}")]
    CorruptVolume(String),
    #[error("missing input: {0} (run the earlier stage first)")]
    MissingDependency(String),
    #[error(transparent)]
    Core(#[from] mgre_core::Error),
    #[error(transparent)]
    Learn(#[from] mgre_learn::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::CorruptVolume(_) => 3,
            CliError::MissingDependency(_) => 4,
            _ => 1,
        }
    }
}
