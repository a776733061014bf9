use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    /// I/O and malformed-file failures.
    pub const RUNTIME: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const NUMERICAL: i32 = 3;
    pub const VERIFICATION: i32 = 4;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error(transparent)]
    Core(#[from] foem_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use foem_core::Error as E;
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Verification(_) => exit::VERIFICATION,
            CliError::Core(e) if e.is_numerical() => exit::NUMERICAL,
            CliError::Core(
                E::Config(_) | E::DimensionMismatch { .. } | E::MissingTensor(_) | E::InvalidLayer(_),
            ) => exit::CONFIG,
            CliError::Core(_) => exit::RUNTIME,
        }
    }
}
