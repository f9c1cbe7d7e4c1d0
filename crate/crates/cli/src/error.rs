use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] hmc_colloc::Error),
    #[error("configuration: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("{failed} of {total} checks failed")]
    ChecksFailed { failed: usize, total: usize },
}

/// Exit status for a successful run.
pub const EXIT_OK: i32 = 0;
/// Exit status for numeric failures and failed checks.
pub const EXIT_NUMERIC: i32 = 1;
/// Exit status for precondition violations and invalid input.
pub const EXIT_PRECONDITION: i32 = 2;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use hmc_colloc::Error as E;
        match self {
            CliError::Core(
                E::Precondition { .. }
                | E::InvalidArgument(_)
                | E::OutOfRange { .. }
                | E::Dimension { .. }
                | E::Parse(_),
            )
            | CliError::Config(_) => EXIT_PRECONDITION,
            _ => EXIT_NUMERIC,
        }
    }
}
