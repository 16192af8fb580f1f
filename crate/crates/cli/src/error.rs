use std::path::PathBuf;

use thiserror::Error;

/// Process exit codes. Stable; documented in the README.
pub mod exit {
    pub const OK: i32 = 0;
    pub const VERIFY_FAILED: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const SOLVER: i32 = 3;
    pub const OVERFLOW: i32 = 4;
    pub const CONVERGENCE: i32 = 5;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Solver {
        context: String,
        source: memport::Error,
    },

    #[error(transparent)]
    Core(#[from] memport::Error),

    #[error("cannot access {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{0} verification check(s) failed")]
    VerifyFailed(usize),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn core_code(e: &memport::Error) -> i32 {
    use memport::Error as E;
    match e {
        E::InvalidParameter(_) | E::Degenerate(_) | E::Parse { .. } | E::Csv(_) | E::Io(_) => exit::CONFIG,
        E::Overflow(_) => exit::OVERFLOW,
        E::Convergence(_) => exit::CONVERGENCE,
        E::Domain(_)
        | E::SingularMatrix { .. }
        | E::BlowUp { .. }
        | E::NonFinite { .. }
        | E::Discriminant(_)
        | E::Admissibility { .. }
        | E::BranchViolation { .. } => exit::SOLVER,
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Io { .. } => exit::CONFIG,
            Self::Solver { source, .. } => match core_code(source) {
                exit::CONFIG => exit::CONFIG,
                exit::OVERFLOW => exit::OVERFLOW,
                _ => exit::SOLVER,
            },
            Self::Core(e) => core_code(e),
            Self::VerifyFailed(_) => exit::VERIFY_FAILED,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}
