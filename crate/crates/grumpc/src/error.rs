use std::path::Path;

use thiserror::Error;

/// Failure classes with their process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    /// Exit 1: certification or a run precondition failed.
    #[error("{0}")]
    Precondition(String),
    /// Exit 2: the optimal control problem became infeasible mid-run.
    #[error("{0}")]
    Infeasible(String),
    /// Exit 3: unreadable, unwritable or malformed input.
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Schema(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Precondition(_) => 1,
            CliError::Infeasible(_) => 2,
            CliError::Io(_) | CliError::Schema(_) => 3,
        }
    }

    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

fn root(e: &grumpc_core::Error) -> &grumpc_core::Error {
    match e {
        grumpc_core::Error::AtStep { source, .. } => root(source),
        other => other,
    }
}

impl From<grumpc_core::Error> for CliError {
    fn from(e: grumpc_core::Error) -> Self {
        use grumpc_core::Error as E;
        let msg = e.to_string();
        match root(&e) {
            E::Infeasible { .. } => CliError::Infeasible(msg),
            E::Dimension { .. } | E::NonFinite(_) | E::InvalidArgument(_) => CliError::Schema(msg),
            E::Precondition(_)
            | E::Unreachable { .. }
            | E::NoConvergence { .. }
            | E::Lp(_)
            | E::Diverged { .. }
            | E::AtStep { .. } => CliError::Precondition(msg),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
