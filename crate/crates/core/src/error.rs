use alloc::string::String;

use thiserror::Error;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: alloc::boxed::Box<Error>,
    },

    #[error("equilibrium solver did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("set-point unreachable: steady-state solution leaves the unit box (residual {residual:e})")]
    Unreachable { residual: f64 },

    #[error("linear program failed: {0}")]
    Lp(&'static str),

    #[error("FHOCP infeasible at step {step}: max violation {max_violation:e}")]
    Infeasible { step: usize, max_violation: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
}

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::AtStep {
            step,
            source: alloc::boxed::Box::new(self),
        }
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { context, expected, got })
    }
}

pub(crate) fn check_finite(context: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context))
    }
}
