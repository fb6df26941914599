use thiserror::Error;

/// Errors raised by the simulator and its reference models.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{what} index {index} out of range (limit {limit})")]
    Index {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{0} is busy")]
    Busy(&'static str),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("no progress for {idle_cycles} cycles at cycle {cycle}")]
    Deadlock { cycle: u64, idle_cycles: u64 },
}

pub type Result<T> = std::result::Result<T, SimError>;

pub(crate) fn check_index(what: &'static str, index: usize, limit: usize) -> Result<()> {
    if index < limit {
        Ok(())
    } else {
        Err(SimError::Index { what, index, limit })
    }
}

pub(crate) fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(SimError::Shape(format!(
            "{what}: expected {want} elements, got {got}"
        )))
    }
}
