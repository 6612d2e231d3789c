use alloc::string::String;

/// Errors raised by the class-incremental core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("step {step} out of range (schedule has {num_tasks} incremental tasks)")]
    StepOutOfRange { step: usize, num_tasks: usize },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class {0} has no samples")]
    EmptyClass(u32),

    #[error("training diverged at step {step}, epoch {epoch}: loss {loss}")]
    Diverged { step: usize, epoch: usize, loss: f64 },

    #[error("step {step} failed: {source}")]
    Step {
        step: usize,
        #[source]
        source: alloc::boxed::Box<Error>,
    },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            e @ Error::Step { .. } => e,
            e => Error::Step {
                step,
                source: alloc::boxed::Box::new(e),
            },
        }
    }
}
