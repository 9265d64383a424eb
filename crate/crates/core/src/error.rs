//! Error types shared across the solver suite.

use thiserror::Error;

/// Everything that can go wrong in the suite.
#[derive(Debug, Error)]
pub enum Error {
    /// Two vectors (or a vector and a session/solver) cannot be used
    /// together. `property` names the mismatching attribute.
    #[error("incompatible vectors: {property} mismatch ({detail})")]
    Incompatible { property: &'static str, detail: String },

    /// Matrix operands disagree in shape, family, or sparse format.
    #[error("incompatible matrices: {0}")]
    MatrixIncompatible(String),

    /// Operation is undefined on the given shape (e.g. non-square input).
    #[error("shape error: {0}")]
    Shape(String),

    /// Index outside the valid range.
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    /// Argument outside the operation's domain (empty vector, zero-length
    /// norm, stop time behind the current time, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Exactly-zero pivot during LU factorization; carries the failing
    /// column index (0-based).
    #[error("singular matrix: zero pivot in column {column}")]
    SingularMatrix { column: usize },

    /// Iterative linear solver failed to converge within its restart
    /// budget; carries the final preconditioned residual norm.
    #[error("linear solver did not converge: final residual norm {residual}")]
    ConvergenceFailure { residual: f64 },

    /// A linear solver instance was attached to a second session.
    #[error("linear solver already attached to a session")]
    AlreadyAttached,

    /// A solver-family-specific accessor was called on a session configured
    /// with a different linear solver.
    #[error("wrong solver: {0}")]
    WrongSolver(String),

    /// Session method called out of lifecycle order.
    #[error("lifecycle error: {0}")]
    Lifecycle(String),

    /// Variant mismatch (e.g. unwrapping a non-custom solver or vector).
    #[error("variant error: {0}")]
    Variant(String),

    /// The integrator could not reach the requested output time.
    #[error("too much work: {0}")]
    TooMuchWork(String),

    /// Repeated local error test failures at the minimum step size.
    #[error("error test failed repeatedly: {0}")]
    ErrFailure(String),

    /// The nonlinear solver inside the integrator failed unrecoverably.
    #[error("nonlinear solver failure: {0}")]
    NonlinearFailure(String),

    /// Consistent-initialization (calc_ic) failure.
    #[error("initial condition calculation failed: {0}")]
    InitFailure(String),

    /// A user callback signalled an unrecoverable failure.
    #[error("callback failure: {0}")]
    Callback(String),

    /// I/O error (benchmark harness, output diffing).
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Signal returned by user callbacks (right-hand sides, residuals,
/// preconditioners). `Recoverable` asks the integrator to retry with a
/// smaller step; `Fatal` aborts the solve.
#[derive(Debug, Clone)]
pub enum CallbackError {
    Recoverable,
    Fatal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand for callback signatures.
pub type CallbackResult = std::result::Result<(), CallbackError>;
