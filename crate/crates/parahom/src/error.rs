//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by the corrector, smoothing, solver and harness layers.
#[derive(Error, Debug)]
pub enum Error {
    /// The iterative cell solver hit its iteration cap before reaching the
    /// requested residual. Usually signals under-resolution or
    /// near-degenerate ellipticity.
    #[error("iteration limit exceeded after {iterations} iterations (residual {residual:.3e}, target {target:.3e})")]
    IterationLimitExceeded {
        iterations: usize,
        residual: f64,
        target: f64,
    },

    /// A probe matrix violated the ellipticity bounds of a coefficient field.
    #[error("ellipticity violation at sample {location:?}: quadratic form {value:.6e} outside [{lower:.6e}, {upper:.6e}]")]
    EllipticityViolation {
        location: Vec<f64>,
        value: f64,
        lower: f64,
        upper: f64,
    },

    /// The discrepancy field handed to the Poisson solve has a nonzero mean,
    /// so the periodic problem is not solvable. Signals an unconverged
    /// upstream cell solve.
    #[error("discrepancy component ({i},{j},{alpha},{beta}) has mean {mean:.3e}; periodic Poisson problem unsolvable")]
    NonZeroMean {
        i: usize,
        j: usize,
        alpha: usize,
        beta: usize,
        mean: f64,
    },

    /// The scaled kernel support covers too few grid cells for the
    /// convolution quadrature to make sense.
    #[error("under-resolved kernel: support spans {cells:.2} cells on axis {axis} (need >= {min})")]
    UnderResolvedKernel { axis: usize, cells: f64, min: f64 },

    /// The boundary-layer width must satisfy 2*eps < delta < 20*eps.
    #[error("layer width {delta:.6e} outside (2 eps, 20 eps) = ({:.6e}, {:.6e})", 2.0 * eps, 20.0 * eps)]
    BadLayerWidth { delta: f64, eps: f64 },

    /// A per-step linear solve failed (singular pivot or stalled iteration).
    #[error("time-step solve failed at step {step}: {detail}")]
    StepSolveFailure { step: usize, detail: String },

    /// The requested space-time grid does not resolve the oscillation scale.
    #[error("grid policy violation: {0}")]
    PolicyViolation(String),

    /// The windowed-supremum diagnostic needs at least two time levels per
    /// eps^2 window.
    #[error("window too coarse: {levels} time levels per eps^2 window (need >= 2)")]
    WindowTooCoarse { levels: usize },

    /// Two fields that must share a grid do not.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// A test field is not compactly supported inside the space-time cylinder.
    #[error("test field {index} violates compact support: |psi| = {value:.3e} at {location:?}")]
    TestFieldSupportViolation {
        index: usize,
        value: f64,
        location: Vec<f64>,
    },

    /// Slope fitting was asked to operate on non-positive or exact data.
    #[error("degenerate data for slope fit: {0}")]
    DegenerateData(String),

    /// A study would exceed the per-run grid-point budget.
    #[error("budget exceeded: {points} space-time points (cap {cap})")]
    BudgetExceeded { points: usize, cap: usize },

    /// Invalid configuration value.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Errors annotated with the epsilon at which a study step failed.
    #[error("study failed at eps = {eps}: {source}")]
    AtEps {
        eps: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed {format} file: {detail}")]
    BadFileFormat { format: String, detail: String },

    #[error("config parse error: {0}")]
    ConfigParse(String),
}

impl Error {
    /// Attach the epsilon of the failing study step.
    pub fn at_eps(self, eps: f64) -> Self {
        Error::AtEps {
            eps,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
