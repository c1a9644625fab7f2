use thiserror::Error;

/// Errors raised by the simulation and diagnostics layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite value in {context} at index {index}")]
    NonFinite { context: &'static str, index: usize },

    #[error("grid must have an even point count >= 8, got {0}")]
    InvalidGrid(usize),

    #[error("field length {got} does not match grid size {expected}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("mollifier width {eps} is below the grid spacing {dx}; refine the grid or widen the kernel")]
    KernelUnresolved { eps: f64, dx: f64 },

    #[error("{map}: argument {value} outside tabulated range [{lo}, {hi}]")]
    OutOfRange {
        map: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("{map}: tabulation is not strictly increasing near u = {at} (coefficient bounds violated?)")]
    NonMonotonic { map: &'static str, at: f64 },

    #[error("h has no zero in the working range [{lo}, {hi}]")]
    NoZeroOfH { lo: f64, hi: f64 },

    #[error("empty noise profile list (set allow_deterministic for noise-free runs)")]
    EmptyNoise,

    #[error("CFL violated: dt = {dt} exceeds {limit}")]
    Cfl { dt: f64, limit: f64 },

    #[error("tridiagonal system is not diagonally dominant at row {row}")]
    NotDiagonallyDominant { row: usize },

    #[error("{0}")]
    InvalidInput(String),

    #[error("{what}: need at least {need}, got {got}")]
    NotEnoughData {
        what: &'static str,
        need: usize,
        got: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("path {index} (seed {seed}) failed: {source}")]
    PathFailed {
        index: usize,
        seed: u64,
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
