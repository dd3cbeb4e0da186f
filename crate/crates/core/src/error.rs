use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent configuration; `path` names the offending field.
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    /// A precondition on an argument failed (empty ensemble, N < 2, ...).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate cost: self weight is {0}, must be > 0")]
    DegenerateCost(f64),

    #[error("degenerate price: total risky holding is {0}")]
    DegeneratePrice(f64),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("unnormalized density: mass {mass} differs from 1 by more than {tol:e}")]
    UnnormalizedDensity { mass: f64, tol: f64 },

    #[error("unsupported dimension {0}")]
    UnsupportedDimension(usize),

    /// Step-size violation; carries the offending Courant number and the speed that caused it.
    #[error(
        "CFL violation: courant number {courant:.4} exceeds {limit} (max speed {max_speed:.6e})"
    )]
    Cfl {
        courant: f64,
        limit: f64,
        max_speed: f64,
    },

    #[error("numerical instability: {0}")]
    Instability(String),

    #[error("domain too small: {0}")]
    DomainTooSmall(String),

    #[error("system too large: N*d = {size} exceeds cap {cap}")]
    SizeCap { size: usize, cap: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code used by the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Cfl { .. } | Error::Instability(_) | Error::DomainTooSmall(_) => 4,
            Error::Io { .. } => 5,
            _ => 1,
        }
    }
}
